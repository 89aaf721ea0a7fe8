"""Dataset ingestion, vocabularies and batch assembly.

Dataset files are JSON lines::

    {"image_id": "img0", "style": "romantic", "caption": "...",
     "dense_captions": ["...", ...], "features_ref": "feats.bin"}

``features_ref`` points (relative to the dataset file) at a binary feature
file; see :func:`write_features` for its layout.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, ParameterError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_DENSE = 5
# an absent dense caption is encoded as the single token EOS
EMPTY_CAPTION = (EOS,)

FEATURE_MAGIC = b"3MFT"
FEATURE_VERSION = 1

_TOKEN_RE = re.compile(r"<(?:pad|bos|eos|unk)>|[^\W_]+(?:'[^\W_]+)*")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation; punctuation is dropped, reserved tokens kept whole."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    itos: list[str]
    min_frequency: int = 1
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens " + ", ".join(SPECIAL_TOKENS))
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def encode_caption(self, text: str) -> list[int]:
        """BOS + token ids + EOS."""
        return [BOS, *self.encode(tokenize(text)), EOS]


def build_vocab(captions: Iterable[Sequence[str]], min_frequency: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_frequency`` times.

    Ids are assigned by descending frequency, ties broken lexicographically,
    after the four reserved ids.
    """
    if min_frequency < 1:
        raise ParameterError(f"min_frequency must be >= 1, got {min_frequency}")
    counts: Counter[str] = Counter()
    n = 0
    for tokens in captions:
        counts.update(tokens)
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty caption stream")
    kept = sorted((t for t, c in counts.items() if c >= min_frequency and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept, min_frequency)


@dataclass
class StyleVocabulary:
    names: list[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate style names")
        self._ids = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise DataError(f"unknown style {name!r}; known styles: {', '.join(self.names)}") from None

    def name(self, idx: int) -> str:
        return self.names[idx]

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "StyleVocabulary":
        return cls(sorted(set(names)))


# -- feature files -----------------------------------------------------------
# header: magic "3MFT", version u32, D_v u32, R u32 (little endian)
# body: per image, mean_pooled [D_v] then spatial [R x D_v], float32
# side manifest <file>.index.json maps image_id -> byte offset of its block

_HEADER = struct.Struct("<4sIII")


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index.json")


def write_features(path: str | Path, features: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    """Write ``{image_id: (mean_pooled [D_v], spatial [R x D_v])}`` plus its manifest."""
    if not features:
        raise DataError("no features to write")
    first_mean, first_spatial = next(iter(features.values()))
    d_v, r = int(first_mean.shape[0]), int(first_spatial.shape[0])
    offsets = {}
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, d_v, r))
        for image_id, (mean, spatial) in features.items():
            if mean.shape != (d_v,) or spatial.shape != (r, d_v):
                raise DataError(f"feature shape mismatch for {image_id!r}")
            offsets[image_id] = fh.tell()
            fh.write(np.asarray(mean, dtype="<f4").tobytes())
            fh.write(np.asarray(spatial, dtype="<f4").tobytes())
    manifest_path(path).write_text(json.dumps(offsets, indent=1, sort_keys=True))


class FeatureStore:
    """Random access reader for a feature file and its manifest."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise DataError(f"features file not found: {self.path}")
        index = manifest_path(self.path)
        if not index.exists():
            raise DataError(f"features manifest not found: {index}")
        self._blob = self.path.read_bytes()
        if len(self._blob) < _HEADER.size:
            raise DataError(f"{self.path}: truncated header")
        magic, version, d_v, r = _HEADER.unpack_from(self._blob)
        if magic != FEATURE_MAGIC:
            raise DataError(f"{self.path}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise DataError(f"{self.path}: unsupported version {version}")
        self.feature_dim, self.n_regions = d_v, r
        try:
            self.offsets = {k: int(v) for k, v in json.loads(index.read_text()).items()}
        except (json.JSONDecodeError, AttributeError, TypeError, ValueError) as exc:
            raise DataError(f"{index}: malformed manifest ({exc})") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.offsets

    def get(self, image_id: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            off = self.offsets[image_id]
        except KeyError:
            raise DataError(f"{self.path}: no features for image {image_id!r}") from None
        d_v, r = self.feature_dim, self.n_regions
        n = d_v * (r + 1)
        if off < _HEADER.size or off + 4 * n > len(self._blob):
            raise DataError(f"{self.path}: block for {image_id!r} exceeds file size")
        block = np.frombuffer(self._blob, dtype="<f4", count=n, offset=off).astype(np.float64)
        return block[:d_v].copy(), block[d_v:].reshape(r, d_v).copy()


# -- records -----------------------------------------------------------------

@dataclass(frozen=True)
class ExampleRecord:
    image_id: str
    mean_pooled: np.ndarray
    spatial: np.ndarray
    dense_captions: tuple[tuple[int, ...], ...]
    style: int
    target: tuple[int, ...]
    caption: str = ""


_REQUIRED = ("image_id", "style", "caption", "dense_captions", "features_ref")


def read_jsonl(path: str | Path, required: Sequence[str] = _REQUIRED) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in required if k not in row]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            row["_line"] = lineno
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no records")
    return rows


def caption_token_stream(rows: Iterable[dict], include_dense: bool = True) -> Iterator[list[str]]:
    """Token lists counted for vocabulary construction (targets and dense captions)."""
    for row in rows:
        yield tokenize(row["caption"])
        if include_dense:
            for d in row["dense_captions"]:
                yield tokenize(d)


def encode_dense(captions: Sequence[str], vocab: Vocabulary) -> tuple[tuple[int, ...], ...]:
    encoded = [tuple(vocab.encode(tokenize(c))) or EMPTY_CAPTION for c in captions[:N_DENSE]]
    while len(encoded) < N_DENSE:
        encoded.append(EMPTY_CAPTION)
    return tuple(encoded)


def load_dataset(
    path: str | Path,
    vocab: Vocabulary,
    style_vocab: StyleVocabulary,
    features: str | Path | None = None,
    for_generation: bool = False,
) -> list[ExampleRecord]:
    """Read a dataset file into records; ``features`` overrides every ``features_ref``.

    With ``for_generation`` the caption and style fields may be omitted
    (target becomes BOS EOS, style becomes -1).
    """
    path = Path(path)
    required = ("image_id", "dense_captions") if for_generation else _REQUIRED[:-1]
    if features is None:
        required = (*required, "features_ref")
    rows = read_jsonl(path, required)
    stores: dict[Path, FeatureStore] = {}
    dims = None
    records = []
    for row in rows:
        where = f"{path}:{row['_line']}"
        ref = Path(features) if features is not None else path.parent / str(row["features_ref"])
        if ref not in stores:
            stores[ref] = FeatureStore(ref)
        store = stores[ref]
        if dims is None:
            dims = (store.feature_dim, store.n_regions)
        elif dims != (store.feature_dim, store.n_regions):
            raise DataError(f"{where}: feature dimensions {store.feature_dim}x{store.n_regions} "
                            f"disagree with {dims[0]}x{dims[1]}")
        dense = row["dense_captions"]
        if not isinstance(dense, list) or not all(isinstance(d, str) for d in dense):
            raise DataError(f"{where}: dense_captions must be a list of strings")
        if len(dense) > N_DENSE:
            raise DataError(f"{where}: {len(dense)} dense captions, at most {N_DENSE} allowed")
        mean, spatial = store.get(str(row["image_id"]))
        style = -1
        if "style" in row or not for_generation:
            try:
                style = style_vocab.id(row["style"])
            except DataError as exc:
                raise DataError(f"{where}: {exc}") from None
        target = tuple(vocab.encode_caption(str(row.get("caption", ""))))
        if len(target) <= 2 and not for_generation:
            raise DataError(f"{where}: empty caption")
        records.append(ExampleRecord(
            image_id=str(row["image_id"]), mean_pooled=mean, spatial=spatial,
            dense_captions=encode_dense(dense, vocab), style=style, target=target,
            caption=str(row.get("caption", "")),
        ))
    return records


# -- batches -----------------------------------------------------------------

@dataclass
class Batch:
    targets: np.ndarray          # [B x T] int, PAD-padded, BOS ... EOS
    mask: np.ndarray             # [B x T] float, 1 on real tokens
    mean_pooled: np.ndarray      # [B x D_v]
    spatial: np.ndarray          # [B x R x D_v]
    styles: np.ndarray           # [B] int
    dense: np.ndarray            # [B x 5 x T_c] int, PAD-padded
    dense_lengths: np.ndarray    # [B x 5] int, all >= 1
    image_ids: list[str]

    def __len__(self) -> int:
        return len(self.image_ids)

    def sequences(self) -> list[list[int]]:
        """Unpad the target matrix."""
        return [row[m > 0].tolist() for row, m in zip(self.targets, self.mask)]


def collate(records: Sequence[ExampleRecord]) -> Batch:
    b = len(records)
    t_max = max(len(r.target) for r in records)
    targets = np.full((b, t_max), PAD, dtype=np.int64)
    mask = np.zeros((b, t_max))
    for i, r in enumerate(records):
        targets[i, :len(r.target)] = r.target
        mask[i, :len(r.target)] = 1.0
    lengths = np.array([[len(c) for c in r.dense_captions] for r in records], dtype=np.int64)
    dense = np.full((b, N_DENSE, int(lengths.max())), PAD, dtype=np.int64)
    for i, r in enumerate(records):
        for j, c in enumerate(r.dense_captions):
            dense[i, j, :len(c)] = c
    return Batch(
        targets=targets, mask=mask,
        mean_pooled=np.stack([r.mean_pooled for r in records]),
        spatial=np.stack([r.spatial for r in records]),
        styles=np.array([r.style for r in records], dtype=np.int64),
        dense=dense, dense_lengths=lengths,
        image_ids=[r.image_id for r in records],
    )


def batch_iter(records: Sequence[ExampleRecord], batch_size: int,
               shuffle_seed: int | None = None) -> Iterator[Batch]:
    """Yield batches in file order, or in a seeded permutation; the last batch may be short."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for lo in range(0, len(records), batch_size):
        yield collate([records[i] for i in order[lo:lo + batch_size]])
