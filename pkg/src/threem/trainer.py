"""Teacher-forced training: masked cross-entropy, Adam, stepped LR decay, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import ExampleRecord, batch_iter
from .errors import ContractError, DataError, NumericError, ParameterError
from .model import ModelConfig, MultiUpDown

log = logging.getLogger(__name__)


def sequence_loss(logprobs: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the positions where ``mask`` is 1."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=logprobs.dtype)
    if logprobs.ndim != 3 or logprobs.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ContractError(f"loss shapes disagree: logprobs {logprobs.shape}, targets {targets.shape}, "
                            f"mask {mask.shape}")
    total = float(mask.sum())
    if total == 0:
        raise ContractError("loss mask selects no tokens")
    picked = ad.take_along(logprobs, targets[..., None], axis=-1)
    return ad.sum(picked * mask[..., None]) * (-1.0 / total)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update in place; a missing grad counts as zero."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class TrainConfig:
    initial_lr: float = 5e-4
    decay_every: int = 5
    decay_factor: float = 0.8
    epochs: int = 30
    batch_size: int = 128
    eval_interval: int = 3000
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        for name in ("initial_lr", "decay_every", "decay_factor", "epochs", "batch_size", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.clip_norm < 0:
            raise ParameterError("clip_norm must be >= 0")


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.initial_lr * config.decay_factor ** (epoch // config.decay_every)


LOG_FIELDS = ("iteration", "epoch", "lr", "train_loss", "val_loss")


@dataclass
class TrainResult:
    log: list[dict]
    iteration_losses: list[float]
    best_params: dict[str, np.ndarray]
    best_val_loss: float

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def evaluate_loss(model: MultiUpDown, records: Sequence[ExampleRecord], batch_size: int) -> float:
    """Token-weighted mean cross-entropy in eval mode."""
    total = count = 0.0
    with ad.no_grad():
        for batch in batch_iter(records, batch_size):
            n = float(batch.mask[:, 1:].sum())
            total += model.loss(batch).item() * n
            count += n
    return total / count


def fit(model: MultiUpDown, train: Sequence[ExampleRecord], config: TrainConfig,
        val: Sequence[ExampleRecord] | None = None) -> TrainResult:
    """Train in place; validation loss is logged every ``eval_interval`` iterations and at the end.

    Without a validation split the training records are scored instead.
    Returns the log and a copy of the best-by-validation parameters.
    """
    if not train:
        raise DataError("training set is empty")
    val = val if val else train
    params = model.params
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    rows: list[dict] = []
    losses: list[float] = []
    best_loss = np.inf
    best = {k: p.data.copy() for k, p in params.items()}
    window: list[float] = []
    iteration = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        batches = list(batch_iter(train, config.batch_size, shuffle_seed=config.seed * 100003 + epoch))
        for bi, batch in enumerate(batches):
            ad.zero_grad(params.values())
            loss = model.loss(batch, training=True, rng=rng)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at iteration {iteration}")
            loss.backward()
            clip_grad_norm(params, config.clip_norm)
            adam_step(params, state, lr)
            iteration += 1
            losses.append(loss.item())
            window.append(loss.item())
            last = epoch == config.epochs - 1 and bi == len(batches) - 1
            if iteration % config.eval_interval == 0 or last:
                val_loss = evaluate_loss(model, val, config.batch_size)
                rows.append({"iteration": iteration, "epoch": epoch, "lr": lr,
                             "train_loss": float(np.mean(window)), "val_loss": val_loss})
                log.info("iter %d epoch %d lr %.3g train %.4f val %.4f",
                         iteration, epoch, lr, rows[-1]["train_loss"], val_loss)
                window = []
                if val_loss < best_loss:
                    best_loss = val_loss
                    best = {k: p.data.copy() for k, p in params.items()}
    ad.zero_grad(params.values())
    return TrainResult(rows, losses, best, float(best_loss))


# -- checkpoints -------------------------------------------------------------
# magic "3MCK", version u32, sha256 digest of the metadata JSON (32 bytes),
# metadata length u32 + UTF-8 JSON (model config, vocab, styles, extras),
# parameter count u32, then per parameter: name length u16, name, ndim u8,
# dims u32 each, float64 little-endian data.

CKPT_MAGIC = b"3MCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, model: MultiUpDown, meta: dict | None = None,
                    params: dict[str, np.ndarray] | None = None) -> None:
    arrays = params if params is not None else {k: p.data for k, p in model.params.items()}
    metadata = json.dumps({"model": model.config.to_dict(), **(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CKPT_MAGIC, CKPT_VERSION))
        fh.write(hashlib.sha256(metadata).digest())
        fh.write(struct.pack("<I", len(metadata)))
        fh.write(metadata)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            data = np.asarray(arrays[name], dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path: str | Path) -> tuple[MultiUpDown, dict]:
    """Rebuild the model; returns it with the checkpoint metadata."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    try:
        magic, version = struct.unpack_from("<4sI", blob, 0)
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        pos = 8
        digest = blob[pos:pos + 32]
        pos += 32
        (n_meta,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        raw_meta = blob[pos:pos + n_meta]
        pos += n_meta
        if hashlib.sha256(raw_meta).digest() != digest:
            raise DataError(f"{path}: metadata digest mismatch")
        meta = json.loads(raw_meta)
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        cfg = ModelConfig(**meta.pop("model"))
        params = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n_name].decode()
            pos += n_name
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            params[name] = Tensor(data.astype(cfg.dtype), requires_grad=True, name=name)
    except (struct.error, ValueError, TypeError, KeyError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    return MultiUpDown(cfg, params), meta
