"""Command-line entry point: ``threem <command> [flags]``.

Commands: make-toy, train, generate, eval, ablate, gradcheck. Settings come
from built-in defaults, then an optional ``--config`` JSON file, then flags.
Every command that writes outputs also writes the fully resolved settings
next to them.

Exit status: 0 ok, 2 usage, 3 data, 4 numeric, 5 contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .corpus import StyleVocabulary, Vocabulary, build_vocab, caption_token_stream, load_dataset, read_jsonl
from .errors import ContractError, DataError, ThreeMError, UsageError
from .gradcheck import check_model, check_ops
from .inference import DEFAULT_BANNED_ENDINGS, PenaltyConfig, beam_search, encode_example
from .metrics import REPORT_FIELDS, EvalCorpus, report
from .model import ModelConfig, MultiUpDown
from .toy import make_toy
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("threem")

# model fields that come from the data rather than from settings
_DATA_FIELDS = ("vocab_size", "n_styles", "feature_dim")

DEFAULTS = {
    "train": asdict(TrainConfig()),
    "model": {f.name: f.default for f in fields(ModelConfig) if f.name not in _DATA_FIELDS},
    "data": {"min_frequency": 5},
    "decode": {"beam": 5, "repeat_penalty": 2.0, "max_length": 16, "min_length": 3,
               "banned_endings": list(DEFAULT_BANNED_ENDINGS)},
}

# flag dest -> (section, key)
FLAG_MAP = {
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "initial_lr"),
    "decay_every": ("train", "decay_every"),
    "decay_factor": ("train", "decay_factor"),
    "eval_interval": ("train", "eval_interval"),
    "seed": ("train", "seed"),
    "min_freq": ("data", "min_frequency"),
    "beam": ("decode", "beam"),
    "max_len": ("decode", "max_length"),
    "min_len": ("decode", "min_length"),
}


def thread_count() -> int:
    raw = os.environ.get("THREEM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"THREEM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("THREEM_THREADS must be >= 1")
    return n


def resolve_settings(args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    settings = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: malformed JSON ({exc.msg})") from None
        for section, values in user.items():
            if section not in settings or not isinstance(values, dict):
                raise UsageError(f"{path}: unknown config section {section!r}")
            for key, value in values.items():
                if key not in settings[section]:
                    raise UsageError(f"{path}: unknown field {section}.{key}")
                settings[section][key] = value
    for dest, (section, key) in FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is not None:
            settings[section][key] = value
    for flag, key in (("no_style", "use_style"), ("no_text", "use_text"), ("no_visual", "use_visual")):
        if getattr(args, flag, False):
            settings["model"][key] = False
    if getattr(args, "dropout", None) is not None:
        settings["model"]["visual_dropout"] = settings["model"]["output_dropout"] = args.dropout
    return settings


def _build(cls, values: dict, section: str, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} settings: {exc}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def penalty_config(settings: dict, vocab: Vocabulary) -> PenaltyConfig:
    d = settings["decode"]
    try:
        return PenaltyConfig.for_vocab(vocab, banned_endings=d["banned_endings"], repeat_penalty=d["repeat_penalty"],
                                       max_length=d["max_length"], min_length=d["min_length"])
    except ValueError as exc:
        raise UsageError(f"invalid decode settings: {exc}") from None


# -- train ---------------------------------------------------------------------

def run_train(settings: dict, data: str, out: Path, features: str | None = None,
              val_data: str | None = None) -> dict:
    train_cfg = _build(TrainConfig, settings["train"], "train")
    rows = read_jsonl(data)
    vocab = build_vocab(caption_token_stream(rows), settings["data"]["min_frequency"])
    styles = StyleVocabulary.from_names(str(r["style"]) for r in rows)
    train = load_dataset(data, vocab, styles, features)
    val = load_dataset(val_data, vocab, styles, features) if val_data else None
    feature_dim = int(train[0].mean_pooled.shape[0])
    model_cfg = _build(ModelConfig, settings["model"], "model", vocab_size=len(vocab),
                       n_styles=len(styles), feature_dim=feature_dim)
    model = MultiUpDown.create(model_cfg, train_cfg.seed)
    result = fit(model, train, train_cfg, val)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"vocab": vocab.itos, "min_frequency": vocab.min_frequency, "styles": styles.names,
            "train": asdict(train_cfg)}
    save_checkpoint(out / "model.ckpt", model, meta, params=result.best_params)
    (out / "train_log.csv").write_text(result.log_csv())
    _write_json(out / "config.json", {"command": "train", "data": str(data), "features": features,
                                      "val_data": val_data, **settings})
    return {"best_val_loss": result.best_val_loss, "iterations": len(result.iteration_losses)}


# -- generate ------------------------------------------------------------------

def _load_model(checkpoint: str) -> tuple[MultiUpDown, Vocabulary, StyleVocabulary]:
    model, meta = load_checkpoint(checkpoint)
    return model, Vocabulary(meta["vocab"], meta.get("min_frequency", 1)), StyleVocabulary(meta["styles"])


def generation_jobs(records, styles: StyleVocabulary, all_styles: bool, style: str | None):
    """(record, style id) pairs: dataset pairs by default, deduplicated in file order."""
    jobs, seen = [], set()
    for rec in records:
        if all_styles:
            wanted = range(len(styles))
        elif style is not None:
            wanted = [styles.id(style)]
        else:
            if rec.style < 0:
                raise UsageError(f"record for {rec.image_id} has no style; pass --style or --all-styles")
            wanted = [rec.style]
        for s in wanted:
            if (rec.image_id, s) not in seen:
                seen.add((rec.image_id, s))
                jobs.append((rec, s))
    return jobs


def run_generate(settings: dict, checkpoint: str, data: str, out: Path, features: str | None = None,
                 all_styles: bool = False, style: str | None = None) -> list[dict]:
    model, vocab, styles = _load_model(checkpoint)
    if style is not None and style not in styles.names:
        raise UsageError(f"unknown style {style!r}; known styles: {', '.join(styles.names)}")
    records = load_dataset(data, vocab, styles, features, for_generation=True)
    penalties = penalty_config(settings, vocab)
    beam = int(settings["decode"]["beam"])
    if beam < 1:
        raise UsageError("beam must be >= 1")
    jobs = generation_jobs(records, styles, all_styles, style)

    def decode(job):
        rec, s = job
        gen = beam_search(model, encode_example(model, rec, s), beam, penalties)
        return {"image_id": rec.image_id, "style": styles.name(s), "caption": gen.text(vocab),
                "score": float(gen.score)}

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(pool.map(decode, jobs))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in results))
    _write_json(out.with_name(out.name + ".config.json"),
                {"command": "generate", "checkpoint": str(checkpoint), "data": str(data), "features": features,
                 "all_styles": all_styles, "style": style, **settings})
    return results


# -- eval ----------------------------------------------------------------------

def _key(row: dict) -> str:
    return f"{row['image_id']}|{row['style']}" if "style" in row else str(row["image_id"])


def run_eval(candidates: str, references: str) -> dict:
    if Path(candidates).exists() and not Path(candidates).read_text().strip():
        raise ContractError(f"candidate file {candidates} is empty")
    cand_rows = read_jsonl(candidates, ("image_id", "caption"))
    ref_rows = read_jsonl(references, ("image_id", "caption"))
    cands: dict[str, str] = {}
    for row in cand_rows:
        key = _key(row)
        if key in cands:
            raise DataError(f"{candidates}:{row['_line']}: duplicate candidate for {key}")
        cands[key] = row["caption"]
    refs: dict[str, list[str]] = {}
    for row in ref_rows:
        refs.setdefault(_key(row), []).append(row["caption"])
    return report(EvalCorpus.from_texts(cands, refs))


# -- ablate --------------------------------------------------------------------

ABLATIONS = {
    "full": {},
    "no-style": {"use_style": False},
    "no-text": {"use_text": False},
    "no-visual": {"use_visual": False},
}


def style_separation(rows: list[dict]) -> float:
    """Fraction of images whose captions differ across all generated styles."""
    by_image: dict[str, list[str]] = {}
    for r in rows:
        by_image.setdefault(r["image_id"], []).append(r["caption"])
    distinct = [len(set(c)) == len(c) for c in by_image.values()]
    return sum(distinct) / len(distinct)


def run_ablate(settings: dict, data: str, out: Path, features: str | None = None,
               configs: list[str] | None = None) -> list[dict]:
    rows = []
    out.mkdir(parents=True, exist_ok=True)
    for name in configs or list(ABLATIONS):
        run_settings = json.loads(json.dumps(settings))
        run_settings["model"].update(ABLATIONS[name])
        run_dir = out / name
        run_train(run_settings, data, run_dir, features)
        gens = run_generate(run_settings, str(run_dir / "model.ckpt"), data, run_dir / "captions.jsonl", features)
        multi = run_generate(run_settings, str(run_dir / "model.ckpt"), data, run_dir / "all_styles.jsonl",
                             features, all_styles=True)
        metrics = run_eval(str(run_dir / "captions.jsonl"), data)
        _write_json(run_dir / "metrics.json", metrics)
        m = run_settings["model"]
        rows.append({"config": name, "personality": m["use_style"], "text_features": m["use_text"],
                     "visual_features": m["use_visual"], **metrics,
                     "style_separation": style_separation(multi), "n_captions": len(gens)})
    header = list(rows[0])
    lines = [",".join(header)] + [",".join(str(r[h]) for h in header) for r in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "ablation.json", rows)
    _write_json(out / "config.json", {"command": "ablate", "data": str(data), "features": features, **settings})
    return rows


# -- gradcheck -----------------------------------------------------------------

def run_gradcheck(seed: int = 0, eps: float = 1e-6) -> tuple[bool, list[str]]:
    lines = []
    ok = True
    for title, results in (("op", check_ops(seed, eps)), ("group", check_model(seed, eps))):
        for r in results:
            ok &= r.passed
            lines.append(f"{title:5s} {r.name:16s} max_rel_err={r.error:.3e} tol={r.tolerance:.0e} "
                         f"{'PASS' if r.passed else 'FAIL'}")
    return ok, lines


# -- argument parsing ------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--min-freq", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--no-style", action="store_true")
    p.add_argument("--no-text", action="store_true")
    p.add_argument("--no-visual", action="store_true")


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--min-len", type=int)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="threem", description="Multi-style captioning with a dual-branch top-down decoder.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy", help="write a synthetic multi-style corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--styles", default="romantic,anxious")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--regions", type=int, default=49)

    p = sub.add_parser("train", help="teacher-forced training")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _add_train_flags(p)

    p = sub.add_parser("generate", help="beam-search captions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--style")
    p.add_argument("--all-styles", action="store_true")
    _add_decode_flags(p)

    p = sub.add_parser("eval", help="score candidates against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train/generate/evaluate each ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--only", help="comma-separated subset of " + ",".join(ABLATIONS))
    _add_train_flags(p)
    _add_decode_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "make-toy":
        path = make_toy(args.out, n_images=args.images, styles=tuple(args.styles.split(",")),
                        feature_dim=args.feature_dim, n_regions=args.regions, seed=args.seed)
        _write_json(Path(args.out) / "toy_config.json", TOY_SETTINGS)
        print(path)
        return 0
    if args.command == "gradcheck":
        ok, lines = run_gradcheck(args.seed, args.eps)
        print("\n".join(lines))
        print("gradcheck " + ("passed" if ok else "FAILED"))
        return 0 if ok else 4
    if args.command == "eval":
        metrics = run_eval(args.candidates, args.references)
        text = json.dumps(metrics, indent=2, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n")
        print(text)
        return 0
    settings = resolve_settings(args)
    if args.command == "train":
        summary = run_train(settings, args.data, Path(args.out), args.features, args.val_data)
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "generate":
        rows = run_generate(settings, args.checkpoint, args.data, Path(args.out), args.features,
                            args.all_styles, args.style)
        print(f"wrote {len(rows)} captions to {args.out}")
    elif args.command == "ablate":
        only = args.only.split(",") if args.only else None
        unknown = set(only or []) - set(ABLATIONS)
        if unknown:
            raise UsageError(f"unknown ablation(s) {sorted(unknown)}; choose from {', '.join(ABLATIONS)}")
        rows = run_ablate(settings, args.data, Path(args.out), args.features, only)
        cols = ("config", *REPORT_FIELDS, "style_separation")
        print("  ".join(f"{c:>12s}" for c in cols))
        for r in rows:
            print("  ".join(f"{r[c]:>12.4f}" if isinstance(r[c], float) else f"{r[c]!s:>12s}" for c in cols))
    return 0


# Settings under which the toy corpus is memorised in a couple hundred epochs at the
# default learning rate: constant LR, every token kept, narrow layers, no dropout.
TOY_SETTINGS = {
    "train": {"epochs": 200, "decay_factor": 1.0, "batch_size": 2, "eval_interval": 400},
    "data": {"min_frequency": 1},
    "model": {"word_dim": 64, "style_embed_dim": 32, "style_dim": 32, "caption_enc_dim": 64,
              "visual_enc_dim": 64, "hidden_dim": 64, "att_dim": 64,
              "visual_dropout": 0.0, "output_dropout": 0.0},
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # a single BLAS thread keeps results bit-identical whatever THREEM_THREADS says
        with threadpool_limits(1):
            return _dispatch(args)
    except ThreeMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
