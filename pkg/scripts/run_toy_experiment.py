"""Memorise the toy corpus, then caption every image in every style.

    python scripts/run_toy_experiment.py --out runs/toy
"""

import argparse
import json
import time
from pathlib import Path

from threem.cli import main


def run(out: Path, epochs: int | None) -> None:
    toy = out / "toy"
    main(["make-toy", "--out", str(toy)])
    extra = ["--epochs", str(epochs)] if epochs else []
    t0 = time.perf_counter()
    main(["train", "--data", str(toy / "toy.jsonl"), "--config", str(toy / "toy_config.json"),
          "--out", str(out / "model"), *extra])
    print(f"trained in {time.perf_counter() - t0:.0f}s")
    gen = out / "captions.jsonl"
    main(["generate", "--checkpoint", str(out / "model" / "model.ckpt"), "--data", str(toy / "toy.jsonl"),
          "--out", str(gen), "--all-styles"])
    for line in gen.read_text().splitlines():
        row = json.loads(line)
        print(f"{row['image_id']}  {row['style']:>9s}  {row['caption']}")
    main(["eval", "--candidates", str(gen), "--references", str(toy / "toy.jsonl"),
          "--out", str(out / "metrics.json")])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy", type=Path)
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()
    run(args.out, args.epochs)
