"""Train, caption and score the full model and each single-component ablation on the toy corpus.

    python scripts/run_ablation.py --out runs/ablation --epochs 60
"""

import argparse
from pathlib import Path

from threem.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation", type=Path)
    ap.add_argument("--epochs", type=int, default=60)
    args = ap.parse_args()
    toy = args.out / "toy"
    main(["make-toy", "--out", str(toy)])
    raise SystemExit(main(["ablate", "--data", str(toy / "toy.jsonl"), "--config", str(toy / "toy_config.json"),
                           "--out", str(args.out), "--epochs", str(args.epochs)]))
