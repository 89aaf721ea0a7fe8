"""Count how often a wider beam scores worse than a narrower one, and beam 5 worse than greedy.

Length-synchronized beam search prunes, so neither ordering is guaranteed.
    python scripts/beam_width_scan.py --models 200
"""

import argparse

import numpy as np

from threem.gradcheck import random_batch, tiny_model
from threem.inference import PenaltyConfig, beam_search, greedy_decode


def scan(n_models: int, vocab: int, penalties: bool) -> tuple[int, int]:
    greedy_wins = non_monotone = 0
    for seed in range(n_models):
        rng = np.random.default_rng(seed)
        model = tiny_model(seed, vocab_size=vocab, init_scale=1.5)
        enc = model.encode_batch(random_batch(model.config, rng, batch=1))
        cfg = PenaltyConfig(banned_end_tokens=frozenset({5, 6}), max_length=6) if penalties else PenaltyConfig.off(6)
        scores = [beam_search(model, enc, k, cfg).score for k in range(1, 7)]
        greedy_wins += scores[4] < greedy_decode(model, enc, cfg).score - 1e-12
        non_monotone += any(b < a - 1e-12 for a, b in zip(scores, scores[1:]))
    return greedy_wins, non_monotone


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--models", type=int, default=200)
    ap.add_argument("--vocab", type=int, default=12)
    args = ap.parse_args()
    for penalties in (False, True):
        g, m = scan(args.models, args.vocab, penalties)
        print(f"penalties {'on ' if penalties else 'off'}: greedy beats beam 5 in {g}/{args.models}, "
              f"score not monotone in width 1..6 in {m}/{args.models}")
