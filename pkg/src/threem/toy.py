"""Synthetic multi-style corpus with random visual features.

Each image gets its own colour/animal pair, random features, a handful of
dense captions (some images fewer than five, to exercise padding) and one
distinct target caption per style.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpus import write_features
from .errors import ParameterError

COLORS = ["red", "blue", "green", "brown", "black", "white", "pink", "gray",
          "orange", "purple", "yellow", "silver"]
ANIMALS = ["dog", "cat", "bird", "horse", "fish", "cow", "duck", "fox",
           "goat", "frog", "bear", "wolf"]
PLACES = ["grass", "snow", "sand", "water", "road", "field", "floor", "rock",
          "hill", "beach", "bridge", "porch"]

STYLE_TEMPLATES = {
    "romantic": "my heart melts for this {color} {animal}",
    "anxious": "i worry that {animal} might bite me",
    "happy": "what a cheerful {animal} near the {place}",
    "sarcastic": "oh great another {color} {animal} sitting around",
}

DENSE_TEMPLATES = [
    "a {color} {animal}",
    "{animal} on the {place}",
    "the {place} is {color}",
    "a small {animal} standing",
    "{color} fur on {animal}",
]


def make_toy(out_dir: str | Path, n_images: int = 8, styles: tuple[str, ...] = ("romantic", "anxious"),
             feature_dim: int = 16, n_regions: int = 49, seed: int = 0) -> Path:
    """Write ``toy.jsonl`` and ``toy_features.bin`` (plus manifest) into ``out_dir``."""
    if n_images > len(ANIMALS):
        raise ParameterError(f"at most {len(ANIMALS)} toy images")
    unknown = set(styles) - set(STYLE_TEMPLATES)
    if unknown:
        raise ParameterError(f"no toy template for styles {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    features = {}
    lines = []
    for i in range(n_images):
        image_id = f"toy{i:02d}"
        words = {"color": COLORS[i], "animal": ANIMALS[i], "place": PLACES[i]}
        mean = rng.normal(size=feature_dim)
        spatial = mean + 0.5 * rng.normal(size=(n_regions, feature_dim))
        features[image_id] = (mean, spatial)
        n_dense = 3 if i % 3 == 2 else 5
        dense = [t.format(**words) for t in DENSE_TEMPLATES[:n_dense]]
        for style in styles:
            lines.append({
                "image_id": image_id, "style": style,
                "caption": STYLE_TEMPLATES[style].format(**words),
                "dense_captions": dense, "features_ref": "toy_features.bin",
            })
    write_features(out / "toy_features.bin", features)
    path = out / "toy.jsonl"
    path.write_text("".join(json.dumps(row, sort_keys=True) + "\n" for row in lines))
    return path
