"""Style and word embeddings, and the stylized word vector fed to the decoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError


def _check_ids(ids: np.ndarray, n: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)]
        raise ParameterError(f"{what} id {int(bad[0])} out of range [0, {n})")


class WordEmbedder:
    """Row lookup in ``W_embed``; the same table embeds targets and dense captions."""

    def __init__(self, table: Tensor):
        self.table = table

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, tokens) -> Tensor:
        ids = np.asarray(tokens, dtype=np.int64)
        _check_ids(ids, self.table.shape[0], "token")
        return self.table[ids]


class StyleEmbedder:
    """Style id -> ``W_p_embed`` row -> linear layer (no activation) -> style vector p."""

    def __init__(self, table: Tensor, weight: Tensor, bias: Tensor):
        self.table, self.weight, self.bias = table, weight, bias

    @property
    def n_styles(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, styles) -> Tensor:
        ids = np.asarray(styles, dtype=np.int64)
        _check_ids(ids, self.n_styles, "style")
        rows = self.table[ids.reshape(-1)]
        p = rows @ self.weight + self.bias
        return p[0] if ids.ndim == 0 else p


def stylize(word_vec: Tensor, p: Tensor | None) -> Tensor:
    """Concatenate a word embedding with the style vector; without a style this is the identity."""
    if p is None:
        return word_vec
    return ad.concat([word_vec, p], axis=-1)
