"""Dense-caption LSTM encoder and the feed-forward visual feature encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import N_DENSE
from .errors import ContractError, DataError, DimensionError, ParameterError
from .style import WordEmbedder


class LstmCell:
    """Single LSTM step over ``[x; h]``.

    ``weight`` is ``[(input_dim + hidden_dim) x 4*hidden_dim]`` with gate
    blocks ordered input, forget, output, candidate.
    """

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or weight.shape[1] % 4 or bias.shape != (weight.shape[1],):
            raise DimensionError(f"bad LSTM parameter shapes {weight.shape}, {bias.shape}")
        self.weight, self.bias = weight, bias
        self.hidden_dim = weight.shape[1] // 4
        self.input_dim = weight.shape[0] - self.hidden_dim

    def init_state(self, batch: int, dtype=np.float64) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_dim), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        if x.shape[-1] != self.input_dim or h.shape[-1] != self.hidden_dim:
            raise DimensionError(f"LSTM expects input {self.input_dim} and hidden {self.hidden_dim}, "
                                 f"got {x.shape} and {h.shape}")
        n = self.hidden_dim
        gates = ad.concat([x, h], axis=-1) @ self.weight + self.bias
        i = ad.sigmoid(gates[:, :n])
        f = ad.sigmoid(gates[:, n:2 * n])
        o = ad.sigmoid(gates[:, 2 * n:3 * n])
        g = ad.tanh(gates[:, 3 * n:])
        c_new = f * c + i * g
        return o * ad.tanh(c_new), c_new


def lstm_step(cell: LstmCell, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    return cell(x, state)


@dataclass
class EncodedCaptions:
    v_cap: Tensor            # [B x 5*H_e], final hidden state of caption i in block i
    word_states: Tensor      # [B x L_max x H_e], reading order, caption 1 first
    mask: np.ndarray         # [B x L_max] bool
    lengths: np.ndarray      # [B] total token count L per example

    def words(self, b: int) -> list[np.ndarray]:
        return list(self.word_states.data[b, :self.lengths[b]])

    def select(self, rows: np.ndarray) -> "EncodedCaptions":
        return EncodedCaptions(self.v_cap[rows], self.word_states[rows], self.mask[rows], self.lengths[rows])


@dataclass
class EncodedVisual:
    mean_pool: Tensor        # [B x H_v]
    spatial: Tensor          # [B x R x H_v]

    def select(self, rows: np.ndarray) -> "EncodedVisual":
        return EncodedVisual(self.mean_pool[rows], self.spatial[rows])


def pad_captions(captions: list[list[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One example's captions as ``[1 x n x T]`` ids plus ``[1 x n]`` lengths."""
    lengths = np.array([[len(c) for c in captions]], dtype=np.int64)
    ids = np.full((1, len(captions), max(int(lengths.max()), 1)), pad, dtype=np.int64)
    for j, c in enumerate(captions):
        ids[0, j, :len(c)] = c
    return ids, lengths


def encode_dense_captions(cell: LstmCell, embedder: WordEmbedder, dense: np.ndarray,
                          lengths: np.ndarray, word_state_source: str = "cell") -> EncodedCaptions:
    """Run one shared LSTM over each of the 5 captions from a zero state.

    ``dense`` is ``[B x 5 x T]`` token ids padded on the right, ``lengths``
    ``[B x 5]`` with every entry >= 1. Word states are the per-token cell
    states (or hidden states with ``word_state_source="hidden"``).
    """
    dense = np.asarray(dense)
    lengths = np.asarray(lengths)
    if dense.ndim != 3 or dense.shape[1] != N_DENSE:
        raise ContractError(f"expected {N_DENSE} dense captions per example, got array of shape {dense.shape}")
    if word_state_source not in ("cell", "hidden"):
        raise ParameterError(f"word_state_source must be 'cell' or 'hidden', not {word_state_source!r}")
    if (lengths < 1).any():
        raise ContractError("dense captions must hold at least one token (use the empty-caption sentinel)")
    b, k, t_max = dense.shape
    n = b * k
    flat_ids = dense.reshape(n, t_max)
    flat_len = lengths.reshape(n)
    h, c = cell.init_state(n, embedder.table.dtype)
    per_step = []
    for t in range(int(flat_len.max())):
        x = embedder(flat_ids[:, t])
        h_new, c_new = cell(x, (h, c))
        per_step.append(c_new if word_state_source == "cell" else h_new)
        active = (t < flat_len)[:, None]
        h = ad.where(active, h_new, h)
        c = ad.where(active, c_new, c)
    hid = cell.hidden_dim
    v_cap = ad.reshape(h, (b, k * hid))
    steps = ad.reshape(ad.stack(per_step, axis=0), (len(per_step) * n, hid))
    # gather (t, sequence) rows into reading order; padding rows point at row 0 and are masked
    totals = lengths.sum(axis=1)
    l_max = int(totals.max())
    index = np.zeros((b, l_max), dtype=np.int64)
    mask = np.zeros((b, l_max), dtype=bool)
    for i in range(b):
        pos = 0
        for j in range(k):
            seq = i * k + j
            for t in range(int(lengths[i, j])):
                index[i, pos] = t * n + seq
                pos += 1
        mask[i, :pos] = True
    words = ad.reshape(steps[index.reshape(-1)], (b, l_max, hid))
    return EncodedCaptions(v_cap, words, mask, totals)


def encode_visual(weight: Tensor, bias: Tensor, mean_pooled: np.ndarray, spatial: np.ndarray,
                  dropout: float = 0.0, training: bool = False,
                  rng: np.random.Generator | None = None) -> EncodedVisual:
    """Shared linear -> dropout -> ReLU over the mean-pooled vector and every spatial vector."""
    d_v = weight.shape[0]
    mean_pooled = np.asarray(mean_pooled, dtype=weight.dtype)
    spatial = np.asarray(spatial, dtype=weight.dtype)
    if mean_pooled.ndim != 2 or mean_pooled.shape[1] != d_v:
        raise DataError(f"mean-pooled features have shape {mean_pooled.shape}, expected [B x {d_v}]")
    if spatial.ndim != 3 or spatial.shape[2] != d_v or spatial.shape[0] != mean_pooled.shape[0]:
        raise DataError(f"spatial features have shape {spatial.shape}, expected [B x R x {d_v}]")
    b, r, _ = spatial.shape

    def layer(x):
        return ad.relu(ad.dropout(Tensor(x) @ weight + bias, dropout, training, rng))

    mean = layer(mean_pooled)
    regions = ad.reshape(layer(spatial.reshape(b * r, d_v)), (b, r, weight.shape[1]))
    return EncodedVisual(mean, regions)
