"""Top-down attention branches and their per-step fusion.

Each branch is an attention LSTM plus a language LSTM around a soft
attention over that branch's value vectors (dense-caption word states or
spatial visual vectors). Both branches read the *fused* previous hidden
states; their cell states stay private. The fused language state is the
plain sum of the branch language states, and likewise for attention states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import LstmCell
from .errors import ContractError, DimensionError


@dataclass
class BranchParameters:
    att_lstm: LstmCell
    lang_lstm: LstmCell
    W_va: Tensor    # [value_dim x att_dim]
    W_ha: Tensor    # [hidden_dim x att_dim]
    w_a: Tensor     # [att_dim x 1]


@dataclass
class DecoderState:
    h_lang: Tensor
    h_att: Tensor
    # branch name -> (attention LSTM cell, language LSTM cell)
    cells: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    def select(self, rows: np.ndarray) -> "DecoderState":
        return DecoderState(
            self.h_lang[rows], self.h_att[rows],
            {k: (a[rows], b[rows]) for k, (a, b) in self.cells.items()},
        )


@dataclass
class BranchOutput:
    h_att: Tensor
    h_lang: Tensor
    alpha: Tensor
    c_att: Tensor
    c_lang: Tensor


@dataclass
class StepOutput:
    logprobs: Tensor
    next_state: DecoderState
    alphas: dict[str, Tensor]
    h_output: Tensor
    branches: dict[str, BranchOutput]


def attend(h_att: Tensor, values: Tensor, params: BranchParameters,
           mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Additive attention: ``a_i = w_a . tanh(W_va v_i + W_ha h)``, ``alpha = softmax(a)``.

    ``values`` is ``[B x K x D]``; ``mask`` (``[B x K]``) marks real entries.
    Returns the attended vector ``[B x D]`` and ``alpha`` ``[B x K]``.
    """
    if values.ndim != 3 or values.shape[1] == 0:
        raise ContractError(f"attention needs at least one value vector, got shape {values.shape}")
    b, k, d = values.shape
    if d != params.W_va.shape[0] or h_att.shape != (b, params.W_ha.shape[0]):
        raise DimensionError(f"attention shapes disagree: values {values.shape}, query {h_att.shape}")
    att_dim = params.W_va.shape[1]
    proj_v = ad.reshape(ad.reshape(values, (b * k, d)) @ params.W_va, (b, k, att_dim))
    proj_h = ad.reshape(h_att @ params.W_ha, (b, 1, att_dim))
    hidden = ad.tanh(proj_v + proj_h)
    scores = ad.reshape(ad.reshape(hidden, (b * k, att_dim)) @ params.w_a, (b, k))
    alpha = ad.softmax(scores, axis=-1, mask=mask)
    attended = ad.sum(ad.reshape(alpha, (b, k, 1)) * values, axis=1)
    return attended, alpha


def branch_step(branch: BranchParameters, name: str, context: Tensor, values: Tensor,
                mask: np.ndarray | None, w_t: Tensor, prev: DecoderState) -> BranchOutput:
    c_att, c_lang = prev.cells[name]
    h_att, c_att = branch.att_lstm(ad.concat([prev.h_lang, context, w_t], axis=-1), (prev.h_att, c_att))
    attended, alpha = attend(h_att, values, branch, mask)
    h_lang, c_lang = branch.lang_lstm(ad.concat([attended, h_att], axis=-1), (prev.h_lang, c_lang))
    return BranchOutput(h_att, h_lang, alpha, c_att, c_lang)


def fuse_and_project(outputs: dict[str, BranchOutput], proj_weight: Tensor, proj_bias: Tensor,
                     dropout: float = 0.0, training: bool = False,
                     rng: np.random.Generator | None = None) -> StepOutput:
    """Sum branch states, apply per-branch dropout to the language states, project to log-probs.

    Branches are summed in insertion order (caption first). With a single
    branch the sums degenerate to that branch's states.
    """
    if not outputs:
        raise ContractError("fusion needs at least one branch")
    outs = list(outputs.values())
    dims = {o.h_lang.shape for o in outs} | {o.h_att.shape for o in outs}
    if len(dims) != 1:
        raise DimensionError(f"branch states disagree in shape: {sorted(dims)}")
    h_lang, h_att = outs[0].h_lang, outs[0].h_att
    h_out = ad.dropout(outs[0].h_lang, dropout, training, rng)
    for o in outs[1:]:
        h_lang = h_lang + o.h_lang
        h_att = h_att + o.h_att
        h_out = h_out + ad.dropout(o.h_lang, dropout, training, rng)
    logprobs = ad.log_softmax(h_out @ proj_weight + proj_bias, axis=-1)
    state = DecoderState(h_lang, h_att, {k: (o.c_att, o.c_lang) for k, o in outputs.items()})
    return StepOutput(logprobs, state, {k: o.alpha for k, o in outputs.items()}, h_out, dict(outputs))
