"""Caption generation: penalized beam search and a greedy decoder.

Scores are sums of adjusted per-step log-probabilities, with no length
normalization. ``max_length`` counts decode steps including the final EOS;
``min_length`` counts words before EOS may be chosen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, PAD, UNK, Vocabulary
from .errors import ParameterError
from .model import Encoded, MultiUpDown

log = logging.getLogger(__name__)

DEFAULT_BANNED_ENDINGS = ("a", "an", "the", "at", "of", "in", "on", "with", "and")


@dataclass(frozen=True)
class PenaltyConfig:
    repeat_penalty: float = 2.0
    banned_end_tokens: frozenset[int] = frozenset()
    banned_tokens: frozenset[int] = frozenset({UNK, PAD, BOS})
    max_length: int = 16
    min_length: int = 3

    def __post_init__(self):
        if self.repeat_penalty < 0:
            raise ParameterError("repeat_penalty must be >= 0")
        if self.max_length < 1 or self.min_length < 0:
            raise ParameterError("max_length must be >= 1 and min_length >= 0")
        if EOS in self.banned_tokens or EOS in self.banned_end_tokens:
            raise ParameterError("EOS cannot be banned")

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, banned_endings=DEFAULT_BANNED_ENDINGS, **kw) -> "PenaltyConfig":
        """Resolve banned ending words against ``vocab``; words it lacks are skipped."""
        ids = frozenset(vocab.stoi[w] for w in banned_endings if w in vocab)
        return cls(banned_end_tokens=ids, **kw)

    @classmethod
    def off(cls, max_length: int = 16) -> "PenaltyConfig":
        return cls(repeat_penalty=0.0, banned_end_tokens=frozenset(), banned_tokens=frozenset(),
                   max_length=max_length, min_length=0)


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    score: float
    row: int                  # row of this hypothesis in the batched decoder state
    used: frozenset[int]
    finished: bool = False


@dataclass
class Generation:
    tokens: list[int]         # words only, EOS stripped
    score: float
    finished: bool

    def text(self, vocab: Vocabulary) -> str:
        return " ".join(vocab.decode(self.tokens))


def apply_penalties(logprobs: np.ndarray, hyp: BeamHypothesis, cfg: PenaltyConfig,
                    at_final_step: bool) -> np.ndarray:
    """Adjust one step's log-probabilities for a hypothesis.

    Already-used tokens lose ``repeat_penalty``; special tokens are banned;
    EOS is banned before ``min_length`` words or right after a banned ending
    word; banned ending words are banned on the last permitted step.
    """
    adj = np.array(logprobs, dtype=np.float64)
    if cfg.repeat_penalty and hyp.used:
        adj[list(hyp.used)] -= cfg.repeat_penalty
    if cfg.banned_tokens:
        adj[list(cfg.banned_tokens)] = -np.inf
    if len(hyp.tokens) < cfg.min_length:
        adj[EOS] = -np.inf
    if hyp.tokens and hyp.tokens[-1] in cfg.banned_end_tokens:
        adj[EOS] = -np.inf
    if at_final_step and cfg.banned_end_tokens:
        adj[list(cfg.banned_end_tokens)] = -np.inf
    return adj


def _ranked(adj: np.ndarray, k: int) -> np.ndarray:
    # best first, ties to the lower token id; -inf entries dropped
    order = np.lexsort((np.arange(adj.size), -adj))[:k]
    return order[np.isfinite(adj[order])]


def beam_search(model: MultiUpDown, enc: Encoded, beam_size: int = 5,
                cfg: PenaltyConfig | None = None) -> Generation:
    """Length-synchronized beam search for one encoded example (batch of 1).

    Each step keeps the ``beam_size`` best extensions over all live
    hypotheses (ties: lower token id, then lower hypothesis index); those
    ending in EOS or reaching ``max_length`` are frozen and compete on total
    score.
    """
    if beam_size < 1:
        raise ParameterError(f"beam_size must be >= 1, got {beam_size}")
    cfg = cfg or PenaltyConfig()
    finished: list[BeamHypothesis] = []
    with ad.no_grad():
        state = model.init_state(1)
        alive = [BeamHypothesis((), 0.0, 0, frozenset())]
        for step in range(cfg.max_length):
            rows = np.array([h.row for h in alive])
            prev = np.array([h.tokens[-1] if h.tokens else BOS for h in alive])
            out = model.decode_step(enc.select(np.zeros(len(alive), dtype=np.int64)), prev,
                                    state.select(rows))
            logprobs = out.logprobs.data
            final = step == cfg.max_length - 1
            cands = []
            for k, hyp in enumerate(alive):
                adj = apply_penalties(logprobs[k], hyp, cfg, final)
                cands.extend((hyp.score + adj[t], int(t), k) for t in _ranked(adj, beam_size))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            survivors = []
            for score, tok, k in cands[:beam_size]:
                parent = alive[k]
                tokens = parent.tokens + (tok,)
                done = tok == EOS or len(tokens) == cfg.max_length
                hyp = BeamHypothesis(tokens, float(score), k, parent.used | {tok}, done)
                (finished if done else survivors).append(hyp)
            if not survivors:
                break
            alive, state = survivors, out.next_state
    if finished:
        best = max(finished, key=lambda h: h.score)  # first maximal wins ties
        return Generation(_strip(best.tokens), best.score, True)
    # every extension was banned: fall back to the best partial hypothesis
    log.warning("no hypothesis finished within %d steps", cfg.max_length)
    best = max(alive, key=lambda h: h.score)
    return Generation(_strip(best.tokens), best.score, False)


def _strip(tokens) -> list[int]:
    return [t for t in tokens if t != EOS]


def greedy_decode(model: MultiUpDown, enc: Encoded, cfg: PenaltyConfig | None = None) -> Generation:
    """Pick the best adjusted token at every step."""
    cfg = cfg or PenaltyConfig()
    with ad.no_grad():
        state = model.init_state(1)
        hyp = BeamHypothesis((), 0.0, 0, frozenset())
        prev = BOS
        for step in range(cfg.max_length):
            out = model.decode_step(enc, np.array([prev]), state)
            adj = apply_penalties(out.logprobs.data[0], hyp, cfg, step == cfg.max_length - 1)
            tok = int(np.argmax(adj))
            if not np.isfinite(adj[tok]):
                return Generation(_strip(hyp.tokens), hyp.score, False)
            hyp = BeamHypothesis(hyp.tokens + (tok,), hyp.score + adj[tok], 0, hyp.used | {tok})
            if tok == EOS:
                break
            state, prev = out.next_state, tok
    return Generation(_strip(hyp.tokens), float(hyp.score), True)


def encode_example(model: MultiUpDown, record, style: int | None = None) -> Encoded:
    """Encode one :class:`~threem.corpus.ExampleRecord`, optionally under another style."""
    from .corpus import collate
    batch = collate([record])
    styles = batch.styles if style is None else np.array([style])
    with ad.no_grad():
        return model.encode(batch.dense, batch.dense_lengths, batch.mean_pooled, batch.spatial, styles)
