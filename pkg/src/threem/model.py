"""The dual-branch captioner: parameters, encoding, one decode step, teacher-forced loss."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, N_DENSE, Batch
from .decoder import BranchParameters, DecoderState, StepOutput, branch_step, fuse_and_project
from .encoders import (EncodedCaptions, EncodedVisual, LstmCell, encode_dense_captions,
                       encode_visual)
from .errors import ParameterError
from .style import StyleEmbedder, WordEmbedder, stylize

CAPTION, VISUAL = "caption", "visual"


@dataclass
class ModelConfig:
    vocab_size: int
    n_styles: int
    feature_dim: int
    word_dim: int = 128
    style_embed_dim: int = 64
    style_dim: int = 64
    caption_enc_dim: int = 128
    visual_enc_dim: int = 128
    hidden_dim: int = 128
    att_dim: int = 128
    visual_dropout: float = 0.5
    output_dropout: float = 0.5
    word_state_source: str = "cell"
    use_style: bool = True
    use_text: bool = True
    use_visual: bool = True
    init_scale: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        if not (self.use_text or self.use_visual):
            raise ParameterError("at least one of use_text / use_visual must be enabled")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and v < 1:
                raise ParameterError(f"{f.name} must be positive, got {v}")
        for name in ("visual_dropout", "output_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must lie in [0, 1)")
        if self.word_state_source not in ("cell", "hidden"):
            raise ParameterError("word_state_source must be 'cell' or 'hidden'")
        if self.dtype not in ("float64", "float32"):
            raise ParameterError("dtype must be float64 or float32")

    @property
    def stylized_dim(self) -> int:
        return self.word_dim + (self.style_dim if self.use_style else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learned tensor, keyed by a dotted name whose first segments give its group."""
    m, h = cfg.hidden_dim, cfg.att_dim
    shapes: dict[str, tuple[int, ...]] = {"word.embed": (cfg.vocab_size, cfg.word_dim)}
    if cfg.use_style:
        shapes["style.embed"] = (cfg.n_styles, cfg.style_embed_dim)
        shapes["style.linear.weight"] = (cfg.style_embed_dim, cfg.style_dim)
        shapes["style.linear.bias"] = (cfg.style_dim,)

    def branch(prefix, context_dim, value_dim):
        shapes[f"{prefix}.att_lstm.weight"] = (m + context_dim + cfg.stylized_dim + m, 4 * m)
        shapes[f"{prefix}.att_lstm.bias"] = (4 * m,)
        shapes[f"{prefix}.lang_lstm.weight"] = (value_dim + m + m, 4 * m)
        shapes[f"{prefix}.lang_lstm.bias"] = (4 * m,)
        shapes[f"{prefix}.attn.W_va"] = (value_dim, h)
        shapes[f"{prefix}.attn.W_ha"] = (m, h)
        shapes[f"{prefix}.attn.w_a"] = (h, 1)

    if cfg.use_text:
        e = cfg.caption_enc_dim
        shapes["encoder.caption.lstm.weight"] = (cfg.word_dim + e, 4 * e)
        shapes["encoder.caption.lstm.bias"] = (4 * e,)
        branch("decoder.caption", N_DENSE * e, e)
    if cfg.use_visual:
        v = cfg.visual_enc_dim
        shapes["encoder.visual.weight"] = (cfg.feature_dim, v)
        shapes["encoder.visual.bias"] = (v,)
        branch("decoder.visual", v, v)
    shapes["output.weight"] = (m, cfg.vocab_size)
    shapes["output.bias"] = (cfg.vocab_size,)
    return shapes


PARAMETER_GROUPS = {
    "word_embedding": "word.",
    "style": "style.",
    "caption_encoder": "encoder.caption.",
    "visual_encoder": "encoder.visual.",
    "caption_branch": "decoder.caption.",
    "visual_branch": "decoder.visual.",
    "output": "output.",
}


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-init_scale, init_scale) weights, zero biases, forget-gate biases at 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("bias"):
            data = np.zeros(shape)
            if "lstm" in name:
                n = shape[0] // 4
                data[n:2 * n] = 1.0
        else:
            data = rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
        params[name] = Tensor(data.astype(cfg.dtype), requires_grad=True, name=name)
    return params


@dataclass
class Encoded:
    captions: EncodedCaptions | None
    visual: EncodedVisual | None
    p: Tensor | None

    def select(self, rows) -> "Encoded":
        rows = np.asarray(rows, dtype=np.int64)
        return Encoded(
            self.captions.select(rows) if self.captions is not None else None,
            self.visual.select(rows) if self.visual is not None else None,
            self.p[rows] if self.p is not None else None,
        )


class MultiUpDown:
    """Style-conditioned captioner with one top-down branch per modality."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ParameterError(f"parameter set mismatch; missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ParameterError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        P = params
        self.words = WordEmbedder(P["word.embed"])
        self.style = (StyleEmbedder(P["style.embed"], P["style.linear.weight"], P["style.linear.bias"])
                      if config.use_style else None)
        self.branches: dict[str, BranchParameters] = {}
        if config.use_text:
            self.caption_encoder = LstmCell(P["encoder.caption.lstm.weight"], P["encoder.caption.lstm.bias"])
            self.branches[CAPTION] = self._branch("decoder.caption")
        if config.use_visual:
            self.branches[VISUAL] = self._branch("decoder.visual")

    def _branch(self, prefix: str) -> BranchParameters:
        P = self.params
        return BranchParameters(
            att_lstm=LstmCell(P[f"{prefix}.att_lstm.weight"], P[f"{prefix}.att_lstm.bias"]),
            lang_lstm=LstmCell(P[f"{prefix}.lang_lstm.weight"], P[f"{prefix}.lang_lstm.bias"]),
            W_va=P[f"{prefix}.attn.W_va"], W_ha=P[f"{prefix}.attn.W_ha"], w_a=P[f"{prefix}.attn.w_a"],
        )

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "MultiUpDown":
        return cls(config, init_parameters(config, seed))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def groups(self) -> dict[str, list[str]]:
        out = {}
        for group, prefix in PARAMETER_GROUPS.items():
            names = [n for n in self.params if n.startswith(prefix)]
            if names:
                out[group] = names
        return out

    @property
    def dtype(self):
        return self.params["output.weight"].dtype

    def encode(self, dense: np.ndarray, dense_lengths: np.ndarray, mean_pooled: np.ndarray,
               spatial: np.ndarray, styles, training: bool = False,
               rng: np.random.Generator | None = None) -> Encoded:
        cfg = self.config
        captions = visual = p = None
        if cfg.use_text:
            captions = encode_dense_captions(self.caption_encoder, self.words, dense, dense_lengths,
                                             cfg.word_state_source)
        if cfg.use_visual:
            visual = encode_visual(self.params["encoder.visual.weight"], self.params["encoder.visual.bias"],
                                   mean_pooled, spatial, cfg.visual_dropout, training, rng)
        if self.style is not None:
            p = self.style(np.asarray(styles, dtype=np.int64).reshape(-1))
        return Encoded(captions, visual, p)

    def encode_batch(self, batch: Batch, training: bool = False,
                     rng: np.random.Generator | None = None) -> Encoded:
        return self.encode(batch.dense, batch.dense_lengths, batch.mean_pooled, batch.spatial,
                           batch.styles, training, rng)

    def init_state(self, batch: int) -> DecoderState:
        m = self.config.hidden_dim
        zero = lambda: Tensor(np.zeros((batch, m), dtype=self.dtype))  # noqa: E731
        return DecoderState(zero(), zero(), {k: (zero(), zero()) for k in self.branches})

    def decode_step(self, enc: Encoded, prev_tokens, state: DecoderState, training: bool = False,
                    rng: np.random.Generator | None = None) -> StepOutput:
        """Embed + stylize the previous tokens, run both branches, fuse, project."""
        w_t = stylize(self.words(np.asarray(prev_tokens, dtype=np.int64)), enc.p)
        outputs = {}
        if CAPTION in self.branches:
            c = enc.captions
            outputs[CAPTION] = branch_step(self.branches[CAPTION], CAPTION, c.v_cap, c.word_states,
                                           c.mask, w_t, state)
        if VISUAL in self.branches:
            v = enc.visual
            outputs[VISUAL] = branch_step(self.branches[VISUAL], VISUAL, v.mean_pool, v.spatial,
                                          None, w_t, state)
        return fuse_and_project(outputs, self.params["output.weight"], self.params["output.bias"],
                                self.config.output_dropout, training, rng)

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced log-probabilities ``[B x (T-1) x V]`` predicting ``targets[:, 1:]``."""
        enc = self.encode_batch(batch, training, rng)
        state = self.init_state(len(batch))
        steps = []
        for t in range(batch.targets.shape[1] - 1):
            out = self.decode_step(enc, batch.targets[:, t], state, training, rng)
            steps.append(out.logprobs)
            state = out.next_state
        return ad.stack(steps, axis=1)

    def loss(self, batch: Batch, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        from .trainer import sequence_loss
        logprobs = self.forward(batch, training, rng)
        return sequence_loss(logprobs, batch.targets[:, 1:], batch.mask[:, 1:])

    def start_tokens(self, batch: int) -> np.ndarray:
        return np.full(batch, BOS, dtype=np.int64)
