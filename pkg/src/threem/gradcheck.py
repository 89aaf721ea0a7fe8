"""Finite-difference checks of every op and every parameter group of the model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch, BOS, EOS, N_DENSE, PAD
from .model import ModelConfig, MultiUpDown
from .trainer import sequence_loss

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _op_cases(rng: np.random.Generator):
    u = lambda *s: Tensor(rng.uniform(-2, 2, size=s), requires_grad=True)  # noqa: E731
    a, b, c = u(3, 4), u(4, 2), u(3, 4)
    v, w, bias = u(5), u(5), u(4)
    labels = rng.integers(0, 5, size=(3, 1))
    mask = np.array([[True, True, False, True, True]] * 3)
    x = u(3, 5)
    gen_seed = int(rng.integers(1 << 30))
    return {
        "matmul": ([a, b], lambda: ad.sum(ad.tanh(a @ b))),
        "add": ([a, c], lambda: ad.sum(ad.tanh(a + c))),
        "sub": ([a, c], lambda: ad.sum(ad.tanh(a - c))),
        "mul": ([a, c], lambda: ad.sum(a * c)),
        "broadcast_add": ([a, bias], lambda: ad.sum(ad.tanh(a + bias))),
        "tanh": ([v], lambda: ad.sum(ad.tanh(v) * w.data)),
        "sigmoid": ([v], lambda: ad.sum(ad.sigmoid(v) * w.data)),
        "relu": ([v], lambda: ad.sum(ad.relu(v) * w.data)),
        "exp": ([v], lambda: ad.sum(ad.exp(v) * w.data)),
        "softmax": ([v], lambda: ad.sum(ad.softmax(v) * w.data)),
        "masked_softmax": ([x], lambda: ad.sum(ad.softmax(x, mask=mask) * ad.tanh(x))),
        "log_softmax": ([v], lambda: ad.sum(ad.log_softmax(v) * w.data)),
        "cross_entropy": ([x], lambda: ad.sum(ad.take_along(ad.log_softmax(x), labels)) * -1.0),
        "dropout": ([v], lambda: ad.sum(ad.tanh(ad.dropout(v, 0.4, True, np.random.default_rng(gen_seed))))),
        "concat": ([v, w], lambda: ad.sum(ad.tanh(ad.concat([v, w]) * 0.5) * ad.concat([w, v]))),
        "stack": ([v, w], lambda: ad.sum(ad.tanh(ad.stack([v, w], axis=1)))),
        "sum_axis": ([a], lambda: ad.sum(ad.tanh(ad.sum(a, axis=0)))),
        "reshape": ([a], lambda: ad.sum(ad.tanh(ad.reshape(a, (4, 3)) @ b[:3]))),
        "transpose": ([a], lambda: ad.sum(ad.tanh(ad.transpose(a) @ c[:, :2]))),
        "index": ([a], lambda: ad.sum(ad.tanh(a[np.array([0, 2, 0])]))),
        "where": ([a, c], lambda: ad.sum(ad.tanh(ad.where(a.data > 0, a, c)))),
        "fan_out": ([v], lambda: ad.sum(ad.tanh(v) * v + v * v)),
    }


def check_ops(seed: int = 0, eps: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, ad.grad_check(f, params, eps, max_coords=None), OP_TOLERANCE)
            for name, (params, f) in _op_cases(rng).items()]


def tiny_model(seed: int = 0, **overrides) -> MultiUpDown:
    cfg = dict(vocab_size=9, n_styles=3, feature_dim=4, word_dim=5, style_embed_dim=3, style_dim=4,
               caption_enc_dim=4, visual_enc_dim=5, hidden_dim=6, att_dim=5,
               visual_dropout=0.3, output_dropout=0.3, init_scale=0.5)
    cfg.update(overrides)
    return MultiUpDown.create(ModelConfig(**cfg), seed)


def random_batch(cfg: ModelConfig, rng: np.random.Generator, batch: int = 2, steps: int = 3,
                 n_regions: int = 3) -> Batch:
    """A random teacher-forcing batch; the second example is one token shorter."""
    targets = rng.integers(4, cfg.vocab_size, size=(batch, steps + 1))
    targets[:, 0] = BOS
    mask = np.ones((batch, steps + 1))
    if batch > 1:
        targets[1, -1] = PAD
        targets[1, -2] = EOS
        mask[1, -1] = 0.0
    lengths = rng.integers(1, 4, size=(batch, N_DENSE))
    dense = rng.integers(4, cfg.vocab_size, size=(batch, N_DENSE, int(lengths.max())))
    for i in range(batch):
        for j in range(N_DENSE):
            dense[i, j, lengths[i, j]:] = PAD
    return Batch(
        targets=targets, mask=mask,
        mean_pooled=rng.normal(size=(batch, cfg.feature_dim)),
        spatial=rng.normal(size=(batch, n_regions, cfg.feature_dim)),
        styles=rng.integers(0, cfg.n_styles, size=batch),
        dense=dense, dense_lengths=lengths, image_ids=[f"g{i}" for i in range(batch)],
    )


def model_loss_fn(model: MultiUpDown, batch: Batch, dropout_seed: int = 0):
    """Teacher-forced loss in training mode; dropout masks are reseeded on each call."""
    def f():
        rng = np.random.default_rng(dropout_seed)
        return sequence_loss(model.forward(batch, training=True, rng=rng), batch.targets[:, 1:], batch.mask[:, 1:])
    return f


def check_model(seed: int = 0, eps: float = 1e-6, max_coords: int | None = 25,
                model: MultiUpDown | None = None) -> list[CheckResult]:
    """Max relative gradient error of the full loss for each parameter group."""
    rng = np.random.default_rng(seed)
    model = model or tiny_model(seed)
    batch = random_batch(model.config, rng)
    f = model_loss_fn(model, batch, seed)
    results = []
    for group, names in model.groups().items():
        params = [model.params[n] for n in names]
        err = ad.grad_check(f, params, eps, max_coords=max_coords, rng=np.random.default_rng(seed))
        results.append(CheckResult(group, err, MODEL_TOLERANCE))
    return results
