import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threem import autodiff as ad
from threem.autodiff import Tensor
from threem.corpus import N_DENSE
from threem.encoders import LstmCell, encode_dense_captions, encode_visual
from threem.errors import ContractError, DataError, DimensionError
from threem.style import WordEmbedder


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def reference_lstm(w, b, xs, n):
    """Textbook LSTM over a sequence of vectors, one step at a time."""
    h = np.zeros(n)
    c = np.zeros(n)
    hs, cs = [], []
    for x in xs:
        z = np.concatenate([x, h]) @ w + b
        i, f, o, g = sigmoid(z[:n]), sigmoid(z[n:2 * n]), sigmoid(z[2 * n:3 * n]), np.tanh(z[3 * n:])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs.append(h)
        cs.append(c)
    return hs, cs


def make_cell(rng, d_in=3, n=4):
    return LstmCell(Tensor(rng.uniform(-0.5, 0.5, size=(d_in + n, 4 * n))), Tensor(rng.uniform(-0.5, 0.5, size=4 * n)))


def test_lstm_cell_matches_reference(rng):
    cell = make_cell(rng)
    xs = rng.normal(size=(6, 3))
    hs, cs = reference_lstm(cell.weight.data, cell.bias.data, xs, 4)
    state = cell.init_state(1)
    for x, h_ref, c_ref in zip(xs, hs, cs):
        state = cell(Tensor(x[None]), state)
        np.testing.assert_allclose(state[0].data[0], h_ref, atol=1e-12)
        np.testing.assert_allclose(state[1].data[0], c_ref, atol=1e-12)


def test_lstm_rejects_wrong_widths(rng):
    cell = make_cell(rng)
    with pytest.raises(DimensionError):
        cell(Tensor(np.zeros((1, 2))), cell.init_state(1))


def test_lstm_gradients(rng):
    cell = make_cell(rng)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    cell.weight.requires_grad = cell.bias.requires_grad = True

    def f():
        h, c = cell(x, cell.init_state(2))
        h, c = cell(x * 0.5, (h, c))
        return ad.sum(h * c)

    assert ad.grad_check(f, [cell.weight, cell.bias, x], max_coords=None) < 1e-6


def random_dense(rng, b, vocab, t_max=4):
    lengths = rng.integers(1, t_max + 1, size=(b, N_DENSE))
    dense = rng.integers(4, vocab, size=(b, N_DENSE, t_max))
    for i in range(b):
        for j in range(N_DENSE):
            dense[i, j, lengths[i, j]:] = 0
    return dense, lengths


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.sampled_from(["cell", "hidden"]))
def test_dense_encoder_matches_per_caption_loop(seed, b, source):
    rng = np.random.default_rng(seed)
    cell = make_cell(rng)
    emb = WordEmbedder(Tensor(rng.normal(size=(9, 3))))
    dense, lengths = random_dense(rng, b, 9)
    enc = encode_dense_captions(cell, emb, dense, lengths, source)
    for i in range(b):
        expected_words, finals = [], []
        for j in range(N_DENSE):
            xs = emb.table.data[dense[i, j, :lengths[i, j]]]
            hs, cs = reference_lstm(cell.weight.data, cell.bias.data, xs, 4)
            expected_words.extend(cs if source == "cell" else hs)
            finals.append(hs[-1])
        assert enc.lengths[i] == lengths[i].sum()
        np.testing.assert_allclose(np.array(enc.words(i)), np.array(expected_words), atol=1e-12)
        np.testing.assert_allclose(enc.v_cap.data[i], np.concatenate(finals), atol=1e-12)
        assert enc.mask[i].sum() == lengths[i].sum()


def test_dense_encoder_contract_checks(rng):
    cell = make_cell(rng)
    emb = WordEmbedder(Tensor(rng.normal(size=(9, 3))))
    dense, lengths = random_dense(rng, 1, 9)
    with pytest.raises(ContractError):
        encode_dense_captions(cell, emb, dense[:, :4], lengths[:, :4])
    lengths[0, 2] = 0
    with pytest.raises(ContractError):
        encode_dense_captions(cell, emb, dense, lengths)


def test_visual_encoder_shares_one_layer(rng):
    w, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))
    mean, spatial = rng.normal(size=(2, 4)), rng.normal(size=(2, 5, 4))
    out = encode_visual(w, b, mean, spatial)
    np.testing.assert_allclose(out.mean_pool.data, np.maximum(mean @ w.data + b.data, 0))
    np.testing.assert_allclose(out.spatial.data, np.maximum(spatial @ w.data + b.data, 0))
    assert (out.spatial.data >= 0).all()


def test_visual_encoder_rejects_wrong_feature_dim(rng):
    w, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))
    with pytest.raises(DataError):
        encode_visual(w, b, rng.normal(size=(2, 5)), rng.normal(size=(2, 5, 5)))
