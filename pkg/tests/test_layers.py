import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desklst import layers as L
from desklst import tensor as T
from desklst.errors import AlignmentError, ConfigError, DimensionError, UsageError


def p64(x):
    return T.param(np.asarray(x, dtype=np.float64))


# -- conv1d ----------------------------------------------------------------------

def test_conv_length_examples():
    spec = L.Conv1dSpec(1, 1)
    assert spec.out_length(7) == 4
    assert spec.out_length(100) == 50


@given(st.integers(1, 512))
def test_conv_length_formula(n):
    spec = L.Conv1dSpec(2, 3)
    x = T.Tensor(np.ones((n, 2)))
    out = L.conv1d(x, T.Tensor(np.ones((5, 2, 3))), None, spec)
    assert out.shape[0] == (n + 4 - 5) // 2 + 1 == math.ceil(n / 2)


def test_conv_hand_example():
    spec = L.Conv1dSpec(1, 1, kernel=3, stride=1, padding=1)
    x = T.Tensor(np.array([[1.0], [2.0], [3.0]]))
    w = T.Tensor(np.ones((3, 1, 1)))
    out = L.conv1d(x, w, T.Tensor(np.zeros(1)), spec)
    assert out.data[:, 0].tolist() == [3.0, 6.0, 5.0]


def test_conv_no_kernel_flip():
    spec = L.Conv1dSpec(1, 1, kernel=3, stride=1, padding=1)
    x = T.Tensor(np.array([[0.0], [1.0], [0.0]]))
    w = T.Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
    # cross-correlation: out[i] = sum_j w[j] x[i - 1 + j]
    assert L.conv1d(x, w, None, spec).data[:, 0].tolist() == [3.0, 2.0, 1.0]


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        L.conv1d(T.Tensor(np.ones((4, 3))), T.Tensor(np.ones((5, 2, 2))), None, L.Conv1dSpec(2, 2))


def test_conv_batched_matches_single_and_grad():
    rng = np.random.default_rng(0)
    spec = L.Conv1dSpec(3, 2)
    x = p64(rng.uniform(-1, 1, (2, 9, 3)))
    w, b = p64(rng.uniform(-1, 1, (5, 3, 2))), p64(rng.uniform(-1, 1, 2))
    out = L.conv1d(x, w, b, spec)
    single = L.conv1d(T.Tensor(x.data[1]), w, b, spec)
    np.testing.assert_allclose(out.data[1], single.data, atol=1e-14)
    cot = rng.normal(size=out.shape)
    assert T.grad_check(lambda: T.tsum(T.mul(L.conv1d(x, w, b, spec), cot)), [x, w, b]) < 1e-6


# -- layer norm ------------------------------------------------------------------

def test_layer_norm_examples():
    g, b = T.Tensor(np.ones(4)), T.Tensor(np.zeros(4))
    assert np.allclose(L.layer_norm(T.Tensor(np.full((1, 4), 3.0)), g, b).data, 0.0)
    out = L.layer_norm(T.Tensor(np.array([[1.0, -1.0]])), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)
    bias = np.array([0.5, -2.0, 3.0, 1.0])
    out = L.layer_norm(T.Tensor(np.random.default_rng(0).normal(size=(3, 4))), T.Tensor(np.zeros(4)), T.Tensor(bias))
    assert np.array_equal(out.data, np.broadcast_to(bias, (3, 4)))


def test_layer_norm_grad():
    rng = np.random.default_rng(1)
    x, g, b = p64(rng.uniform(-1, 1, (3, 5))), p64(rng.uniform(-1, 1, 5)), p64(rng.uniform(-1, 1, 5))
    cot = rng.normal(size=(3, 5))
    assert T.grad_check(lambda: T.tsum(T.mul(L.layer_norm(x, g, b), cot)), [x, g, b]) < 1e-6


# -- attention -------------------------------------------------------------------

def test_attention_single_position_is_projected_v():
    rng = np.random.default_rng(2)
    q, k, v = (T.Tensor(rng.normal(size=(1, 8))) for _ in range(3))
    wo = T.Tensor(rng.normal(size=(8, 8)))
    out = L.causal_attention(q, k, v, 2, wo)
    np.testing.assert_allclose(out.data, v.data @ wo.data, atol=1e-12)


def test_attention_uniform_two_positions():
    q = T.Tensor(np.zeros((2, 4)))
    k = T.Tensor(np.ones((2, 4)))
    v = T.Tensor(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    out = L.causal_attention(q, k, v, 1, T.Tensor(np.eye(4)))
    np.testing.assert_allclose(out.data[1], [0.5, 0.5, 0, 0])
    np.testing.assert_allclose(out.data[0], [1.0, 0, 0, 0])


def test_attention_head_divisibility():
    x = T.Tensor(np.zeros((2, 6)))
    with pytest.raises(ConfigError):
        L.causal_attention(x, x, x, 4, T.Tensor(np.eye(6)))


def _block_params(rng, d, scale=0.3):
    raw = L.init_block(rng, d, np.float64, std=scale)
    raw = {k: (v + rng.normal(0, 0.1, v.shape) if k.endswith((".b", ".g")) or "b" in k.split(".")[-1] else v)
           for k, v in raw.items()}
    return {k: p64(v) for k, v in raw.items()}


def test_block_zero_params_is_identity():
    d = 8
    p = {k: T.Tensor(np.zeros_like(v)) for k, v in L.init_block(np.random.default_rng(0), d, np.float64).items()}
    x = T.Tensor(np.random.default_rng(1).normal(size=(5, d)))
    out = L.transformer_block(T.reshape(x, (1, 5, d)), p, 2, L.attention_mask(5, True, dtype=np.float64))
    assert np.array_equal(out.data[0], x.data)


@pytest.mark.parametrize("j", [1, 3, 5])
def test_block_causality_bitwise(j):
    rng = np.random.default_rng(4)
    d = 8
    p = _block_params(rng, d)
    x = rng.normal(size=(1, 6, d))
    mask = L.attention_mask(6, True, dtype=np.float64)
    base = L.transformer_block(T.Tensor(x), p, 2, mask).data
    x2 = x.copy()
    x2[0, j] += rng.normal(size=d)
    pert = L.transformer_block(T.Tensor(x2), p, 2, mask).data
    assert pert[0, :j].tobytes() == base[0, :j].tobytes()
    assert not np.array_equal(pert[0, j], base[0, j])


def test_block_gradient_check():
    rng = np.random.default_rng(5)
    d = 8
    p = _block_params(rng, d)
    x = p64(rng.uniform(-1, 1, (2, 4, d)))
    mask = L.attention_mask(4, True, dtype=np.float64)
    cot = rng.normal(size=(2, 4, d))
    f = lambda: T.tsum(T.mul(L.transformer_block(x, p, 2, mask), cot))
    # softmax ignores the per-query shift a key bias adds, so its true gradient is
    # exactly zero and a relative error would only measure finite-difference noise
    rest = [x] + [t for k, t in p.items() if k != "attn.bk"]
    assert T.grad_check(f, rest, eps=1e-5, n_coords=12) < 1e-6
    (gk,) = T.backward(f(), [p["attn.bk"]])
    assert np.abs(gk).max() < 1e-12


def test_full_attention_with_key_padding_matches_unpadded():
    rng = np.random.default_rng(6)
    d = 8
    p = _block_params(rng, d)
    x = rng.normal(size=(1, 5, d))
    padded = np.concatenate([x, rng.normal(size=(1, 2, d))], axis=1)
    valid = np.array([[True] * 5 + [False] * 2])
    a = L.transformer_block(T.Tensor(x), p, 2, None).data
    b = L.transformer_block(T.Tensor(padded), p, 2, L.attention_mask(7, False, valid, np.float64)).data
    np.testing.assert_allclose(b[:, :5], a, atol=1e-12)


# -- cross entropy ---------------------------------------------------------------

def test_cross_entropy_examples():
    assert L.cross_entropy(T.Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4))
    logits = np.zeros((1, 5))
    logits[0, 2] = 30.0
    assert L.cross_entropy(T.Tensor(logits), [2]).item() < 1e-12
    rng = np.random.default_rng(0)
    lg = rng.normal(size=(4, 6))
    mask = [True, False, False, False]
    a = L.cross_entropy(T.Tensor(lg), [1, 2, 3, 4], mask).item()
    lg2 = lg.copy()
    lg2[1:] = rng.normal(size=(3, 6))
    b = L.cross_entropy(T.Tensor(lg2), [1, 5, 0, 0], mask).item()
    assert a == b


def test_cross_entropy_errors_and_grad():
    with pytest.raises(UsageError):
        L.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 1], [False, False])
    with pytest.raises(IndexError):
        L.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])
    rng = np.random.default_rng(1)
    lg = p64(rng.uniform(-1, 1, (2, 3, 5)))
    tg = rng.integers(0, 5, (2, 3))
    mask = rng.random((2, 3)) < 0.7
    mask[0, 0] = True
    assert T.grad_check(lambda: L.cross_entropy(lg, tg, mask), [lg]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    lg = rng.normal(0, 5, (3, 7))
    assert L.cross_entropy(T.Tensor(lg), rng.integers(0, 7, 3)).item() >= 0.0


# -- CTC -------------------------------------------------------------------------

def _uniform_logp(T_, C):
    return T.Tensor(np.full((T_, C), math.log(1.0 / C)))


def test_ctc_examples():
    assert L.ctc_loss(_uniform_logp(1, 2), [0]).item() == pytest.approx(math.log(2))
    # paths {aa, -a, a-} out of 4, each 1/4
    assert L.ctc_loss(_uniform_logp(2, 2), [0]).item() == pytest.approx(-math.log(0.75))
    with pytest.raises(AlignmentError):
        L.ctc_loss(_uniform_logp(2, 2), [0, 0])


def collapse(path, blank):
    out = []
    prev = None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return tuple(out)


def brute_force_table(logp: np.ndarray) -> dict:
    """Total probability of every collapsed label sequence, by path enumeration."""
    T_, C = logp.shape
    probs = np.exp(logp)
    table: dict = {}
    for path in itertools.product(range(C), repeat=T_):
        key = collapse(path, C - 1)
        table[key] = table.get(key, 0.0) + math.prod(probs[t, c] for t, c in enumerate(path))
    return table


def test_ctc_matches_brute_force_small():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3))
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    table = brute_force_table(logp)
    for target in [(0,), (1,), (0, 1), (1, 1), (0, 0), (1, 0, 1)]:
        got = L.ctc_loss(T.Tensor(logp), list(target)).item()
        assert got == pytest.approx(-math.log(table[target]), abs=1e-9)


@pytest.mark.parametrize("target", [[0], [0, 1], [1, 1], [2, 0, 2]])
def test_ctc_gradient(target):
    rng = np.random.default_rng(len(target))
    z = p64(rng.uniform(-1, 1, (6, 4)))
    assert T.grad_check(lambda: L.ctc_loss(T.log_softmax(z), target), [z]) < 1e-6


# -- masked reconstruction -------------------------------------------------------

def test_masked_reconstruction_examples():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(6, 3))
    frames /= np.linalg.norm(frames, axis=1, keepdims=True)
    enc = T.Tensor(rng.normal(size=(6, 4)))
    mask = np.array([1, 0, 1, 1, 0, 0], dtype=bool)
    zero = {"w": T.Tensor(np.zeros((4, 3))), "b": T.Tensor(np.zeros(3))}
    assert L.masked_reconstruction_loss(frames, enc, mask, zero).item() == pytest.approx(1.0)
    # a head that copies frames exactly: encoder output = frames padded with zeros
    enc_exact = T.Tensor(np.concatenate([frames, np.zeros((6, 1))], axis=1))
    ident = {"w": T.Tensor(np.eye(4, 3)), "b": T.Tensor(np.zeros(3))}
    assert L.masked_reconstruction_loss(frames, enc_exact, mask, ident).item() == pytest.approx(0.0, abs=1e-15)
    frames2 = frames.copy()
    frames2[~mask] = 99.0
    a = L.masked_reconstruction_loss(frames, enc, mask, zero).item()
    assert L.masked_reconstruction_loss(frames2, enc, mask, zero).item() == a
    with pytest.raises(UsageError):
        L.masked_reconstruction_loss(frames, enc, np.zeros(6, dtype=bool), zero)


def test_masked_reconstruction_grad():
    rng = np.random.default_rng(1)
    enc = p64(rng.uniform(-1, 1, (5, 4)))
    head = {"w": p64(rng.uniform(-1, 1, (4, 3))), "b": p64(rng.uniform(-1, 1, 3))}
    frames = rng.normal(size=(5, 3))
    mask = np.array([1, 1, 0, 1, 0], dtype=bool)
    f = lambda: L.masked_reconstruction_loss(frames, enc, mask, head)
    assert T.grad_check(f, [enc, head["w"], head["b"]]) < 1e-6
