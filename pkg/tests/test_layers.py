"""Linear / attention / cross-entropy semantics and gradients."""

import math

import numpy as np
import pytest

from timbrecls import layers
from timbrecls import tensor as tt
from timbrecls.layers import (
    AttentionParams,
    InvalidHeadCount,
    LabelOutOfRange,
    LinearParams,
    build_trace,
    cross_entropy,
    linear,
    multi_head_attention,
    scaled_dot_product_attention,
)
from timbrecls.tensor import Rng, ShapeMismatch, Tensor, grad_check

LN20 = math.log(20.0)


def _linear_params(rng: Rng, out_dim: int, in_dim: int, bias_scale: float = 0.01) -> LinearParams:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return LinearParams(
        weight=Tensor(rng.uniform(-limit, limit, (out_dim, in_dim)), requires_grad=True),
        bias=Tensor(bias_scale * rng.normal(out_dim), requires_grad=True))


def _attention_params(rng: Rng, d_model: int = 128, heads: int = 8) -> AttentionParams:
    return AttentionParams(w_q=_linear_params(rng, d_model, d_model),
                           w_k=_linear_params(rng, d_model, d_model),
                           w_v=_linear_params(rng, d_model, d_model),
                           w_o=_linear_params(rng, d_model, d_model),
                           heads=heads)


# ---------------------------------------------------------------------------
# linear

def test_linear_identity():
    p = LinearParams(weight=Tensor(np.eye(4)), bias=Tensor(np.zeros(4)))
    x = Tensor(Rng(0).normal((3, 4)))
    assert np.allclose(linear(p, x).data, x.data, atol=1e-15)


def test_linear_hand_case():
    p = LinearParams(weight=Tensor([[1.0, 1.0]]), bias=Tensor([1.0]))
    out = linear(p, Tensor([[2.0, 3.0]]))
    assert out.data.tolist() == [[6.0]]


def test_linear_shape_check():
    p = LinearParams(weight=Tensor(np.ones((3, 5))), bias=Tensor(np.zeros(3)))
    with pytest.raises(ShapeMismatch):
        linear(p, Tensor(np.ones((2, 4))))


def test_linear_gradcheck():
    rng = Rng(1)
    p = _linear_params(rng, 3, 5)
    x = Tensor(rng.normal((4, 5)), requires_grad=True)
    r = Tensor(rng.normal((4, 3)))

    def f(_):
        return tt.sum_all(tt.mul(linear(p, x), r))

    assert grad_check(f, x, eps=1e-5) < 1e-6
    assert grad_check(f, p.weight, eps=1e-5) < 1e-6
    assert grad_check(f, p.bias, eps=1e-5) < 1e-6


def test_linear_param_count():
    p = _linear_params(Rng(2), 20, 2816)
    assert p.param_count() == 2816 * 20 + 20 == 56340


# ---------------------------------------------------------------------------
# scaled dot-product attention

def test_sdpa_identical_keys_give_uniform_weights():
    rng = Rng(3)
    q = Tensor(rng.normal((5, 4)))
    k = Tensor(np.tile(rng.normal((1, 4)), (5, 1)))
    v = Tensor(rng.normal((5, 3)))
    out, weights = scaled_dot_product_attention(q, k, v)
    assert np.allclose(weights.data, 0.2, atol=1e-12)
    assert np.allclose(out.data, np.tile(v.data.mean(axis=0), (5, 1)), atol=1e-12)


def test_sdpa_orthogonal_keys_saturate_to_identity():
    c = 100.0
    q = Tensor(c * np.eye(4))
    k = Tensor(c * np.eye(4))
    v = Tensor(Rng(4).normal((4, 4)))
    _, weights = scaled_dot_product_attention(q, k, v)
    assert np.all(np.isfinite(weights.data))
    assert np.all(np.diag(weights.data) > 0.999)


def test_sdpa_hand_case():
    q = Tensor([[1.0], [0.0]])
    k = Tensor([[1.0], [0.0]])
    v = Tensor([[10.0], [20.0]])
    out, weights = scaled_dot_product_attention(q, k, v)
    e = math.exp(1.0)
    expected_row0 = [e / (e + 1.0), 1.0 / (e + 1.0)]  # softmax([1, 0])
    assert np.allclose(weights.data[0], expected_row0, atol=1e-12)
    assert abs(out.data[0, 0] - 12.689) < 1e-3


def test_sdpa_shape_checks():
    with pytest.raises(ShapeMismatch):
        scaled_dot_product_attention(Tensor(np.ones((5, 4))), Tensor(np.ones((5, 3))),
                                     Tensor(np.ones((5, 2))))
    with pytest.raises(ShapeMismatch):
        scaled_dot_product_attention(Tensor(np.ones((5, 4))), Tensor(np.ones((6, 4))),
                                     Tensor(np.ones((6, 2))))


def test_sdpa_gradcheck():
    rng = Rng(5)
    q = Tensor(rng.normal((6, 4)), requires_grad=True)
    k = Tensor(rng.normal((6, 4)), requires_grad=True)
    v = Tensor(rng.normal((6, 3)), requires_grad=True)
    r = Tensor(rng.normal((6, 3)))

    def f(_):
        out, _w = scaled_dot_product_attention(q, k, v)
        return tt.sum_all(tt.mul(out, r))

    for leaf in (q, k, v):
        assert grad_check(f, leaf, eps=1e-5) < 1e-6


# ---------------------------------------------------------------------------
# multi-head attention

def test_mha_single_head_degenerates_to_sdpa():
    rng = Rng(6)
    p = _attention_params(rng, d_model=16, heads=1)
    x = Tensor(rng.normal((7, 16)))
    out, internals = multi_head_attention(p, x)

    q, k, v = linear(p.w_q, x), linear(p.w_k, x), linear(p.w_v, x)
    direct, w = scaled_dot_product_attention(q, k, v)
    expected = linear(p.w_o, direct)
    assert np.allclose(out.data, expected.data, atol=1e-12)
    assert len(internals.weights) == 1
    assert np.allclose(internals.weights[0].data, w.data, atol=1e-12)


def test_mha_head_dims():
    rng = Rng(7)
    p = _attention_params(rng, 128, heads=8)
    x = Tensor(rng.normal((22, 128)))
    out, internals = multi_head_attention(p, x)
    assert p.d_k == 16  # 128 / 8
    assert out.shape == (22, 128)
    assert len(internals.weights) == 8
    assert all(w.shape == (22, 22) for w in internals.weights)


def test_mha_invalid_head_count():
    p = _attention_params(Rng(8), 128, heads=7)
    with pytest.raises(InvalidHeadCount):
        multi_head_attention(p, Tensor(np.zeros((22, 128))))


def test_mha_uses_sqrt_dk_scaling():
    # recompute head 0 by hand with the explicit 1/sqrt(128/8) divisor
    rng = Rng(9)
    p = _attention_params(rng, 128, heads=8)
    x = Tensor(rng.normal((22, 128)))
    _, internals = multi_head_attention(p, x)

    q = (x.data @ p.w_q.weight.data.T + p.w_q.bias.data)[:, :16]
    k = (x.data @ p.w_k.weight.data.T + p.w_k.bias.data)[:, :16]
    scores = q @ k.T / np.sqrt(128 / 8)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    expected = e / e.sum(axis=1, keepdims=True)
    assert np.allclose(internals.weights[0].data, expected, atol=1e-12)


def test_mha_weight_rows_stochastic():
    rng = Rng(10)
    for heads in (1, 8, 16):
        p = _attention_params(rng, 128, heads=heads)
        x = Tensor(rng.normal((22, 128)))
        _, internals = multi_head_attention(p, x)
        trace = build_trace(internals)
        assert np.allclose(trace.per_head.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(trace.per_head >= 0) and np.all(trace.per_head <= 1)
        assert np.allclose(trace.averaged.sum(axis=-1), 1.0, atol=1e-6)
        assert np.allclose(trace.averaged, trace.per_head.mean(axis=0), atol=1e-15)


def test_mha_permutation_equivariance():
    rng = Rng(11)
    p = _attention_params(rng, 128, heads=8)
    x = rng.normal((22, 128))
    perm = Rng(12).permutation(22)
    base, _ = multi_head_attention(p, Tensor(x))
    permuted, _ = multi_head_attention(p, Tensor(x[perm]))
    assert np.allclose(permuted.data, base.data[perm], atol=1e-6)


def test_mha_gradcheck():
    rng = Rng(13)
    p = _attention_params(rng, 128, heads=8)
    x = Tensor(rng.normal((22, 128)), requires_grad=True)
    r = Tensor(rng.normal((22, 128)))

    def f(_):
        out, _internals = multi_head_attention(p, x)
        return tt.sum_all(tt.mul(out, r))

    assert grad_check(f, x, eps=1e-5, max_coords=80, seed=13) < 1e-4
    assert grad_check(f, p.w_q.weight, eps=1e-5, max_coords=40, seed=13) < 1e-4
    assert grad_check(f, p.w_o.bias, eps=1e-5, max_coords=40, seed=13) < 1e-4


def test_mha_key_bias_is_a_null_direction():
    # adding a constant to every key shifts each score row uniformly and
    # softmax is shift-invariant, so the key bias has identically zero
    # gradient and never influences the output
    rng = Rng(40)
    p = _attention_params(rng, 128, heads=8)
    x = Tensor(rng.normal((22, 128)))
    base, _ = multi_head_attention(p, x)
    p.w_k.bias.data[...] = rng.normal(128)
    shifted, _ = multi_head_attention(p, x)
    assert np.allclose(base.data, shifted.data, atol=1e-12)

    r = Tensor(rng.normal((22, 128)))
    out, _ = multi_head_attention(p, x)
    tt.sum_all(tt.mul(out, r)).backward()
    assert np.abs(p.w_k.bias.grad).max() < 1e-12


def test_mha_batched_matches_per_sample():
    rng = Rng(14)
    p = _attention_params(rng, 128, heads=8)
    batch = rng.normal((3, 22, 128))
    out_batched, internals = multi_head_attention(p, Tensor(batch))
    for i in range(3):
        out_single, _ = multi_head_attention(p, Tensor(batch[i]))
        assert np.allclose(out_batched.data[i], out_single.data, atol=1e-12)
        trace = build_trace(internals, sample=i)
        assert trace.per_head.shape == (8, 22, 22)


def test_build_trace_includes_raw_scores():
    rng = Rng(15)
    p = _attention_params(rng, 128, heads=8)
    x = Tensor(rng.normal((22, 128)))
    _, internals = multi_head_attention(p, x, want_scores=True)
    trace = build_trace(internals)
    assert trace.raw_scores is not None
    assert trace.raw_scores.shape == (8, 22, 22)
    # raw scores are the unscaled dot products of head projections
    q = (x.data @ p.w_q.weight.data.T + p.w_q.bias.data)[:, :16]
    k = (x.data @ p.w_k.weight.data.T + p.w_k.bias.data)[:, :16]
    assert np.allclose(trace.raw_scores[0], q @ k.T, atol=1e-12)


# ---------------------------------------------------------------------------
# cross-entropy

def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((4, 20)))
    loss = cross_entropy(logits, [0, 5, 10, 19])
    assert abs(float(loss.data) - LN20) < 1e-12


def test_cross_entropy_confident_correct():
    logits = np.zeros((3, 20))
    labels = [2, 7, 11]
    for i, label in enumerate(labels):
        logits[i, label] = 1000.0
    loss = cross_entropy(Tensor(logits), labels)
    assert float(loss.data) < 1e-6


def test_cross_entropy_hand_case():
    # two samples: one confidently right, one confidently wrong
    logits = np.array([[4.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    labels = [0, 2]

    def scalar_loss(row, label):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        return lse - row[label]

    expected = (scalar_loss([4, 0, 0], 0) + scalar_loss([0, 3, 0], 2)) / 2
    loss = cross_entropy(Tensor(logits), labels)
    assert abs(float(loss.data) - expected) < 1e-6


def test_cross_entropy_shift_invariance_and_nonneg():
    rng = Rng(16)
    logits = rng.normal((6, 20))
    labels = rng.integers(0, 20, 6)
    a = float(cross_entropy(Tensor(logits), labels).data)
    b = float(cross_entropy(Tensor(logits + 37.5), labels).data)
    assert abs(a - b) < 1e-9
    assert a >= 0.0


def test_cross_entropy_label_range():
    with pytest.raises(LabelOutOfRange):
        cross_entropy(Tensor(np.zeros((2, 20))), [0, 20])
    with pytest.raises(LabelOutOfRange):
        cross_entropy(Tensor(np.zeros((1, 20))), [-1])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = Rng(17)
    logits = Tensor(rng.normal((5, 20)), requires_grad=True)
    labels = rng.integers(0, 20, 5)
    loss = cross_entropy(logits, labels)
    loss.backward()

    z = logits.data
    probs = np.exp(z - z.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(5), labels] -= 1.0
    assert np.allclose(logits.grad, probs / 5.0, atol=1e-12)


def test_cross_entropy_gradcheck():
    rng = Rng(18)
    logits = Tensor(rng.normal((4, 20)), requires_grad=True)
    labels = rng.integers(0, 20, 4)
    err = grad_check(lambda t: cross_entropy(t, labels), logits, eps=1e-5)
    assert err < 1e-6
