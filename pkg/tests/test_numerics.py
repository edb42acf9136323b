import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nestdiff.numerics import (
    DimensionError, NumericError, RngStream, check_one_hot, clamped_log, cross_entropy, gaussian, grad_check,
    layer_norm, log_softmax, matmul, one_hot, percentile, softmax, stream_id, tensor_digest, truncated_normal,
)

F64 = torch.float64


def test_stream_replay_is_exact():
    a = RngStream(7, stream_id("chain", 3, 1, 0)).normal((5, 4), F64)
    b = RngStream(7, stream_id("chain", 3, 1, 0)).normal((5, 4), F64)
    assert torch.equal(a, b)


def test_distinct_streams_differ():
    a = RngStream(7, stream_id("chain", 3, 1, 0)).normal((8,), F64)
    b = RngStream(7, stream_id("chain", 3, 1, 1)).normal((8,), F64)
    c = RngStream(8, stream_id("chain", 3, 1, 0)).normal((8,), F64)
    assert not torch.equal(a, b) and not torch.equal(a, c)


def test_stream_id_is_stable():
    assert stream_id("x", 1) == stream_id("x", 1)
    assert stream_id("x", 1) != stream_id("x", 2)
    assert 0 <= stream_id("anything") < 2**64


def test_counter_advances_and_child_is_independent():
    s = RngStream(1)
    c0 = s.counter
    s.normal((10,))
    assert s.counter > c0
    assert not torch.equal(s.child("a").normal((4,), F64), s.child("b").normal((4,), F64))


def test_float32_draw_is_rounded_float64_draw():
    a = gaussian(RngStream(3, 4), (6,), F64)
    b = gaussian(RngStream(3, 4), (6,), torch.float32)
    assert torch.equal(a.to(torch.float32), b)


def test_gaussian_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        gaussian(RngStream(0), ())
    with pytest.raises(DimensionError):
        gaussian(RngStream(0), (2, -1))


def test_gaussian_moments():
    x = gaussian(RngStream(11), (200_000,), F64)
    n = x.numel()
    assert abs(float(x.mean())) < 4 / math.sqrt(n)
    assert abs(float(x.var(unbiased=False)) - 1) < 4 * math.sqrt(2 / n)


def test_truncated_normal_bounds():
    x = truncated_normal(RngStream(0), (10_000,), std=0.02, dtype=F64)
    assert float(x.abs().max()) <= 0.04 + 1e-12


def test_matmul_checks_inner_dimension():
    with pytest.raises(DimensionError):
        matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    a, b = torch.randn(3, 4, dtype=F64), torch.randn(4, 2, dtype=F64)
    assert torch.allclose(matmul(a, b), a @ b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_a_distribution(vals):
    p = softmax(torch.tensor(vals, dtype=F64))
    assert abs(float(p.sum()) - 1) < 1e-12 and bool((p >= 0).all())
    assert torch.allclose(log_softmax(torch.tensor(vals, dtype=F64)).exp(), p, atol=1e-12)


def test_layer_norm_statistics():
    x = torch.randn(4, 16, dtype=F64) * 3 + 2
    y = layer_norm(x)
    assert torch.allclose(y.mean(-1), torch.zeros(4, dtype=F64), atol=1e-10)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(4, dtype=F64), atol=1e-4)


def test_clamped_log_floor():
    assert float(clamped_log(torch.tensor(0.0, dtype=F64))) == pytest.approx(math.log(1e-12))


def test_cross_entropy_values():
    y = one_hot([0, 1], 2, F64)
    assert float(cross_entropy(y, y)) == 0.0
    assert float(cross_entropy(torch.full((2, 2), 0.5, dtype=F64), y)) == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_rejects_soft_labels():
    with pytest.raises(ValueError):
        cross_entropy(torch.full((1, 2), 0.5), torch.tensor([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        check_one_hot(torch.tensor([[1.0, 1.0]]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.floats(0, 100))
def test_percentile_matches_numpy_linear(vals, p):
    assert percentile(vals, p) == pytest.approx(float(np.percentile(vals, p)), rel=1e-12, abs=1e-9)


def test_grad_check_accepts_exact_gradient():
    w = torch.randn(5, dtype=F64, requires_grad=True)
    assert grad_check(lambda: (torch.sin(w) * w ** 2).sum(), [w]) < 1e-8


def test_grad_check_catches_wrong_backward():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2.2 * x

    w = torch.randn(4, dtype=F64, requires_grad=True)
    assert grad_check(lambda: Bad.apply(w).sum(), [w]) > 0.05


def test_grad_check_rejects_non_finite_loss():
    w = torch.tensor([0.0], dtype=F64, requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: (1 / w).sum(), [w])


def test_tensor_digest_sensitivity():
    a = torch.zeros(3)
    assert tensor_digest([a]) == tensor_digest([torch.zeros(3)])
    assert tensor_digest([a]) != tensor_digest([torch.zeros(3, dtype=F64)])
    assert tensor_digest([a]) != tensor_digest([torch.tensor([0.0, 0.0, 1e-30])])


def test_matmul_triple_loop_oracle():
    g = np.random.default_rng(0)
    a, b = g.normal(size=(3, 4)), g.normal(size=(4, 2))
    ref = [[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)]
    out = matmul(torch.as_tensor(a), torch.as_tensor(b))
    assert np.allclose(out.numpy(), ref, atol=1e-12, rtol=0)
    assert torch.equal(matmul(torch.eye(2, dtype=F64), torch.tensor([[2.0], [3.0]], dtype=F64)),
                       torch.tensor([[2.0], [3.0]], dtype=F64))


def test_gaussian_million_draws_and_independence():
    x = gaussian(RngStream(5, 1), (1_000_000,), F64)
    assert abs(float(x.mean())) < 0.005 and abs(float(x.var()) - 1) < 0.01
    a = gaussian(RngStream(5, 2), (100_000,), F64).numpy()
    b = gaussian(RngStream(5, 3), (100_000,), F64).numpy()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_grad_check_square():
    w = torch.tensor([3.0], dtype=F64, requires_grad=True)
    assert grad_check(lambda: (w ** 2).sum(), [w], eps=1e-4) < 1e-9


def test_softmax_shift_invariance():
    x = torch.randn(4, 5, dtype=F64)
    assert torch.allclose(softmax(x), softmax(x + 7.5), atol=1e-15)
    assert torch.equal(softmax(x).argmax(-1), softmax(x - 3).argmax(-1))


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(0, 100), st.lists(st.floats(-100, 100), min_size=1, max_size=20),
       st.floats(0, 100), st.floats(0, 100))
def test_percentile_singleton_and_monotone(v, p, vals, p1, p2):
    assert percentile([v], p) == v
    lo, hi = sorted((p1, p2))
    assert percentile(vals, lo) <= percentile(vals, hi)


@pytest.mark.parametrize("op", [torch.relu, torch.nn.functional.gelu, torch.nn.functional.softplus, torch.tanh,
                                lambda x: layer_norm(x, eps=1e-6), lambda x: softmax(x), lambda x: log_softmax(x)])
def test_elementwise_op_gradients(op):
    g = np.random.default_rng(1)
    w = torch.as_tensor(g.normal(size=(3, 5)) + 0.05).requires_grad_(True)
    c = torch.as_tensor(g.normal(size=(3, 5)))
    assert grad_check(lambda: (op(w) * c).sum(), [w]) <= 1e-5


def test_batch_norm_inference_uses_running_stats():
    bn = torch.nn.BatchNorm1d(3).to(F64)
    with torch.no_grad():
        bn.running_mean.fill_(2.0)
        bn.running_var.fill_(4.0)
    bn.eval()
    x = torch.full((2, 3), 4.0, dtype=F64)
    assert torch.allclose(bn(x), torch.full((2, 3), 1.0, dtype=F64), atol=1e-5)


def test_gradients_are_bitwise_repeatable():
    w = torch.randn(6, 4, dtype=F64, requires_grad=True)
    x = torch.randn(10, 6, dtype=F64)

    def grads():
        (g,) = torch.autograd.grad(torch.nn.functional.gelu(x @ w).pow(2).sum(), [w])
        return g

    assert torch.equal(grads(), grads())
