import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nestdiff import diffusion as D
from nestdiff.numerics import NumericError, RngStream, one_hot, stream_id

F64 = torch.float64


def small_denoiser(T=8, C=2, seed=0):
    cfg = D.DenoiserConfig(image_dim=16, num_classes=C, T=T, width=8, encoder_hidden=(8, 8), chain_hidden=(4,))
    return D.Denoiser(cfg, RngStream(seed), F64)


schedules = st.builds(
    lambda T, a, frac: D.make_schedule(T, a, a * frac),
    st.integers(2, 40), st.floats(0.5, 0.9999), st.floats(0.3, 0.999),
)


def test_schedule_endpoints_and_recursion():
    s = D.make_schedule(5, 0.99, 0.9)
    assert s.T == 5 and s.a(1) == 0.99 and s.a(5) == pytest.approx(0.9)
    assert s.ab(0) == 1.0
    assert all(s.alpha_bar[t] == s.alpha_bar[t - 1] * s.alpha[t - 1] for t in range(1, 6))
    assert np.allclose(np.diff(1 - s.alpha), (0.99 - 0.9) / 4)


def test_full_schedule():
    s = D.make_schedule(D.FULL_T, D.FULL_ALPHA_FIRST, D.FULL_ALPHA_LAST)
    assert s.ab(s.T) < 1e-3 and s.ab(1) == pytest.approx(1 - 1e-4)


def test_toy_schedule_reaches_noise():
    s = D.make_schedule(100, 1 - 1e-3, 0.8)
    assert s.ab(100) < 1e-3


@pytest.mark.parametrize("args", [(0, 0.9, 0.5), (5, 0.5, 0.9), (5, 1.0, 0.5), (5, 0.9, 0.0)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        D.make_schedule(*args)


@settings(max_examples=40, deadline=None)
@given(schedules, st.integers(0, 10_000))
def test_forward_sample_mean_limit(sched, seed):
    rng = np.random.default_rng(seed)
    y0, z, e = (torch.as_tensor(rng.normal(size=(3, 2))) for _ in range(3))
    t = int(rng.integers(1, sched.T + 1))
    zero = torch.zeros(3, 2, dtype=F64)
    y = D.forward_sample(y0, z, e, t, zero, sched)
    w = math.sqrt(sched.ab(t))
    assert torch.allclose(y, w * y0 + (1 - w) * (z + e), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(schedules, st.integers(0, 10_000))
def test_posterior_mean_is_affine_combination(sched, seed):
    t = int(np.random.default_rng(seed).integers(2, sched.T + 1))
    c_t, c_0, c_shift, var = D.posterior_coefficients(t, sched)
    # the posterior mean of a constant chain (y_t = y_0 = s) is s
    assert float(c_t + c_0 + c_shift) == pytest.approx(1.0, abs=1e-12)
    assert 0 < float(var) < 1


@settings(max_examples=40, deadline=None)
@given(schedules, st.integers(0, 10_000))
def test_round_trip_property(sched, seed):
    rng = np.random.default_rng(seed)
    y0, z, e, eps = (torch.as_tensor(rng.normal(size=(4, 3))) for _ in range(4))
    t = torch.as_tensor(rng.integers(1, sched.T + 1, 4))
    if sched.alpha_bar[t.numpy()].min() < 1e-12:
        return
    back = D.recover_y0(D.forward_sample(y0, z, e, t, eps, sched), z, e, t, eps, sched)
    assert float((back - y0).abs().max()) < 1e-9


def test_posterior_requires_t_at_least_two():
    s = D.make_schedule(5, 0.99, 0.9)
    x = torch.zeros(1, 1, dtype=F64)
    with pytest.raises(ValueError):
        D.posterior_params(x, x, x, x, 1, s)
    with pytest.raises(ValueError):
        D.forward_sample(x, x, x, 6, x, s)


def test_recover_y0_guard():
    s = D.make_schedule(2000, 0.999, 0.9)
    assert s.ab(2000) < 1e-12
    x = torch.zeros(1, 1, dtype=F64)
    with pytest.raises(NumericError):
        D.recover_y0(x, x, x, 2000, x, s)


def test_denoiser_shapes_and_time_range():
    m = small_denoiser()
    x = torch.randn(4, 4, 4, 1, dtype=F64)
    y = torch.randn(4, 2, dtype=F64)
    m.eval()
    assert m(y, y, x, 3).shape == (4, 2)
    assert m(y, y, x, torch.tensor([1, 2, 3, 8])).shape == (4, 2)
    with pytest.raises(ValueError):
        m(y, y, x, 0)
    with pytest.raises(ValueError):
        m(y, y, x, 9)


def test_time_embedding_changes_output():
    m = small_denoiser()
    m.eval()
    x = torch.randn(2, 16, dtype=F64)
    y = torch.randn(2, 2, dtype=F64)
    assert not torch.equal(m(y, y, x, 1), m(y, y, x, 2))


def test_loss_requires_rng_or_explicit_noise():
    m = small_denoiser()
    x, y = torch.randn(4, 16, dtype=F64), one_hot([0, 1, 0, 1], 2, F64)
    with pytest.raises(ValueError):
        D.loss_diffusion(m, x, y, y, D.make_schedule(8, 0.99, 0.8))


def test_loss_is_replayable():
    m = small_denoiser()
    s = D.make_schedule(8, 0.99, 0.8)
    x, y = torch.randn(4, 16, dtype=F64), one_hot([0, 1, 0, 1], 2, F64)
    a = D.loss_diffusion(m, x, y, y, s, RngStream(3, 1))
    b = D.loss_diffusion(m, x, y, y, s, RngStream(3, 1))
    assert torch.equal(a, b)


def test_loss_with_perfect_noise_model_is_zero():
    class Oracle:
        def condition(self, x):
            return torch.zeros(x.shape[0], 2, dtype=F64), None

        def estimate(self, y_t, z, features, t):
            return self.eps

    s = D.make_schedule(8, 0.99, 0.8)
    oracle = Oracle()
    oracle.eps = torch.randn(3, 2, dtype=F64)
    y = one_hot([0, 1, 1], 2, F64)
    loss = D.loss_diffusion(oracle, torch.zeros(3, 4, dtype=F64), y, y, s, t=torch.tensor([1, 4, 8]), eps=oracle.eps)
    assert float(loss) == 0.0


def _chains(model, x, z, s, seed, ids):
    return D.sample_chain(model, x, z, s, [RngStream(seed, stream_id("chain", i)) for i in ids])


def test_sample_chain_replay_and_batch_independence():
    m = small_denoiser()
    s = D.make_schedule(8, 0.99, 0.8)
    x = torch.randn(3, 16, dtype=F64)
    z = torch.softmax(torch.randn(3, 2, dtype=F64), 1)
    full = _chains(m, x, z, s, 1, [0, 1, 2])
    assert full.shape == (3, 2)
    assert torch.equal(full, _chains(m, x, z, s, 1, [0, 1, 2]))
    assert torch.allclose(full[1:2], _chains(m, x[1:2], z[1:2], s, 1, [1]), atol=1e-12)
    assert not torch.equal(full, _chains(m, x, z, s, 2, [0, 1, 2]))


def test_sample_chain_needs_one_stream_per_row():
    m = small_denoiser()
    s = D.make_schedule(8, 0.99, 0.8)
    with pytest.raises(ValueError):
        D.sample_chain(m, torch.zeros(2, 16, dtype=F64), torch.zeros(2, 2, dtype=F64), s, [RngStream(0)])


def test_sample_chain_with_oracle_noise_recovers_y0():
    """With a noise model that knows the true y_0, every reverse step lands on y_0."""
    s = D.make_schedule(6, 0.98, 0.7)
    y0 = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=F64)

    class Oracle(torch.nn.Module):
        def condition(self, x):
            return torch.zeros(x.shape[0], 2, dtype=F64), None

        def estimate(self, y_t, z, features, t):
            ab = s.ab(t)
            return (y_t - math.sqrt(ab) * y0 - (1 - math.sqrt(ab)) * z) / math.sqrt(1 - ab)

    z = torch.full((2, 2), 0.5, dtype=F64)
    out = D.sample_chain(Oracle(), torch.zeros(2, 3, dtype=F64), z, s, [RngStream(0, i) for i in range(2)])
    assert torch.allclose(out, y0, atol=1e-10)


def test_single_step_chain_is_one_recovery():
    m = small_denoiser(T=1)
    s = D.make_schedule(1, 0.9, 0.5)
    x = torch.randn(2, 16, dtype=F64)
    z = torch.softmax(torch.randn(2, 2, dtype=F64), 1)
    streams = [RngStream(4, i) for i in range(2)]
    out = D.sample_chain(m, x, z, s, streams)
    y_T = z + torch.stack([RngStream(4, i).normal((1, 2), F64)[0] for i in range(2)])
    e_x, feats = m.condition(x)
    ref = D.recover_y0(y_T, z, e_x, 1, m.estimate(y_T, z, feats, 1), s)
    assert torch.allclose(out, ref, atol=1e-12)
