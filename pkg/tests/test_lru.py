import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrurec.lru import (
    LruParams,
    PassCounter,
    init_lru,
    lambda_of,
    lru_backward,
    lru_forward,
    lru_forward_parallel,
    lru_forward_sequential,
    lru_step,
    next_pow2,
    pad_pow2,
    parallel_scan,
    sequential_scan,
)
from lrurec.numeric import finite_diff_grad

from conftest import real_view, rel_err


def random_lru(rng, in_dim, rec_dim, scale=0.5):
    p = init_lru(in_dim, rec_dim, rng=rng)
    p.B *= scale / 0.02
    p.C *= scale / 0.02
    return p


def direct_sum_states(x, p):
    """h_k = sum_i lam^(k-i) g (B x_i), evaluated term by term."""
    lam = lambda_of(p)
    u = p.gamma * (x @ p.B.T)
    n, length, _ = x.shape
    h = np.zeros((n, length, p.rec_dim), dtype=complex)
    for k in range(length):
        for i in range(k + 1):
            h[:, k] += lam ** (k - i) * u[:, i]
    return h


# ---------------------------------------------------------------- init


@pytest.mark.parametrize("seed", range(5))
def test_init_radii_in_ring(seed):
    p = init_lru(8, 256, rng=seed)
    mod = np.abs(lambda_of(p))
    assert mod.min() >= 0.8 and mod.max() <= 0.99


def test_init_degenerate_ring():
    p = init_lru(4, 16, r_min=0.9, r_max=0.9, rng=0)
    np.testing.assert_allclose(np.abs(lambda_of(p)), 0.9, rtol=1e-14)
    np.testing.assert_allclose(p.gamma, math.sqrt(1 - 0.81), rtol=1e-13)
    assert abs(p.gamma[0] - 0.43589) < 1e-5


def test_init_is_deterministic():
    a, b = init_lru(3, 6, rng=42), init_lru(3, 6, rng=42)
    for f in ("nu_log", "theta_log", "gamma_log", "B", "C"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_init_gamma_normalizes_state_variance():
    p = init_lru(2, 64, rng=1)
    np.testing.assert_allclose(p.gamma**2, 1 - np.abs(lambda_of(p)) ** 2, rtol=1e-12)


def test_init_phase_within_max_phase():
    p = init_lru(2, 500, max_phase=math.pi / 10, rng=3)
    theta = np.exp(p.theta_log)
    assert theta.min() > 0 and theta.max() <= math.pi / 10


@pytest.mark.parametrize("r_min,r_max", [(0.0, 0.9), (0.9, 0.8), (0.5, 1.0)])
def test_init_rejects_bad_ring(r_min, r_max):
    with pytest.raises(ValueError):
        init_lru(2, 2, r_min, r_max)


# ------------------------------------------------------------ lambda_of


def _params_with(nu_log, theta_log):
    one = np.ones((1, 1), dtype=complex)
    return LruParams(np.array([nu_log]), np.array([theta_log]), np.zeros(1), one, one)


def test_lambda_of_pure_imaginary():
    lam = lambda_of(_params_with(math.log(0.1053605), math.log(math.pi / 2)))[0]
    assert abs(abs(lam) - 0.9) < 1e-7
    assert abs(lam - 0.9j) < 1e-7


def test_lambda_of_full_turn_is_real_positive():
    lam = lambda_of(_params_with(0.0, math.log(2 * math.pi)))[0]
    assert lam.real > 0 and abs(lam.imag) < 1e-15


@given(st.floats(-700, 700))
def test_lambda_modulus_below_one(nu_log):
    assert np.abs(lambda_of(_params_with(nu_log, 0.0)))[0] < 1.0


# ------------------------------------------------------------ forward


def test_single_step_forward():
    rng = np.random.default_rng(0)
    p = random_lru(rng, 3, 6)
    x = rng.normal(size=(2, 1, 3))
    y, h = lru_forward_sequential(x, None, p)
    h1 = p.gamma * (x[:, 0] @ p.B.T)
    np.testing.assert_allclose(h, h1, atol=1e-15)
    np.testing.assert_allclose(y[:, 0], (h1 @ p.C.T).real + x[:, 0], atol=1e-15)


def test_zero_input_zero_output():
    p = random_lru(np.random.default_rng(0), 3, 6)
    y, h = lru_forward_sequential(np.zeros((2, 5, 3)), None, p)
    assert not y.any() and not h.any()


def test_memoryless_when_lambda_vanishes():
    rng = np.random.default_rng(1)
    p = random_lru(rng, 3, 6)
    p.nu_log[:] = 10.0  # |lam| = exp(-e^10) underflows to 0
    x = rng.normal(size=(2, 7, 3))
    y, _ = lru_forward_sequential(x, None, p)
    expect = ((p.gamma * (x @ p.B.T)) @ p.C.T).real + x
    np.testing.assert_allclose(y, expect, atol=1e-14)


def test_parallel_two_steps():
    rng = np.random.default_rng(2)
    p = random_lru(rng, 3, 4)
    x = rng.normal(size=(3, 2, 3))
    c = PassCounter()
    y = lru_forward_parallel(x, None, p, counter=c)
    assert c.passes == 1
    assert np.max(np.abs(y - lru_forward_sequential(x, None, p)[0])) < 1e-12


def test_parallel_eight_steps_three_passes():
    c = PassCounter()
    p = init_lru(2, 4, rng=0)
    lru_forward_parallel(np.ones((1, 8, 2)), None, p, counter=c)
    assert c.passes == 3


def test_parallel_matches_sequential_medium():
    rng = np.random.default_rng(3)
    p = random_lru(rng, 4, 8)
    x = rng.normal(size=(2, 64, 4))
    diff = lru_forward_parallel(x, None, p) - lru_forward_sequential(x, None, p)[0]
    assert np.max(np.abs(diff)) < 1e-9


def test_parallel_rejects_non_power_of_two():
    p = init_lru(2, 4, rng=0)
    with pytest.raises(ValueError):
        lru_forward_parallel(np.ones((1, 6, 2)), None, p)
    with pytest.raises(ValueError):
        parallel_scan(np.ones((1, 6, 4), dtype=complex), np.ones(4))


def test_parallel_scan_does_not_modify_input():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(2, 16, 3)) + 1j * rng.normal(size=(2, 16, 3))
    lam = 0.9 * np.exp(1j * rng.uniform(0, 6, 3))
    before = u.copy()
    parallel_scan(u[:, ::-1], lam)
    assert np.array_equal(u, before)


def test_decomposition_identity():
    rng = np.random.default_rng(5)
    p = random_lru(rng, 3, 5)
    x = rng.normal(size=(2, 32, 3))
    u = p.gamma * (x @ p.B.T)
    h = sequential_scan(u, lambda_of(p))
    assert np.max(np.abs(h - direct_sum_states(x, p))) < 1e-10


def test_forward_rejects_right_padding():
    p = init_lru(2, 4, rng=0)
    mask = np.array([[True, True, False, True]])
    with pytest.raises(ValueError):
        lru_forward(np.ones((1, 4, 2)), mask, p)


def test_forward_rejects_wrong_width():
    p = init_lru(2, 4, rng=0)
    with pytest.raises(ValueError):
        lru_forward(np.ones((1, 4, 3)), None, p)


def test_left_pads_leave_state_at_zero():
    rng = np.random.default_rng(6)
    p = random_lru(rng, 3, 6)
    x = rng.normal(size=(1, 5, 3))
    padded, mask = pad_pow2(x, np.ones((1, 5), dtype=bool))
    y, h = lru_forward(padded, mask, p)
    assert not h[:, :3].any() and not y[:, :3].any()
    np.testing.assert_allclose(y[:, 3:], lru_forward_sequential(x, None, p)[0], atol=1e-12)


def test_stability_bound_long_rollout():
    rng = np.random.default_rng(7)
    p = random_lru(rng, 4, 8, scale=1.0)
    p.nu_log[:] = rng.normal(-3.0, 1.0, 8)  # radii close to one
    c = 2.5
    x = rng.uniform(-c, c, size=(2, 10000, 4))
    u = p.gamma * (x @ p.B.T)
    lam = lambda_of(p)
    h = sequential_scan(u, lam)
    bound = c * p.gamma.max() * np.abs(p.B).sum(axis=1).max() / (1 - np.abs(lam).max())
    assert np.abs(h).max() <= bound


# -------------------------------------------------------------- step


def test_step_from_zero_matches_first_position_bitwise():
    rng = np.random.default_rng(8)
    p = random_lru(rng, 3, 6)
    x = rng.normal(size=(2, 4, 3))
    y_seq, _ = lru_forward_sequential(x, None, p)
    y1, _ = lru_step(p, np.zeros((2, 6), dtype=complex), x[:, 0])
    assert np.array_equal(y1, y_seq[:, 0])


def test_iterated_steps_bitwise_equal_sequential():
    rng = np.random.default_rng(9)
    p = random_lru(rng, 3, 6)
    x = rng.normal(size=(2, 20, 3))
    y_seq, h_seq = lru_forward_sequential(x, None, p)
    h = np.zeros((2, 6), dtype=complex)
    for k in range(20):
        y, h = lru_step(p, h, x[:, k])
        assert np.array_equal(y, y_seq[:, k])
    assert np.array_equal(h, h_seq)


def test_step_with_zero_input_decays_state():
    rng = np.random.default_rng(10)
    p = random_lru(rng, 3, 6)
    s = rng.normal(size=6) + 1j * rng.normal(size=6)
    y, s2 = lru_step(p, s, np.zeros(3))
    lam = lambda_of(p)
    np.testing.assert_allclose(s2, lam * s, atol=1e-15)
    np.testing.assert_allclose(y, (p.C @ (lam * s)).real, atol=1e-14)


def test_fifty_steps_match_scan_forward():
    rng = np.random.default_rng(11)
    p = random_lru(rng, 4, 8)
    x = rng.normal(size=(1, 50, 4))
    y_full, _ = lru_forward(x, None, p)
    h = np.zeros(8, dtype=complex)
    ys = []
    for k in range(50):
        y, h = lru_step(p, h, x[0, k])
        ys.append(y)
    assert np.max(np.abs(np.array(ys) - y_full[0])) < 1e-10


# ---------------------------------------------------------- backward


def test_backward_zero_upstream():
    rng = np.random.default_rng(12)
    p = random_lru(rng, 3, 6)
    dx, grads = lru_backward(rng.normal(size=(2, 8, 3)), None, p, np.zeros((2, 8, 3)))
    assert not dx.any()
    assert all(not g.any() for g in grads.values())


def test_backward_scalar_nu():
    rng = np.random.default_rng(13)
    p = random_lru(rng, 1, 1)
    x = rng.normal(size=(1, 2, 1))
    dy = np.zeros((1, 2, 1))
    dy[0, 1, 0] = 1.0
    _, grads = lru_backward(x, None, p, dy)
    loss = lambda _: float(lru_forward_sequential(x, None, p)[0][0, 1, 0])
    assert rel_err(finite_diff_grad(loss, p.nu_log), grads["nu_log"]) < 1e-5


def test_backward_input_gradient():
    rng = np.random.default_rng(14)
    p = random_lru(rng, 4, 8)
    x = rng.normal(size=(2, 8, 4))
    w = rng.normal(size=(2, 8, 4))
    dx, _ = lru_backward(x, None, p, w)
    loss = lambda _: float(np.sum(w * lru_forward_sequential(x, None, p)[0]))
    assert rel_err(finite_diff_grad(loss, x), dx) < 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 16), st.integers(1, 5), st.integers(1, 8),
       st.booleans(), st.integers(0, 2**31))
def test_backward_all_groups(n, length, in_dim, rec_dim, residual, seed):
    rng = np.random.default_rng(seed)
    p = random_lru(rng, in_dim, rec_dim)
    x = rng.normal(size=(n, length, in_dim))
    mask = np.ones((n, length), dtype=bool)
    mask[0, : rng.integers(0, length)] = False
    w = rng.normal(size=x.shape)
    dx, grads = lru_backward(x, mask, p, w, residual)
    loss = lambda _: float(np.sum(w * lru_forward_sequential(x, mask, p, residual)[0] * mask[..., None]))
    assert rel_err(finite_diff_grad(loss, x)* mask[..., None], dx) < 1e-6
    for name in ("nu_log", "theta_log", "gamma_log", "B", "C"):
        arr = getattr(p, name)
        num = finite_diff_grad(loss, real_view(arr))
        assert rel_err(num, real_view(grads[name])) < 1e-6, name


# ----------------------------------------------------------- padding


def test_pad_pow2_cases():
    x = np.ones((2, 5, 3))
    m = np.ones((2, 5), dtype=bool)
    xp, mp = pad_pow2(x, m)
    assert xp.shape == (2, 8, 3)
    assert not mp[:, :3].any() and mp[:, 3:].all()
    assert not xp[:, :3].any()
    x8, m8 = pad_pow2(np.ones((1, 8, 2)), np.ones((1, 8), dtype=bool))
    assert x8.shape == (1, 8, 2)
    x1, _ = pad_pow2(np.ones((1, 1, 2)), np.ones((1, 1), dtype=bool))
    assert x1.shape == (1, 1, 2)


@given(st.integers(1, 5000))
def test_next_pow2(n):
    p = next_pow2(n)
    assert p >= n and p & (p - 1) == 0 and (p == 1 or p // 2 < n)
