import math
import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbipm.balancing import (
    BalanceConfig, BalancerState, PathSchedule, balance, balance_error, balanced_matrix,
    geometric_mean_norm, kr_balance, kr_step, lb_balance, lb_direction, lb_objective, lb_step,
    ne_balance, newton_direction, objective_f, sk_balance, sk_step, stabilized_path,
)
from mbipm.core import NumericalError, SupportError, TransportPlan, magic, null_vector
from mbipm.support import SupportSet, totalize

TIGHT = BalanceConfig(tol=1e-13, max_iter=200)


def as_cost(A):
    """Balancing ``A`` at t = 1 means using the cost ``-log A``."""
    return -np.log(A)


def zero(n, t=1.0, support=None):
    return BalancerState(n, np.zeros(2 * n), t, support)


def sk_limit(A, sweeps=200000):
    """Plain Sinkhorn iteration to a tight fixed point."""
    r = np.ones(A.shape[0])
    c = np.ones(A.shape[0])
    for _ in range(sweeps):
        r = 1 / (A @ c)
        c = 1 / (A.T @ r)
        B = r[:, None] * A * c[None, :]
        if np.abs(B.sum(1) - 1).max() < 1e-15:
            break
    return B


def test_balanced_matrix_examples():
    P = balanced_matrix(zero(2), np.zeros((2, 2)))
    assert np.allclose(P.dense(), np.ones((2, 2)))
    mask = np.ones((3, 3))
    mask[0, 1] = 0
    P = balanced_matrix(zero(3, support=SupportSet.from_mask(mask)), np.zeros((3, 3)))
    assert P.dense()[0, 1] == 0.0


def test_balanced_matrix_large_exponents():
    n = 4
    C = 1000.0 + magic(n) / 16
    # exp(-1000) underflows, but the potentials cancel it in the exponent
    st = BalancerState(n, np.full(2 * n, 500.0), 1.0)
    P = balanced_matrix(st, C).dense()
    assert np.allclose(P, np.exp(-magic(n) / 16), rtol=1e-12)
    with pytest.raises(NumericalError):
        balanced_matrix(BalancerState(n, np.full(2 * n, 400.0), 2.0), magic(n).astype(float))


def test_balance_error_examples():
    assert balance_error(TransportPlan(2, np.full((2, 2), 0.5))) == 0
    assert balance_error(TransportPlan(2, np.array([[1.0, 2], [3, 4]]))) == 16


def test_sk_converged_run_on_scaled_magic():
    C = magic(3) / 3
    st, rep = sk_balance(zero(3), C, BalanceConfig(tol=1e-12, max_iter=100000))
    assert rep.converged
    P = balanced_matrix(st, C).dense()
    assert np.allclose(P.sum(0), 1, atol=1e-12) and np.allclose(P.sum(1), 1, atol=1e-12)


def test_sk_already_balanced():
    n = 4
    st, rep = sk_balance(zero(n), np.full((n, n), math.log(n)))
    assert rep.converged and rep.iterations <= 1
    assert np.allclose(st.nu, 0, atol=1e-14)


@pytest.mark.parametrize("method", ["sk", "kr", "ne", "lb"])
@pytest.mark.parametrize("eps", [1e-2, 1e-4, 1e-6])
def test_epsilon_closed_form(method, eps):
    A = np.array([[1.0, eps], [1.0, 1.0]])
    st, rep = balance(zero(2), as_cost(A), method, BalanceConfig(tol=1e-13, max_iter=100000))
    s = math.sqrt(eps)
    expect = np.array([[1, s], [s, 1]]) / (1 + s)
    assert np.allclose(balanced_matrix(st, as_cost(A)).dense(), expect, rtol=0, atol=1e-8)
    zeta = np.exp(st.nu)
    assert zeta[0] / zeta[1] * s == pytest.approx(1, rel=1e-6)
    assert zeta[3] / zeta[2] * s == pytest.approx(1, rel=1e-6)


def test_sk_slow_on_hard_magic_instance():
    C = magic(50).astype(float)
    _, kr = kr_balance(zero(50, 1 / 20), C)
    assert kr.converged
    _, sk = sk_balance(zero(50, 1 / 20), C, BalanceConfig(max_iter=10 * kr.iterations))
    assert sk.error > 1e-2
    assert kr.iterations < sk.iterations


def test_newton_methods_on_doubly_stochastic_input():
    n = 5
    for m in ("ne", "lb", "kr"):
        _, rep = balance(zero(n), np.full((n, n), math.log(n)), m)
        assert rep.iterations == 0 and rep.converged


@pytest.mark.parametrize("seed", range(3))
def test_kr_ne_match_sk_limit(seed):
    rng = np.random.default_rng(seed)
    for n in (2, 3):
        A = rng.uniform(0.05, 1, (n, n))
        ref = sk_limit(A)
        for m in ("kr", "ne", "lb"):
            st, rep = balance(zero(n), as_cost(A), m, TIGHT)
            assert rep.converged
            assert np.allclose(balanced_matrix(st, as_cost(A)).dense(), ref, atol=1e-10)


def test_ne_converges_on_magic50_smallest_t():
    _, rep = ne_balance(zero(50, 1 / 160), magic(50).astype(float), BalanceConfig(tol=1e-5))
    assert rep.converged and rep.error <= 1e-5


def test_lb_and_ne_agree_on_hard_magic():
    C = magic(50).astype(float)
    cfg = BalanceConfig(tol=1e-11, max_iter=500)
    a, ra = lb_balance(zero(50, 1 / 20), C, cfg)
    b, rb = ne_balance(zero(50, 1 / 20), C, cfg)
    assert ra.converged and rb.converged
    Pa, Pb = balanced_matrix(a, C).dense(), balanced_matrix(b, C).dense()
    assert np.abs(Pa - Pb).max() <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lb_direction_is_descent(seed):
    rng = np.random.default_rng(seed)
    n = 4
    A = rng.uniform(0.1, 2, (n, n))
    state = BalancerState(n, rng.normal(size=2 * n) * 0.3, 1.0)
    zeta, u = lb_direction(state, as_cost(A))
    At = np.block([[np.zeros((n, n)), A], [A.T, np.zeros((n, n))]])
    grad = At @ zeta - 1 / zeta
    P = zeta[:n, None] * A * zeta[None, n:]
    resid = np.concatenate([P.sum(1), P.sum(0)]) - 1
    if np.abs(resid).max() > 1e-8:
        assert grad @ u < 0
    # directional derivative agrees with finite differences of g
    h = 1e-6
    fd = (lb_objective(A, zeta + h * u) - lb_objective(A, zeta - h * u)) / (2 * h)
    assert fd == pytest.approx(grad @ u, rel=1e-5, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_lb_objective_gauge_invariance(seed, s):
    rng = np.random.default_rng(seed)
    n = 4
    A = rng.uniform(0.1, 2, (n, n))
    zeta = rng.uniform(0.2, 3, 2 * n)
    shifted = zeta * np.exp(s * null_vector(n))
    g0 = lb_objective(A, zeta)
    assert lb_objective(A, shifted) == pytest.approx(g0, rel=1e-12, abs=1e-12)


def test_lb_objective_matches_log_form():
    rng = np.random.default_rng(7)
    n = 5
    A = rng.uniform(0.1, 2, (n, n))
    state = BalancerState(n, rng.normal(size=2 * n), 1.0)
    zeta = np.exp(state.nu)
    assert lb_objective(A, zeta) == pytest.approx(objective_f(state, as_cost(A)), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ne_decrement_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = 4
    C = rng.uniform(0, 3, (n, n))
    t = 1.3
    state = BalancerState(n, rng.normal(size=2 * n) * 0.5, t)
    g, H, d = newton_direction(state, C)
    dec = -g @ d
    h = 1e-5

    def f(a):
        return objective_f(BalancerState(n, state.nu + a * d / t, t), C)

    fd = (f(h) - f(-h)) / (2 * h)
    assert fd == pytest.approx(-dec, rel=1e-6)
    assert dec > 0


def dense_ne_hessian(A, zeta):
    n = A.shape[0]
    P = zeta[:n, None] * A * zeta[None, n:]
    return np.block([[np.diag(P.sum(1)), P], [P.T, np.diag(P.sum(0))]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_hessian_psd_with_expected_null_space(n, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < 0.6
    sup = totalize(SupportSet.from_mask(mask))
    A = np.where(sup.mask() > 0, rng.uniform(0.1, 2, (n, n)), 0.0)
    nu = rng.normal(size=2 * n)
    H = dense_ne_hessian(A, np.exp(nu))
    lam, V = np.linalg.eigh(H)
    assert lam.min() >= -1e-10 * max(1.0, lam.max())
    null = V[:, lam < 1e-9 * lam.max()]
    # null vectors satisfy w1_i + w2_j = 0 on the support
    r, c = sup.rows, sup.cols
    assert np.allclose(null[r] + null[n + c], 0, atol=1e-7)
    assert null.shape[1] >= 1


@pytest.mark.parametrize("seed", range(4))
def test_newton_hessian_operator_matches_dense(seed):
    rng = np.random.default_rng(seed)
    n = 4
    C = rng.uniform(0, 2, (n, n))
    state = BalancerState(n, rng.normal(size=2 * n) * 0.2, 1.0)
    _, H, _ = newton_direction(state, C)
    dense = dense_ne_hessian(np.exp(-C), np.exp(state.nu))
    y = rng.normal(size=2 * n)
    assert np.allclose(H(y), dense @ y, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_all_methods_reach_same_balanced_matrix(n, seed):
    rng = np.random.default_rng(seed)
    C = rng.uniform(0, 2, (n, n))
    mats = []
    for m in ("sk", "kr", "ne", "lb"):
        cfg = BalanceConfig(tol=1e-10, max_iter=100000 if m == "sk" else 300)
        st, rep = balance(zero(n), C, m, cfg)
        assert rep.converged, (m, rep.message)
        mats.append(balanced_matrix(st, C).dense())
    for M in mats[1:]:
        assert np.allclose(M, mats[0], atol=1e-8)


@pytest.mark.parametrize("method", ["ne", "lb"])
def test_monotone_descent(method):
    C = magic(20).astype(float)
    _, rep = balance(zero(20, 1 / 10), C, method)
    obj = [r["objective"] for r in rep.trace]
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(obj, obj[1:]))


def test_sk_decreases_objective_per_sweep():
    rng = np.random.default_rng(3)
    n = 6
    C = rng.uniform(0, 3, (n, n))
    state = zero(n)
    cfg = BalanceConfig()
    vals = [objective_f(state, C)]
    for _ in range(20):
        state = sk_step(state, C, cfg)
        vals.append(objective_f(state, C))
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_report_metrics_gauge_invariant(seed, s):
    rng = np.random.default_rng(seed)
    n = 4
    C = rng.uniform(0, 2, (n, n))
    nu = rng.normal(size=2 * n)
    a = BalancerState(n, nu, 1.0)
    b = BalancerState(n, nu + s * null_vector(n), 1.0)
    assert geometric_mean_norm(a) == pytest.approx(geometric_mean_norm(b), rel=1e-10)
    ea = balance_error(balanced_matrix(a, C))
    eb = balance_error(balanced_matrix(b, C))
    assert ea == pytest.approx(eb, rel=1e-10, abs=1e-12)


def test_state_is_gauge_fixed():
    st = BalancerState(3, np.arange(6.0), 1.0)
    assert st.nu[:3].sum() == pytest.approx(st.nu[3:].sum())


@pytest.mark.parametrize("seed", range(6))
def test_boundedness_witness(seed):
    rng = np.random.default_rng(seed)
    n = 4
    sup = totalize(SupportSet.from_mask(rng.random((n, n)) < 0.4), rng.permutation(n))
    A = np.where(sup.mask() > 0, rng.uniform(0.05, 1.0, (n, n)), 0.0)
    C = np.where(A > 0, -np.log(np.where(A > 0, A, 1)), 0.0)
    delta = A[A > 0].min()
    c0 = lb_objective(A, np.ones(2 * n))
    st, rep = kr_balance(zero(n, support=sup), C, BalanceConfig(tol=1e-12))
    assert rep.converged
    zeta = np.exp(st.nu)
    assert lb_objective(A, zeta) <= c0
    prod = zeta[sup.rows] * zeta[n + sup.cols]
    lower = math.exp(-c0 + (n - 1) * (1 + math.log(delta)))
    upper = max((c0 - (n - 1) * (1 + math.log(delta))) / delta, 1.0)
    assert np.all(prod >= lower) and np.all(prod <= upper)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_kr_step_equals_unit_lb_step(n, seed):
    rng = np.random.default_rng(seed)
    C = rng.uniform(0, 1, (n, n))
    # near-balanced start so the unit step stays inside the orthant
    st, _ = sk_balance(zero(n), C, BalanceConfig(tol=1e-2, max_iter=50))
    a = kr_step(st, C)
    b = lb_step(st, C, alpha=1.0)
    assert np.allclose(a.nu, b.nu, atol=1e-12)


def test_support_failure_is_reported():
    mask = np.ones((3, 3))
    mask[1] = 0
    with pytest.raises(SupportError):
        kr_balance(zero(3, support=SupportSet.from_mask(mask)), np.zeros((3, 3)))


def test_kr_warns_without_total_support():
    A = np.array([[1, 0, 0], [2, 3, 0], [0, 0, 4]], dtype=float)
    sup = SupportSet.from_mask(A > 0)
    with pytest.warns(RuntimeWarning):
        kr_balance(zero(3, support=sup), np.zeros((3, 3)), BalanceConfig(max_iter=5))


def test_single_step_path_equals_direct():
    C = magic(10).astype(float)
    res = stabilized_path(C, [0.1], "kr")
    st, rep = kr_balance(zero(10, 0.1), C)
    assert np.allclose(res.final.nu, st.nu)
    assert res.converged


def test_path_translation_balances_final_kernel():
    C = magic(30).astype(float)
    res = stabilized_path(C, PathSchedule(0.01, 2.0, 0.08), "kr")
    assert res.converged
    assert res.ts[-1] == pytest.approx(0.08)
    assert balance_error(balanced_matrix(res.final, C)) <= 1e-5 * math.sqrt(30)


def test_warm_start_reduces_iterations():
    C = magic(50).astype(float)
    res = stabilized_path(C, [1 / 160, 1 / 80, 1 / 40, 1 / 20], "kr")
    _, cold = kr_balance(zero(50, 1 / 20), C)
    assert res.reports[-1].iterations < cold.iterations


def test_path_rejects_bad_schedule():
    with pytest.raises(ValueError):
        stabilized_path(np.zeros((2, 2)), [1.0, 0.5])
