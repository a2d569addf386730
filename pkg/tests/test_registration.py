import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from mbipm.balancing import BalancerState, PathSchedule, kr_balance
from mbipm.cli import synthetic_clouds
from mbipm.core import ShapeError, TransportPlan, l2_cost
from mbipm.ipm import snne_solve
from mbipm.registration import (
    RegistrationConfig, center, register_rigid, register_rigid_entropic, registration_error,
    rigid_objective, svd_update, warm_start_coarse_to_fine,
)


def rotation(rng, d=3):
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    return Q


def identity_plan(n):
    return TransportPlan.from_permutation(np.arange(n))


def test_svd_update_identity():
    Y = center(np.random.default_rng(0).normal(size=(10, 3)))
    tr = svd_update(Y, Y, identity_plan(10), 0.0)
    assert np.allclose(tr.Q, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_svd_update_recovers_rotation(seed):
    rng = np.random.default_rng(seed)
    Y = center(rng.normal(size=(20, 3)))
    R = rotation(rng)
    Z = Y @ R.T
    tr = svd_update(Y, Z, identity_plan(20), 0.0)
    assert np.allclose(tr.Q, R.T, atol=1e-8)
    assert registration_error(Y, Z, tr.Q, identity_plan(20)) < 1e-12


def test_svd_update_large_regularizer():
    rng = np.random.default_rng(1)
    Y = center(rng.normal(size=(8, 3)))
    Z = Y @ rotation(rng).T
    tr = svd_update(Y, Z, identity_plan(8), 1e12)
    assert np.allclose(tr.Q, np.eye(3), atol=1e-9)


def test_degenerate_cross_moment_flagged():
    Y = np.zeros((4, 3))
    Y[:, 0] = [-1.5, -0.5, 0.5, 1.5]
    assert svd_update(Y, Y, identity_plan(4), 0.0).degenerate
    assert not svd_update(Y, Y, identity_plan(4), 1e-3).degenerate


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_orthogonality_and_half_step_descent(n, seed, eta):
    rng = np.random.default_rng(seed)
    Y = center(rng.normal(size=(n, 3)))
    Z = rng.normal(size=(n, 3))
    X = rng.dirichlet(np.ones(n), size=n)
    plan = TransportPlan(n, X)
    tr = svd_update(Y, Z, plan, eta)
    assert np.abs(tr.Q.T @ tr.Q - np.eye(3)).max() <= 1e-10
    Q0 = rotation(rng)
    assert rigid_objective(Y, Z, tr.Q, plan, eta) <= rigid_objective(Y, Z, Q0, plan, eta) + 1e-10
    assert rigid_objective(Y, Z, tr.Q, plan, eta) <= rigid_objective(Y, Z, np.eye(3), plan, eta) + 1e-10


def test_fix_reflection():
    rng = np.random.default_rng(2)
    Y = center(rng.normal(size=(12, 3)))
    Z = Y * np.array([1, 1, -1])
    assert np.linalg.det(svd_update(Y, Z, identity_plan(12), 0.0).Q) < 0
    assert np.linalg.det(svd_update(Y, Z, identity_plan(12), 0.0, fix_reflection=True).Q) > 0


def test_error_zero_iff_matched():
    rng = np.random.default_rng(3)
    Y = center(rng.normal(size=(6, 3)))
    R = rotation(rng)
    Z = Y @ R.T
    assert registration_error(Y, Z, R.T, identity_plan(6)) < 1e-20
    assert registration_error(Y, Z, np.eye(3), identity_plan(6)) > 1e-3
    shuffled = TransportPlan.from_permutation(np.roll(np.arange(6), 1))
    assert registration_error(Y, Z, R.T, shuffled) > 1e-3


def test_register_identical_clouds():
    Y = center(np.random.default_rng(4).normal(size=(30, 3)))
    tr, plan, rep = register_rigid(Y, Y)
    assert rep.converged and rep.iterations == 1
    assert rep.error < 1e-8
    assert np.allclose(tr.Q, np.eye(3), atol=1e-6)


def test_register_rotated_cloud():
    Y, Z, R, perm = synthetic_clouds(250, 30.0, 1)
    tr, plan, rep = register_rigid(Y, Z)
    assert rep.converged and rep.error <= 1e-4
    assert rep.permutation == np.argsort(perm).tolist()
    assert np.allclose(tr.Q, R.T, atol=1e-5)


def test_entropic_full_support_matches_dense_alternation():
    Y, Z, _, _ = synthetic_clouds(16, 40.0, 5)
    _, _, dense = register_rigid(Y, Z)
    _, _, ent = register_rigid_entropic(Y, Z, k=16)
    assert dense.converged and ent.converged
    assert abs(dense.error - ent.error) <= 1e-6


def test_entropic_support_bound():
    Y, Z, _, perm = synthetic_clouds(150, 25.0, 6)
    k = 5
    _, _, rep = register_rigid_entropic(Y, Z, k=k, xi_max=3)
    assert rep.converged
    assert rep.max_support <= (2 * k + 1) * 150
    assert all(r["support_size"] <= (2 * k + 1) * 150 for r in rep.trace)
    assert rep.permutation == np.argsort(perm).tolist()


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        register_rigid(np.zeros((3, 3)), np.zeros((4, 3)))


def sphere_cloud(rng, n):
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    return center(u * np.array([1.0, 0.7, 0.5]))


def test_warm_start_feasible_on_same_sets():
    rng = np.random.default_rng(7)
    Y = sphere_cloud(rng, 20)
    Z = Y @ rotation(rng).T
    C = l2_cost(Y, Z)
    pot, _, _ = snne_solve(C, PathSchedule(1, 1.5, 1e3), early_termination=False)
    nu = warm_start_coarse_to_fine(Y, Z, pot.nu, Y, Z)
    assert (C - nu[:20, None] - nu[None, 20:]).min() >= -1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_warm_start_feasibility_and_weak_duality(m, n, seed):
    rng = np.random.default_rng(seed)
    Yc, Zc = rng.normal(size=(m, 3)), rng.normal(size=(m, 3))
    Yf, Zf = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    nu = warm_start_coarse_to_fine(Yc, Zc, rng.normal(size=2 * m), Yf, Zf)
    C = l2_cost(Yf, Zf)
    assert (C - nu[:n, None] - nu[None, n:]).min() >= -1e-10
    r, c = linear_sum_assignment(C)
    assert nu.sum() <= C[r, c].sum() + 1e-9


def test_warm_start_saves_balancing_iterations():
    rng = np.random.default_rng(0)
    Yf = sphere_cloud(rng, 500)
    ang = 0.3
    R = np.array([[np.cos(ang), -np.sin(ang), 0], [np.sin(ang), np.cos(ang), 0], [0, 0, 1]])
    Zf = Yf @ R.T
    idx = rng.choice(500, 250, replace=False)
    Yc, Zc = Yf[idx], Zf[idx]
    pot, _, _ = snne_solve(l2_cost(Yc, Zc), PathSchedule(1, 1.5, 300), early_termination=False)
    nu = warm_start_coarse_to_fine(Yc, Zc, pot.nu, Yf, Zf)
    Cf = l2_cost(Yf, Zf)
    t = 100.0
    _, warm = kr_balance(BalancerState(500, nu, t), Cf)
    _, cold = kr_balance(BalancerState(500, np.zeros(1000), t), Cf)
    assert warm.converged and cold.converged
    assert warm.iterations < cold.iterations


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(regularizer_weight=-1)
