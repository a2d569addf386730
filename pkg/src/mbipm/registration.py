"""Rigid point-set registration by alternating transport and SVD updates.

The model matches ``y_i`` to ``Q z_j`` with cost ``||y_i - Q z_j||^2`` and a
small penalty ``eta ||Q - I||_F^2``.  ``Y`` is centered on load; ``Z`` is
not, so translations must be removed by the caller.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .balancing import BalanceConfig, BalancerState, PathSchedule, balance, balanced_matrix, schedule_values
from .core import (
    DomainError, NumericalError, PairwiseCost, ShapeError, SupportError, TransportPlan, row_blocks,
)
from .ipm import _dominant_diagonal, snne_solve, sparse_support
from .support import greedy_sigma


@dataclass
class RigidTransform:
    Q: np.ndarray
    regularizer_weight: float = 0.0
    degenerate: bool = False

    def apply(self, Z) -> np.ndarray:
        """Rows ``Q z_j``."""
        return np.asarray(Z, dtype=float) @ self.Q.T


@dataclass
class RegistrationReport:
    error: float
    iterations: int
    converged: bool
    trace: List[dict] = field(default_factory=list)
    permutation: Optional[List[int]] = None
    max_support: int = 0
    message: str = ""

    def to_dict(self, transform: Optional[RigidTransform] = None) -> dict:
        out = {
            "error": self.error,
            "iterations": self.iterations,
            "converged": self.converged,
            "permutation": self.permutation,
            "max_support": self.max_support,
            "message": self.message,
            "trace": [dict(r) for r in self.trace],
        }
        if transform is not None:
            out["Q"] = transform.Q.tolist()
            out["regularizer_weight"] = transform.regularizer_weight
            out["degenerate"] = transform.degenerate
        return out


@dataclass(frozen=True)
class RegistrationConfig:
    target_error: float = 1e-4
    max_outer: int = 50
    regularizer_weight: Optional[float] = None   # None -> 1e-6 * sum ||y_i||^2
    fix_reflection: bool = False
    method: str = "kr"
    balance: BalanceConfig = BalanceConfig()
    schedule: PathSchedule = PathSchedule(1.0, 1.5, 1e7)

    def __post_init__(self):
        if self.target_error < 0:
            raise DomainError("target_error must be nonnegative")
        if self.regularizer_weight is not None and self.regularizer_weight < 0:
            raise DomainError("regularizer_weight must be nonnegative")


def check_points(Y, Z):
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Y.ndim != 2 or Z.ndim != 2:
        raise ShapeError("point sets must be 2-d arrays")
    if Y.shape != Z.shape:
        raise ShapeError(f"point sets differ in shape: {Y.shape} vs {Z.shape}")
    if Y.shape[0] < 1 or Y.shape[1] not in (2, 3):
        raise ShapeError("need at least one point in 2 or 3 dimensions")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Z))):
        raise DomainError("coordinates must be finite")
    return Y, Z


def center(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    return Y - Y.mean(axis=0)


def load_points(path) -> np.ndarray:
    """Whitespace separated coordinates, one point per line."""
    P = np.loadtxt(path, dtype=float, ndmin=2)
    if P.shape[1] not in (2, 3):
        raise ShapeError(f"{path}: expected 2 or 3 columns, got {P.shape[1]}")
    if not np.all(np.isfinite(P)):
        raise DomainError(f"{path}: non-finite coordinate")
    return P


def rigid_cost(Y, Z, Q) -> PairwiseCost:
    """Lazy cost ``||y_i - Q z_j||^2``."""
    return PairwiseCost(Y, np.asarray(Z, dtype=float) @ np.asarray(Q).T)


def cross_moment(Y, Z, plan: TransportPlan) -> np.ndarray:
    """``sum_ij x_ij y_i z_j^T`` over the plan's entries."""
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if plan.is_dense:
        return Y.T @ plan.values @ Z
    return (Y[plan.rows] * plan.values[:, None]).T @ Z[plan.cols]


def default_regularizer(Y) -> float:
    return 1e-6 * float(np.sum(np.asarray(Y, dtype=float) ** 2))


def svd_update(Y, Z, plan: TransportPlan, regularizer_weight: float = 0.0,
               fix_reflection: bool = False) -> RigidTransform:
    """``Q = U V^T`` from the SVD of ``sum x_ij y_i z_j^T + eta I``."""
    if regularizer_weight < 0:
        raise DomainError("regularizer_weight must be nonnegative")
    H = cross_moment(Y, Z, plan) + regularizer_weight * np.eye(np.shape(Y)[1])
    U, S, Vt = np.linalg.svd(H)
    degenerate = bool(S[-1] <= 1e-12 * max(S[0], 1e-300))
    if fix_reflection and np.linalg.det(U @ Vt) < 0:
        U = U.copy()
        U[:, -1] *= -1
    return RigidTransform(U @ Vt, regularizer_weight, degenerate)


def registration_error(Y, Z, Q, plan: TransportPlan) -> float:
    """``<c(Q), x>``; zero iff ``y_i = Q z_j`` wherever ``x_ij > 0``."""
    return plan.inner(rigid_cost(Y, Z, Q))


def rigid_objective(Y, Z, Q, plan: TransportPlan, regularizer_weight: float = 0.0) -> float:
    Q = np.asarray(Q)
    return registration_error(Y, Z, Q, plan) + regularizer_weight * float(
        np.sum((Q - np.eye(Q.shape[0])) ** 2))


def _assignment_plan(cost, cfg: RegistrationConfig) -> TransportPlan:
    _, plan, rep = snne_solve(cost, cfg.schedule, cfg.method, cfg.balance)
    return plan


def register_rigid(Y, Z, cfg: RegistrationConfig = RegistrationConfig(), solver=None):
    """Alternate a full transport solve with the SVD update, starting from ``Q = I``.

    ``solver(cost) -> TransportPlan`` overrides the default entropic solve.
    """
    Y, Z = check_points(Y, Z)
    Y = center(Y)
    d = Y.shape[1]
    eta = default_regularizer(Y) if cfg.regularizer_weight is None else cfg.regularizer_weight
    solve = solver or (lambda c: _assignment_plan(c, cfg))
    tr = RigidTransform(np.eye(d), eta)
    trace = []
    err = np.inf
    plan = None
    for it in range(1, cfg.max_outer + 1):
        t0 = time.perf_counter()
        plan = solve(rigid_cost(Y, Z, tr.Q))
        t1 = time.perf_counter()
        new = svd_update(Y, Z, plan, eta, cfg.fix_reflection)
        t2 = time.perf_counter()
        err = registration_error(Y, Z, new.Q, plan)
        trace.append({"iter": it, "error": err, "transport_seconds": t1 - t0, "svd_seconds": t2 - t1})
        stalled = np.allclose(new.Q, tr.Q, rtol=0, atol=1e-14)
        tr = new
        if err <= cfg.target_error:
            return tr, plan, RegistrationReport(err, it, True, trace, _perm_of(plan))
        if stalled:
            break
    return tr, plan, RegistrationReport(err, len(trace), False, trace, _perm_of(plan),
                                        message="alternation stalled above the target error")


def _perm_of(plan: TransportPlan) -> Optional[List[int]]:
    J = _dominant_diagonal(plan, 0.25) if plan is not None else None
    return None if J is None else [int(j) for j in J]


def register_rigid_entropic(Y, Z, schedule=None, k: int = 20, xi_max: int = 3,
                            cfg: RegistrationConfig = RegistrationConfig(), sigma: str = "greedy",
                            nu_init=None):
    """Single ``t``-path registration on sparse supports.

    At each ``t``: balance the shifted kernel on the current support (rebuilt
    up to ``xi_max`` times from the prices), then update ``Q`` by SVD.  A
    dominant diagonal is rounded to a permutation and accepted when its own
    SVD fit reaches the target error.
    """
    Y, Z = check_points(Y, Z)
    Y = center(Y)
    n, d = Y.shape
    eta = default_regularizer(Y) if cfg.regularizer_weight is None else cfg.regularizer_weight
    ts = schedule_values(schedule if schedule is not None else cfg.schedule)
    tr = RigidTransform(np.eye(d), eta)
    nu = np.zeros(2 * n) if nu_init is None else np.asarray(nu_init, dtype=float)
    cost = rigid_cost(Y, Z, tr.Q)
    sup = sparse_support(cost, nu, n, k)
    state = BalancerState(n, nu, ts[0], sup)
    trace = []
    peak = len(sup)
    err = np.inf
    plan = None
    for it, t in enumerate(ts, 1):
        t0 = time.perf_counter()
        cost = rigid_cost(Y, Z, tr.Q)
        try:
            for xi in range(xi_max + 1):
                state, brep = balance(BalancerState(n, state.nu, t, sup), cost, cfg.method, cfg.balance)
                plan = balanced_matrix(state, cost)
                if xi == xi_max:
                    break
                sig = greedy_sigma(plan) if sigma == "greedy" else None
                new = sparse_support(cost, state.nu, n, k, sigma=sig)
                if new == sup:
                    break
                sup = new
                peak = max(peak, len(sup))
        except (NumericalError, SupportError) as exc:
            return tr, plan, RegistrationReport(err, it - 1, False, trace, None, peak, str(exc))
        t1 = time.perf_counter()
        tr = svd_update(Y, Z, plan, eta, cfg.fix_reflection)
        err = registration_error(Y, Z, tr.Q, plan)
        t2 = time.perf_counter()
        row = {"iter": it, "t": t, "error": err, "transport_seconds": t1 - t0,
               "svd_seconds": t2 - t1, "support_size": len(sup), "balance_error": brep.error}
        J = _dominant_diagonal(plan, 0.25)
        if J is not None:
            pplan = TransportPlan.from_permutation(J)
            ptr = svd_update(Y, Z, pplan, eta, cfg.fix_reflection)
            perr = registration_error(Y, Z, ptr.Q, pplan)
            row["rounded_error"] = perr
            if perr <= cfg.target_error:
                trace.append(row)
                return ptr, pplan, RegistrationReport(perr, it, True, trace,
                                                      [int(j) for j in J], peak)
        trace.append(row)
        if err <= cfg.target_error:
            return tr, plan, RegistrationReport(err, it, True, trace, _perm_of(plan), peak)
    return tr, plan, RegistrationReport(err, len(trace), False, trace, _perm_of(plan), peak,
                                        "schedule exhausted above the target error")


def warm_start_coarse_to_fine(Y_coarse, Z_coarse, nu_coarse, Y_fine, Z_fine) -> np.ndarray:
    """Fine-level prices from coarse ones by two c-transforms.

    ``nu1(j) = min_k ||y_j - z'_k||^2 - nu'2(k)`` over the coarse targets, then
    ``nu2(k) = min_j ||y_j - z_k||^2 - nu1(j)`` over the fine sources, so the
    result is dual feasible on the fine problem.
    """
    Zc = np.asarray(Z_coarse, dtype=float)
    Yf, Zf = check_points(Y_fine, Z_fine)
    nu_c = np.asarray(nu_coarse, dtype=float)
    m = Zc.shape[0]
    if nu_c.shape != (2 * m,):
        raise ShapeError(f"coarse potential must have length {2 * m}")
    n = Yf.shape[0]
    nu2c = nu_c[m:]
    nu1 = np.empty(n)
    z2 = np.einsum("ij,ij->i", Zc, Zc)
    for r0 in range(0, n, 512):
        Yb = Yf[r0:r0 + 512]
        B = np.einsum("ij,ij->i", Yb, Yb)[:, None] + z2[None, :] - 2 * Yb @ Zc.T
        nu1[r0:r0 + 512] = (np.maximum(B, 0) - nu2c[None, :]).min(axis=1)
    fine = PairwiseCost(Yf, Zf)
    nu2 = np.full(n, np.inf)
    for r0, r1, C in row_blocks(fine):
        nu2 = np.minimum(nu2, (C - nu1[r0:r1, None]).min(axis=0))
    return np.concatenate([nu1, nu2])
