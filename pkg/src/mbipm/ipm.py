"""Interior point solvers for the assignment-form optimal transport problem.

Three drivers share the same reporting:

* ``snne_solve``: entropic (negative-entropy) path, each ``t`` solved by
  matrix balancing of ``exp(-t (c - M.T nu))``.
* ``snne_sparse_solve``: the same path restricted to evolving supports with
  total support.
* ``ipmb_solve``: primal log-barrier method with Newton centering.

Early termination rounds a dominant diagonal to a permutation and verifies
the exact optimality conditions before reporting it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .balancing import (
    BalanceConfig, BalancerState, PathSchedule, balance, balanced_matrix, gauge_fix,
    schedule_values, sk_balance,
)
from .core import (
    DomainError, NumericalError, ShapeError, SupportError, SchurOperator, TransportPlan,
    as_cost, cost_entries, cost_size, row_blocks, solve_schur,
)
from .support import SupportSet, greedy_sigma, k_smallest_select, threshold_select, totalize

TERMINATIONS = ("gap_met", "early_terminated", "budget_exhausted")


@dataclass(frozen=True)
class DualPotential:
    """Prices ``nu = [nu1; nu2]``; slack is ``c - nu1 - nu2``."""

    nu: np.ndarray

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float).ravel()
        if nu.size % 2:
            raise ShapeError("potential length must be even")
        if not np.all(np.isfinite(nu)):
            raise DomainError("potential must be finite")
        object.__setattr__(self, "nu", gauge_fix(nu))

    @property
    def n(self) -> int:
        return self.nu.size // 2

    @property
    def nu1(self) -> np.ndarray:
        return self.nu[: self.n]

    @property
    def nu2(self) -> np.ndarray:
        return self.nu[self.n:]

    def value(self) -> float:
        return float(self.nu.sum())

    def slack(self, cost) -> np.ndarray:
        C = as_cost(cost)
        return C - self.nu1[:, None] - self.nu2[None, :]

    def min_slack(self, cost) -> float:
        out = np.inf
        for r0, r1, C in row_blocks(cost):
            out = min(out, float((C - self.nu1[r0:r1, None] - self.nu2[None, :]).min()))
        return out


@dataclass(frozen=True)
class CenteringConfig:
    gamma_lo: float = 0.5
    gamma_hi: float = 2.0
    decrement_tol: float = 1e-13
    max_iter: int = 100
    band_exit: bool = False
    armijo: float = 1e-4
    shrink: float = 0.5
    boundary: float = 0.99

    def __post_init__(self):
        if not 0 < self.gamma_lo < 1 < self.gamma_hi:
            raise DomainError("need 0 < gamma_lo < 1 < gamma_hi")
        if self.decrement_tol <= 0:
            raise DomainError("decrement_tol must be positive")


@dataclass
class SolveReport:
    method: str
    duality_gap: float
    relative_gap: float
    t_achieved: float
    termination: str
    trace: List[dict] = field(default_factory=list)
    permutation: Optional[List[int]] = None
    support_size: int = 0
    objective: float = float("nan")
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "duality_gap": self.duality_gap,
            "relative_gap": self.relative_gap,
            "t_achieved": self.t_achieved,
            "termination": self.termination,
            "permutation": self.permutation,
            "support_size": self.support_size,
            "objective": self.objective,
            "message": self.message,
            "trace": [dict(r) for r in self.trace],
        }


def _plan_of(x, n=None) -> TransportPlan:
    if isinstance(x, TransportPlan):
        return x
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        return TransportPlan.from_vector(X)
    return TransportPlan(X.shape[0], X)


def _nu_of(nu) -> np.ndarray:
    return nu.nu if isinstance(nu, DualPotential) else np.asarray(nu, dtype=float)


def duality_diagnostics(cost, x, nu, t: Optional[float] = None,
                        support_size: Optional[int] = None) -> dict:
    """Gap, marginal infeasibility, dual sup-norm and the entropic gap certificate."""
    plan = _plan_of(x)
    nu = _nu_of(nu)
    gap = plan.inner(cost) - float(nu.sum())
    eps = float(np.abs(plan.marginals() - 1).sum())
    delta = float(np.abs(nu).max()) if nu.size else 0.0
    size = plan.n ** 2 if support_size is None else support_size
    cert = eps * delta + size / (math.e * t) if t else float("nan")
    return {"gap": gap, "infeasibility": eps, "nu_inf_norm": delta,
            "certificate": cert, "support_size": size}


def c_transform_potential(cost) -> np.ndarray:
    """Dual-feasible start: ``nu1`` row minima, ``nu2`` column minima of ``c - nu1``.

    Every slack is nonnegative and each row and column has a zero, so the
    first kernel has entries in (0, 1] instead of ``exp(-t c)``, which for
    large costs is far from balanced.
    """
    n = cost_size(cost)
    nu1 = np.empty(n)
    for r0, r1, C in row_blocks(cost):
        nu1[r0:r1] = C.min(axis=1)
    nu2 = np.full(n, np.inf)
    for r0, r1, C in row_blocks(cost):
        nu2 = np.minimum(nu2, (C - nu1[r0:r1, None]).min(axis=0))
    return np.concatenate([nu1, nu2])


def _relative(gap: float, reference_value, nu) -> float:
    base = reference_value if reference_value is not None else float(np.sum(nu))
    return gap / abs(base) if base else gap


def try_early_termination(x, nu_t, cost, gamma_lo: float = 0.5, gamma_hi: float = 2.0,
                          repair: bool = False):
    """Round a dominant diagonal of the plan to an optimal permutation.

    Returns ``(perm, DualPotential)`` when every row has an entry dominating the
    rest of the row by ``gamma_hi / gamma_lo``, those entries form a
    permutation, and the constructed prices are dual feasible on the full
    cost.  Returns None otherwise.

    Prices from a support-restricted solve need not be feasible off the
    support.  With ``repair=True`` the column prices are then lowered by
    shortest-path relaxation until feasible; this succeeds exactly when the
    permutation is optimal.
    """
    plan = _plan_of(x)
    n = plan.n
    nu_t = _nu_of(nu_t)
    J = _dominant_diagonal(plan, gamma_lo / gamma_hi)
    if J is None:
        return None
    cJ = cost_entries(cost, np.arange(n), J)
    nu2 = nu_t[n:].copy()
    for _ in range(n + 1 if repair else 1):
        nu1 = cJ - nu2[J]
        scale = max(1.0, float(np.abs(nu1).max()), float(np.abs(nu2).max()))
        low = np.full(n, np.inf)
        for r0, r1, C in row_blocks(cost):
            low = np.minimum(low, (C - nu1[r0:r1, None]).min(axis=0))
        if np.all(low - nu2 >= -1e-12 * scale):
            return J.astype(np.intp), DualPotential(np.concatenate([nu1, nu2]))
        if not repair:
            return None
        nu2 = np.minimum(nu2, low)
    return None


def _dominant_diagonal(plan: TransportPlan, ratio: float):
    n = plan.n
    if plan.is_dense:
        X = plan.values
        J = np.argmax(X, axis=1)
        top = X[np.arange(n), J]
        Xc = X.copy()
        Xc[np.arange(n), J] = -np.inf
        second = Xc.max(axis=1) if n > 1 else np.zeros(n)
    else:
        r, c, v = plan.rows, plan.cols, plan.values
        order = np.lexsort((-v, r))
        r, c, v = r[order], c[order], v[order]
        first = np.searchsorted(r, np.arange(n))
        counts = np.bincount(r, minlength=n)
        if np.any(counts == 0):
            return None
        J = c[first]
        top = v[first]
        # an absent entry counts as zero
        second = np.where(counts > 1, v[np.minimum(first + 1, v.size - 1)], 0.0)
    if np.any(top <= 0) or np.any(second > ratio * top):
        return None
    if np.unique(J).size != n:
        return None
    return J


def _permutation_report_fields(cost, perm, pot):
    plan = TransportPlan.from_permutation(perm)
    gap = plan.inner(cost) - pot.value()
    return plan, gap


class _Run:
    def __init__(self, method, cost, reference_value, reltol):
        self.method = method
        self.cost = cost
        self.reference_value = reference_value
        self.reltol = reltol
        self.trace: List[dict] = []
        self.t0 = time.perf_counter()

    def record(self, t, plan, nu, support_size, **extra):
        d = duality_diagnostics(self.cost, plan, nu, t, support_size)
        rel = _relative(d["gap"], self.reference_value, nu)
        row = {"t": t, "gap": d["gap"], "relative_gap": rel, "infeasibility": d["infeasibility"],
               "nu_inf_norm": d["nu_inf_norm"], "support_size": support_size,
               "seconds": time.perf_counter() - self.t0, "certificate": d["certificate"]}
        row.update(extra)
        self.trace.append(row)
        return row

    def gap_met(self, row) -> bool:
        return self.reltol is not None and abs(row["relative_gap"]) <= self.reltol

    def report(self, termination, t, plan, nu, support_size, perm=None, message=""):
        gap = plan.inner(self.cost) - float(np.sum(nu))
        return SolveReport(
            method=self.method, duality_gap=gap,
            relative_gap=_relative(gap, self.reference_value, nu), t_achieved=t,
            termination=termination, trace=self.trace,
            permutation=None if perm is None else [int(j) for j in perm],
            support_size=support_size, objective=plan.inner(self.cost), message=message,
        )


def _entropic_path(run: _Run, cost, ts, state: BalancerState, method, cfg,
                   early_termination, et_threshold, gamma_lo, gamma_hi, repair=False):
    """Follow the schedule; returns (state, plan, outcome, extra)."""
    n = state.n
    size = n * n if state.support is None else len(state.support)
    plan = balanced_matrix(state, cost) if ts else None
    for t in ts:
        try:
            state, brep = balance(state.at(t), cost, method, cfg)
        except (NumericalError, SupportError) as exc:
            return state, plan, "failed", str(exc)
        plan = balanced_matrix(state, cost)
        row = run.record(t, plan, state.nu, size, balance_error=brep.error,
                         balance_iterations=brep.iterations)
        if not brep.converged:
            return state, plan, "failed", f"balancing did not converge at t={t:g}: {brep.message}"
        if early_termination and t >= et_threshold:
            hit = try_early_termination(plan, state.nu, cost, gamma_lo, gamma_hi, repair)
            if hit is not None:
                return state, plan, "early_terminated", hit
        if run.gap_met(row):
            return state, plan, "gap_met", None
    return state, plan, "budget_exhausted", None


def _finish_entropic(run, outcome, extra, state, plan, size):
    t = state.t
    if outcome == "early_terminated":
        perm, pot = extra
        pplan = TransportPlan.from_permutation(perm)
        return pot, pplan, run.report("early_terminated", t, pplan, pot.nu, size, perm)
    msg = extra if outcome == "failed" else ""
    term = "budget_exhausted" if outcome == "failed" else outcome
    return DualPotential(state.nu), plan, run.report(term, t, plan, state.nu, size, message=msg)


def snne_solve(cost, schedule=PathSchedule(), method: str = "kr",
               cfg: BalanceConfig = BalanceConfig(), reference_value: Optional[float] = None,
               reltol: Optional[float] = None, early_termination: bool = True,
               et_threshold: float = 100.0, nu_init=None, gamma_lo: float = 0.5,
               gamma_hi: float = 2.0):
    """Entropic interior point path on the dense kernel.

    Returns ``(DualPotential, TransportPlan, SolveReport)``.
    """
    n = cost_size(cost)
    ts = schedule_values(schedule)
    nu0 = c_transform_potential(cost) if nu_init is None else _nu_of(nu_init)
    run = _Run(f"snne-{method}", cost, reference_value, reltol)
    state = BalancerState(n, nu0, ts[0])
    state, plan, outcome, extra = _entropic_path(
        run, cost, ts, state, method, cfg, early_termination, et_threshold, gamma_lo, gamma_hi)
    return _finish_entropic(run, outcome, extra, state, plan, n * n)


def sparse_support(cost, nu, n: int, k: Optional[int] = None, epsilon: Optional[float] = None,
                   sigma=None) -> SupportSet:
    """Total-support set around the small slacks of ``nu``.

    With ``k`` the per-row/column count is lowered, if needed, until the set
    has at most ``(2k+1) n`` entries; ``k // 2`` always satisfies the bound.
    """
    if epsilon is not None:
        return totalize(threshold_select(cost, nu, epsilon), sigma)
    if k is None:
        raise DomainError("give either k or epsilon")
    bound = (2 * k + 1) * n
    kk = min(k, n)
    while True:
        sup = totalize(k_smallest_select(cost, nu, kk), sigma)
        if len(sup) <= bound or kk <= max(1, k // 2):
            return sup
        kk -= 1


def snne_sparse_solve(cost, schedule=PathSchedule(), k: Optional[int] = 20,
                      epsilon: Optional[float] = None, xi_max: int = 3, method: str = "kr",
                      cfg: BalanceConfig = BalanceConfig(), sigma: str = "greedy",
                      reference_value: Optional[float] = None, reltol: Optional[float] = None,
                      early_termination: bool = True, et_threshold: float = 100.0,
                      nu_init=None, gamma_lo: float = 0.5, gamma_hi: float = 2.0):
    """Entropic path restricted to supports rebuilt from the current prices.

    For each ``xi`` the whole schedule is followed on ``Sigma_xi`` (warm
    started from the previous prices); the next support collects the small
    slacks and is totalized.  Stops early at a support fixed point.
    """
    if sigma not in ("identity", "greedy"):
        raise DomainError("sigma must be 'identity' or 'greedy'")
    if epsilon is None and (k is None or k < 1):
        raise DomainError("k must be positive")
    n = cost_size(cost)
    ts = schedule_values(schedule)
    nu = c_transform_potential(cost) if nu_init is None else _nu_of(nu_init)
    run = _Run(f"snne-sparse-{method}", cost, reference_value, reltol)
    sup = sparse_support(cost, nu, n, k, epsilon)
    state = BalancerState(n, nu, ts[0], sup)
    outcome, extra, plan = "budget_exhausted", None, None
    for xi in range(xi_max + 1):
        state = BalancerState(n, state.nu, ts[0], sup)
        state, plan, outcome, extra = _entropic_path(
            run, cost, ts, state, method, cfg, early_termination, et_threshold, gamma_lo, gamma_hi,
            repair=True)
        for row in run.trace:
            row.setdefault("xi", xi)
        if outcome in ("early_terminated", "failed"):
            break
        sig = greedy_sigma(plan) if sigma == "greedy" else None
        new = sparse_support(cost, state.nu, n, k, epsilon, sig)
        if new == sup:
            break
        sup = new
    return _finish_entropic(run, outcome, extra, state, plan, len(state.support))


# -- log-barrier method ---------------------------------------------------

def barrier_objective(cost, x, t: float) -> float:
    """``<c, x> - t^-1 sum(log x)`` (inf outside the positive orthant)."""
    C = as_cost(cost)
    X = np.asarray(x, dtype=float).reshape(C.shape)
    if np.any(X <= 0):
        return float("inf")
    return float((C * X).sum() - np.log(X).sum() / t)


def least_squares_multiplier(cost, x, t: float, tol: float = 1e-15, refine: int = 4):
    """``nu = (M X^2 M.T)^+ M X^2 (c - 1/(t x))`` via projected CG.

    Returns ``(nu, g, residual)`` with ``g = c - 1/(t x)`` and the residual of the
    normal equations (so ``||M d|| = t * residual``).
    """
    C = as_cost(cost)
    X = np.asarray(x, dtype=float).reshape(C.shape)
    W = X * X
    G = C - 1.0 / (t * X)
    WG = W * G
    rhs = np.concatenate([WG.sum(axis=1), WG.sum(axis=0)])
    op = SchurOperator(W)
    sol = solve_schur(op, rhs, tol, refine=refine)
    resid = float(np.linalg.norm(rhs - op(sol.x)))
    return sol.x, G, resid


@dataclass
class CenterResult:
    x: np.ndarray
    nu: np.ndarray
    decrement: float
    iterations: int
    converged: bool
    md_norm: float = 0.0

    def __iter__(self):
        return iter((self.x, self.nu))


def newton_direction_barrier(cost, x, t: float):
    """Newton step of the barrier problem, its squared decrement and ``nu``."""
    C = as_cost(cost)
    X = np.asarray(x, dtype=float).reshape(C.shape)
    nu, G, _ = least_squares_multiplier(C, X, t)
    n = C.shape[0]
    R = G - nu[:n, None] - nu[None, n:]
    D = -t * X * X * R
    dec = float(t * np.sum((X * R) ** 2))
    return D, dec, nu


def newton_center(cost, t: float, x_start, cfg: CenteringConfig = CenteringConfig()) -> CenterResult:
    """Minimize ``<c,x> - t^-1 sum(log x)`` over the transport polytope from ``x_start``.

    The multiplier is recomputed by least squares at every iterate; exits when
    the squared decrement drops below ``decrement_tol`` (or, when enabled, when
    the complementarity band holds).
    """
    C = as_cost(cost)
    n = C.shape[0]
    X = np.array(x_start, dtype=float).reshape(C.shape)
    if np.any(X <= 0):
        raise DomainError("start must be strictly positive")
    it = 0
    md = 0.0
    while True:
        D, dec, nu = newton_direction_barrier(C, X, t)
        md = float(np.abs(np.concatenate([D.sum(axis=1), D.sum(axis=0)])).max())
        if dec <= cfg.decrement_tol:
            return CenterResult(X, nu, dec, it, True, md)
        if cfg.band_exit:
            S = t * X * (C - nu[:n, None] - nu[None, n:])
            if S.min() >= cfg.gamma_lo and S.max() <= cfg.gamma_hi:
                return CenterResult(X, nu, dec, it, True, md)
        if it >= cfg.max_iter:
            return CenterResult(X, nu, dec, it, False, md)
        neg = D < 0
        a = 1.0
        if np.any(neg):
            a = min(1.0, cfg.boundary * float(np.min(-X[neg] / D[neg])))
        f0 = barrier_objective(C, X, t)
        while True:
            Xn = X + a * D
            if np.all(Xn > 0) and barrier_objective(C, Xn, t) <= f0 - cfg.armijo * a * dec:
                break
            a *= cfg.shrink
            if a < 1e-16:
                # no progress possible at this precision
                return CenterResult(X, nu, dec, it, dec <= 1e3 * cfg.decrement_tol, md)
        X = Xn
        it += 1


def _rebalance(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    st, rep = sk_balance(BalancerState.zero(n, 1.0), -np.log(X), BalanceConfig(tol=1e-13, max_iter=10000))
    return balanced_matrix(st, -np.log(X)).dense()


def ipmb_solve(cost, schedule=PathSchedule(), cfg: CenteringConfig = CenteringConfig(),
               reference_value: Optional[float] = None, reltol: Optional[float] = None,
               gap_tol: Optional[float] = None, early_termination: bool = True,
               et_threshold: float = 100.0, x0=None, balance_tol: Optional[float] = None,
               on_center: Optional[Callable] = None):
    """Log-barrier interior point method with matrix-free Newton centering.

    Quits when ``n^2 / t < gap_tol``, when the relative gap reaches ``reltol``,
    or when early termination certifies a permutation.
    """
    C = as_cost(cost)
    n = C.shape[0]
    ts = schedule_values(schedule)
    X = np.full((n, n), 1.0 / n) if x0 is None else np.array(x0, dtype=float).reshape(n, n)
    eps_mb = balance_tol if balance_tol is not None else 1e-5 * math.sqrt(n)
    run = _Run("ipmb", C, reference_value, reltol)
    nu = np.zeros(2 * n)
    t = ts[0]
    for t in ts:
        res = newton_center(C, t, X, cfg)
        X, nu = res.x, res.nu
        infeas = float(np.abs(np.concatenate([X.sum(axis=1), X.sum(axis=0)]) - 1).sum())
        if infeas > eps_mb:
            X = _rebalance(X)
        plan = TransportPlan(n, X)
        row = run.record(t, plan, nu, n * n, decrement=res.decrement,
                         newton_iterations=res.iterations, central_gap=n * n / t)
        if on_center is not None:
            on_center(t, X, nu, res)
        if not res.converged:
            return DualPotential(nu), plan, run.report(
                "budget_exhausted", t, plan, nu, n * n,
                message=f"centering did not converge at t={t:g}")
        if early_termination and t >= et_threshold:
            hit = try_early_termination(plan, nu, C, cfg.gamma_lo, cfg.gamma_hi)
            if hit is not None:
                perm, pot = hit
                pplan = TransportPlan.from_permutation(perm)
                return pot, pplan, run.report("early_terminated", t, pplan, pot.nu, n * n, perm)
        if (gap_tol is not None and n * n / t < gap_tol) or run.gap_met(row):
            return DualPotential(nu), plan, run.report("gap_met", t, plan, nu, n * n)
    plan = TransportPlan(n, X)
    return DualPotential(nu), plan, run.report("budget_exhausted", t, plan, nu, n * n)
