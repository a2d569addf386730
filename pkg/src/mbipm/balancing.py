"""Matrix balancing in the log domain: Sinkhorn-Knopp, Knight-Ruiz, and two
damped Newton schemes (negative entropy and logarithmic barrier).

Every solver balances the *shifted* kernel ``exp(-t (c - nu1 - nu2))`` of a
:class:`BalancerState`, starting from zero log-scalings ``w``.  On exit the
state's potential becomes ``nu + w / t``, so a previous solution acts as a
warm start through the shift (translation) rather than through large
scaling vectors.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .core import (
    DomainError, NumericalError, ShapeError, SupportError, SchurOperator, TransportPlan,
    as_matrix, cost_entries, cost_size, solve_schur,
)
from .support import SupportSet, has_support, has_total_support

METHODS = ("sk", "kr", "ne", "lb")


@dataclass(frozen=True)
class PathSchedule:
    """Geometric sequence ``t0 * eta**k`` up to ``t_max``."""

    t0: float = 1.0
    eta: float = 1.5
    t_max: float = 1e6

    def __post_init__(self):
        if self.t0 <= 0 or self.t_max <= 0:
            raise DomainError("t0 and t_max must be positive")
        if self.eta <= 1:
            raise DomainError("eta must exceed 1")
        if self.t0 > self.t_max:
            raise DomainError("t0 must not exceed t_max")

    def values(self) -> List[float]:
        out = []
        k = 0
        while True:
            t = self.t0 * self.eta ** k
            if t > self.t_max * (1 + 1e-12):
                return out
            out.append(t)
            k += 1


def schedule_values(schedule) -> List[float]:
    ts = schedule.values() if isinstance(schedule, PathSchedule) else [float(t) for t in schedule]
    if not ts:
        raise DomainError("empty schedule")
    if any(t <= 0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
        raise DomainError("schedule must be positive and strictly increasing")
    return ts


@dataclass(frozen=True)
class BalancerState:
    """Dual potential ``nu`` at inverse temperature ``t``; scalings are ``exp(t nu)``."""

    n: int
    nu: np.ndarray
    t: float = 1.0
    support: Optional[SupportSet] = None

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float)
        if nu.shape != (2 * self.n,):
            raise ShapeError(f"potential must have length {2 * self.n}")
        if not np.all(np.isfinite(nu)):
            raise DomainError("potential must be finite")
        if self.t <= 0:
            raise DomainError("t must be positive")
        object.__setattr__(self, "nu", gauge_fix(nu))

    @classmethod
    def zero(cls, n: int, t: float = 1.0, support: Optional[SupportSet] = None) -> "BalancerState":
        return cls(n, np.zeros(2 * n), t, support)

    def at(self, t: float) -> "BalancerState":
        return replace(self, t=float(t))


def gauge_fix(nu: np.ndarray) -> np.ndarray:
    """Shift along [1; -1] so both halves have the same sum."""
    n = nu.size // 2
    s = (nu[:n].sum() - nu[n:].sum()) / (2 * n) if n else 0.0
    out = nu.copy()
    out[:n] -= s
    out[n:] += s
    return out


@dataclass(frozen=True)
class BalanceConfig:
    tol: Optional[float] = None        # None -> 1e-5 * sqrt(n)
    max_iter: int = 500
    shrink: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 60
    cg_max_iter: Optional[int] = None
    presweep: bool = True
    forcing: float = 1e-8               # cap on the relative inner CG tolerance
    stall_iter: int = 10                # Newton steps without progress before giving up

    def __post_init__(self):
        if self.tol is not None and self.tol <= 0:
            raise DomainError("tol must be positive")
        if not 0 < self.shrink < 1:
            raise DomainError("shrink factor must lie in (0, 1)")
        if self.max_iter < 0:
            raise DomainError("max_iter must be nonnegative")

    def tolerance(self, n: int) -> float:
        return self.tol if self.tol is not None else 1e-5 * np.sqrt(n)


@dataclass
class BalanceReport:
    method: str
    error: float
    iterations: int
    converged: bool
    geometric_mean_norm: float
    log10_geometric_mean_norm: float
    objective: float = float("nan")
    newton_decrements: List[float] = field(default_factory=list)
    trace: List[dict] = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "error": self.error,
            "iterations": self.iterations,
            "converged": self.converged,
            "geometric_mean_norm": self.geometric_mean_norm,
            "log10_geometric_mean_norm": self.log10_geometric_mean_norm,
            "objective": self.objective,
            "newton_decrements": list(self.newton_decrements),
            "message": self.message,
        }


class _Kernel:
    """``L = -t (c - nu1 - nu2)`` on a dense grid or on the entries of a support."""

    def __init__(self, cost, t: float, nu: np.ndarray, support: Optional[SupportSet] = None):
        n = cost_size(cost)
        self.n = n
        nu1, nu2 = nu[:n], nu[n:]
        if support is None:
            C = as_matrix(cost)
            self.rows = self.cols = None
            self.L = -t * (C - nu1[:, None] - nu2[None, :])
        else:
            if support.n != n:
                raise ShapeError("support and cost sizes differ")
            self.rows, self.cols = support.rows, support.cols
            c = cost_entries(cost, self.rows, self.cols)
            self.L = -t * (c - nu1[self.rows] - nu2[self.cols])
            # rows are sorted; columns need their own grouping for log-sum-exp
            self._row_starts = np.searchsorted(self.rows, np.arange(n))
            self._col_order = np.argsort(self.cols, kind="stable")
            self._col_starts = np.searchsorted(self.cols[self._col_order], np.arange(n))

    @property
    def sparse(self) -> bool:
        return self.rows is not None

    def exponent(self, w: np.ndarray) -> np.ndarray:
        n = self.n
        if self.sparse:
            return self.L + w[:n][self.rows] + w[n:][self.cols]
        return self.L + w[:n, None] + w[None, n:]

    def values(self, w: np.ndarray) -> np.ndarray:
        with np.errstate(over="raise", under="ignore"):
            try:
                return np.exp(self.exponent(w))
            except FloatingPointError as exc:
                raise NumericalError("overflow in balanced matrix") from exc

    def sums(self, vals):
        if self.sparse:
            r = np.bincount(self.rows, weights=vals, minlength=self.n)
            c = np.bincount(self.cols, weights=vals, minlength=self.n)
            return r, c
        return vals.sum(axis=1), vals.sum(axis=0)

    def objective(self, w: np.ndarray) -> float:
        """``sum(P) - sum(w)``, evaluated without overflow (inf when too large)."""
        lse = logsumexp(self.exponent(w))
        if lse > 700:
            return float("inf")
        return float(np.exp(lse) - w.sum())

    def log_row_sums(self, w2: np.ndarray) -> np.ndarray:
        n = self.n
        if self.sparse:
            E = self.L + w2[self.cols]
            return _group_lse(E, self._row_starts, n)
        return logsumexp(self.L + w2[None, :], axis=1)

    def log_col_sums(self, w1: np.ndarray) -> np.ndarray:
        n = self.n
        if self.sparse:
            E = (self.L + w1[self.rows])[self._col_order]
            return _group_lse(E, self._col_starts, n)
        return logsumexp(self.L + w1[:, None], axis=0)

    def schur(self, vals) -> SchurOperator:
        if self.sparse:
            return SchurOperator(vals, self.rows, self.cols, n=self.n)
        return SchurOperator(vals)

    def plan(self, vals) -> TransportPlan:
        if self.sparse:
            return TransportPlan(self.n, vals, self.rows, self.cols)
        return TransportPlan(self.n, vals)


def _group_lse(E: np.ndarray, starts: np.ndarray, n: int) -> np.ndarray:
    out = np.full(n, -np.inf)
    if E.size == 0:
        return out
    nonempty = np.diff(np.r_[starts, E.size]) > 0
    s = starts[nonempty]
    m = np.maximum.reduceat(E, s)
    mm = np.repeat(m, np.diff(np.r_[s, E.size]))
    tot = np.add.reduceat(np.exp(E - mm), s)
    out[nonempty] = m + np.log(tot)
    return out


def balance_error(plan) -> float:
    """``||A 1 - 1||_1 + ||A.T 1 - 1||_1``."""
    if isinstance(plan, TransportPlan):
        r, c = plan.row_marginals, plan.col_marginals
    else:
        A = np.asarray(plan, dtype=float)
        r, c = A.sum(axis=1), A.sum(axis=0)
    return float(np.abs(r - 1).sum() + np.abs(c - 1).sum())


def balanced_matrix(state: BalancerState, cost) -> TransportPlan:
    """``exp(-t (c - nu1 - nu2))``, restricted to the state's support."""
    K = _Kernel(cost, state.t, state.nu, state.support)
    return K.plan(K.values(np.zeros(2 * state.n)))


def log_norm(v_log: np.ndarray) -> float:
    """``log ||exp(v_log)||_2`` without overflow."""
    return 0.5 * float(logsumexp(2.0 * v_log))


def geometric_mean_norm(state: BalancerState) -> float:
    """``||zeta1||^(1/2) ||zeta2||^(1/2)`` with ``zeta = exp(t nu)``."""
    return float(np.exp(_log_gm(state)))


def _log_gm(state: BalancerState) -> float:
    n = state.n
    z = state.t * state.nu
    return 0.5 * (log_norm(z[:n]) + log_norm(z[n:]))


def _check_support(K: _Kernel, method: str, support: Optional[SupportSet]) -> None:
    if not K.sparse or support.certified_total:
        return
    sup = support
    if not has_support(sup):
        raise SupportError("masked matrix has no positive diagonal")
    if method == "kr" and not has_total_support(sup):
        warnings.warn("masked matrix lacks total support; KR may diverge", RuntimeWarning)


def _sk_sweep(K: _Kernel, w: np.ndarray) -> np.ndarray:
    n = K.n
    w = w.copy()
    w[n:] = -K.log_col_sums(w[:n])
    w[:n] = -K.log_row_sums(w[n:])
    if not np.all(np.isfinite(w)):
        raise SupportError("a row or column of the masked matrix vanished")
    return w


def _newton_system(K: _Kernel, w: np.ndarray, cfg: BalanceConfig):
    vals = K.values(w)
    r, c = K.sums(vals)
    g = np.concatenate([r - 1, c - 1])
    return vals, g


def _solve_direction(K: _Kernel, vals, g, cfg: BalanceConfig):
    H = K.schur(vals)
    tol = max(min(cfg.forcing, float(np.linalg.norm(g))), 1e-14)
    max_iter = cfg.cg_max_iter or max(200, 2 * K.n)
    sol = solve_schur(H, g, tol, max_iter, fallback=False)
    return sol.x


def _flat(f0: float) -> float:
    # below this decrement an Armijo test cannot see the decrease in f
    return 1e-12 * max(1.0, abs(f0))


def _ne_update(K, w, vals, g, cfg, alpha=None):
    """Damped Newton on f(w) = sum(P) - sum(w); returns (w, decrement, ok)."""
    y = _solve_direction(K, vals, g, cfg)
    dec = float(g @ y)
    if not dec > 0:
        return w, dec, False
    d = -y
    f0 = K.objective(w)
    if alpha is not None:
        return w + alpha * d, dec, True
    if dec <= _flat(f0):
        return w + d, dec, True
    a = 1.0
    for _ in range(cfg.max_backtracks):
        wn = w + a * d
        if K.objective(wn) <= f0 - cfg.armijo * a * dec:
            return wn, dec, True
        a *= cfg.shrink
    return w, dec, False


def _lb_direction(K, vals, g, cfg):
    # (C_k + A_k) is the same operator as the NE Hessian in scaled variables
    return _solve_direction(K, vals, g, cfg)


def _lb_update(K, w, vals, g, cfg, alpha=None):
    """Modified Newton step zeta <- zeta * (1 - alpha y), with Armijo backtracking."""
    y = _lb_direction(K, vals, g, cfg)
    dec = float(g @ y)
    if not dec > 0:
        return w, dec, False
    if alpha is not None:
        step = 1 - alpha * y
        if np.any(step <= 0):
            raise NumericalError("step leaves the positive orthant")
        return w + np.log(step), dec, True
    f0 = K.objective(w)
    a = 1.0
    ymax = float(y.max())
    if ymax > 0:
        a = min(1.0, 0.995 / ymax)
    if dec <= _flat(f0):
        return w + np.log1p(-a * y), dec, True
    for _ in range(cfg.max_backtracks):
        wn = w + np.log1p(-a * y)
        if K.objective(wn) <= f0 - cfg.armijo * a * dec:
            return wn, dec, True
        a *= cfg.shrink
    return w, dec, False


def _kr_update(K, w, vals, g, cfg, alpha=None):
    """Knight-Ruiz: the modified Newton step with unit length.

    The step is cut back only when a unit step would leave the positive orthant.
    """
    y = _lb_direction(K, vals, g, cfg)
    dec = float(g @ y)
    if not dec > 0:
        return w, dec, False
    a = 1.0 if alpha is None else alpha
    ymax = float(y.max())
    if a * ymax >= 0.9:
        a = 0.9 / ymax
    return w + np.log1p(-a * y), dec, True


_UPDATES = {"ne": _ne_update, "lb": _lb_update, "kr": _kr_update}


def _finish(state, K, w, method, err, it, conv, decs, trace, msg, obj) -> tuple:
    nu = state.nu + gauge_fix(w) / state.t
    new = replace(state, nu=nu)
    lg = _log_gm(new)
    rep = BalanceReport(
        method=method, error=float(err), iterations=it, converged=conv,
        geometric_mean_norm=float(np.exp(lg)) if lg < 709 else float("inf"),
        log10_geometric_mean_norm=lg / np.log(10), objective=obj,
        newton_decrements=decs, trace=trace, message=msg,
    )
    return new, rep


def _run(method: str, state: BalancerState, cost, cfg: BalanceConfig) -> tuple:
    if method not in METHODS:
        raise DomainError(f"unknown balancing method {method!r}")
    K = _Kernel(cost, state.t, state.nu, state.support)
    _check_support(K, method, state.support)
    n = K.n
    tol = cfg.tolerance(n)
    w = np.zeros(2 * n)
    t0 = time.perf_counter()
    trace, decs = [], []
    it = 0
    msg = ""

    def current():
        vals = K.values(w)
        r, c = K.sums(vals)
        return vals, np.concatenate([r - 1, c - 1])

    if method == "sk":
        vals, g = current()
        err = float(np.abs(g).sum())
        trace.append(_row(0, err, K.objective(w), float("nan"), t0))
        while err > tol and it < cfg.max_iter:
            w = gauge_fix(_sk_sweep(K, w))
            it += 1
            vals, g = current()
            err = float(np.abs(g).sum())
            trace.append(_row(it, err, K.objective(w), float("nan"), t0))
        conv = err <= tol
        if not conv:
            msg = "iteration budget exhausted"
        return _finish(state, K, w, method, err, it, conv, decs, trace, msg, K.objective(w))

    update = _UPDATES[method]
    vals, g = current()
    err = float(np.abs(g).sum())
    if cfg.presweep and err > tol:
        w = gauge_fix(_sk_sweep(K, w))
        vals, g = current()
        err = float(np.abs(g).sum())
    trace.append(_row(0, err, K.objective(w), float("nan"), t0))
    best, since_best = err, 0
    f_prev = K.objective(w)
    while err > tol and it < cfg.max_iter:
        w_new, dec, ok = update(K, w, vals, g, cfg)
        if not ok:
            msg = "no descent along the Newton direction" if not dec > 0 else "line search failed"
            break
        w = gauge_fix(w_new)
        it += 1
        decs.append(dec)
        vals, g = current()
        err = float(np.abs(g).sum())
        f_new = K.objective(w)
        trace.append(_row(it, err, f_new, dec, t0))
        # a decrement below the rounding level of f with no error reduction means we are done
        progress = dec > _flat(f_prev)
        f_prev = f_new
        if err < best * (1 - 1e-3) or progress:
            best, since_best = min(best, err), 0
        else:
            since_best += 1
            if since_best >= cfg.stall_iter:
                msg = "stalled at rounding level"
                break
    conv = err <= tol
    if not conv and not msg:
        msg = "iteration budget exhausted"
    return _finish(state, K, w, method, err, it, conv, decs, trace, msg, K.objective(w))


def _row(it, err, obj, dec, t0) -> dict:
    return {"iter": it, "error": err, "objective": obj, "newton_decrement": dec,
            "wall_seconds": time.perf_counter() - t0}


def balance(state: BalancerState, cost, method: str = "kr", cfg: BalanceConfig = BalanceConfig()):
    """Balance the state's shifted kernel with the named method."""
    return _run(method, state, cost, cfg)


def sk_balance(state, cost, cfg=BalanceConfig()):
    return _run("sk", state, cost, cfg)


def kr_balance(state, cost, cfg=BalanceConfig()):
    return _run("kr", state, cost, cfg)


def ne_balance(state, cost, cfg=BalanceConfig()):
    return _run("ne", state, cost, cfg)


def lb_balance(state, cost, cfg=BalanceConfig()):
    return _run("lb", state, cost, cfg)


def _step(method, state, cost, cfg, alpha=None) -> BalancerState:
    K = _Kernel(cost, state.t, state.nu, state.support)
    w = np.zeros(2 * state.n)
    if method == "sk":
        w = _sk_sweep(K, w)
    else:
        vals, g = _newton_system(K, w, cfg)
        if not np.any(g):
            return state
        w, _, ok = _UPDATES[method](K, w, vals, g, cfg, alpha)
        if not ok:
            raise NumericalError(f"{method} step failed to descend")
    return replace(state, nu=state.nu + w / state.t)


def sk_step(state, cost, cfg=BalanceConfig()) -> BalancerState:
    """One full Sinkhorn sweep (columns, then rows)."""
    return _step("sk", state, cost, cfg)


def ne_step(state, cost, cfg=BalanceConfig(), alpha=None) -> BalancerState:
    return _step("ne", state, cost, cfg, alpha)


def lb_step(state, cost, cfg=BalanceConfig(), alpha=None) -> BalancerState:
    return _step("lb", state, cost, cfg, alpha)


def kr_step(state, cost, cfg=BalanceConfig()) -> BalancerState:
    return _step("kr", state, cost, cfg)


def objective_f(state: BalancerState, cost) -> float:
    """The convex balancing objective ``sum(exp(-t(c - M.T nu))) - t <1, nu>``."""
    K = _Kernel(cost, state.t, np.zeros(2 * state.n), state.support)
    return K.objective(state.t * state.nu)


def newton_direction(state: BalancerState, cost, cfg: BalanceConfig = BalanceConfig()):
    """Gradient, Hessian operator and pseudo-inverse Newton step in log-scalings."""
    K = _Kernel(cost, state.t, state.nu, state.support)
    w = np.zeros(2 * state.n)
    vals, g = _newton_system(K, w, cfg)
    H = K.schur(vals)
    sol = solve_schur(H, g, 1e-13, cfg.cg_max_iter, refine=2)
    return g, H, -sol.x


def lb_objective(A, zeta) -> float:
    """``0.5 zeta^T [[0, A], [A^T, 0]] zeta - sum(log zeta)`` for a dense positive ``A``."""
    A = np.asarray(A, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    n = A.shape[0]
    if np.any(zeta <= 0):
        return float("inf")
    return float(zeta[:n] @ A @ zeta[n:] - np.log(zeta).sum())


def lb_direction(state: BalancerState, cost, cfg: BalanceConfig = BalanceConfig()):
    """Scaling ``zeta = exp(t nu)`` and the modified Newton direction ``u`` in zeta space."""
    K = _Kernel(cost, state.t, state.nu, state.support)
    w = np.zeros(2 * state.n)
    vals, g = _newton_system(K, w, cfg)
    y = solve_schur(K.schur(vals), g, 1e-13, cfg.cg_max_iter, refine=2).x
    zeta = np.exp(state.t * state.nu)
    return zeta, -zeta * y


@dataclass
class PathResult:
    ts: List[float]
    states: List[BalancerState]
    reports: List[BalanceReport]
    failed_index: Optional[int] = None

    @property
    def final(self) -> BalancerState:
        return self.states[-1]

    @property
    def converged(self) -> bool:
        return self.failed_index is None


def stabilized_path(cost, schedule: Union[PathSchedule, Sequence[float]], method: str = "kr",
                    cfg: BalanceConfig = BalanceConfig(), nu0=None,
                    support: Optional[SupportSet] = None) -> PathResult:
    """Balance ``exp(-t_k c)`` along the schedule, translating by the previous potential.

    At each ``t_k`` the shifted kernel ``exp(-t_k (c - M.T nu_{k-1}))`` is balanced
    and the correction is accumulated into ``nu_k``.
    """
    ts = schedule_values(schedule)
    n = cost_size(cost)
    nu = np.zeros(2 * n) if nu0 is None else np.asarray(nu0, dtype=float)
    state = BalancerState(n, nu, ts[0], support)
    out = PathResult([], [], [])
    for k, t in enumerate(ts):
        try:
            state, rep = balance(state.at(t), cost, method, cfg)
        except (NumericalError, SupportError) as exc:
            out.failed_index = k
            out.reports.append(BalanceReport(method, float("nan"), 0, False, float("nan"),
                                             float("nan"), message=str(exc)))
            out.ts.append(t)
            out.states.append(state.at(t))
            return out
        out.ts.append(t)
        out.states.append(state)
        out.reports.append(rep)
        if not rep.converged:
            out.failed_index = k
            return out
    return out
