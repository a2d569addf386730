"""Shape operators, matrix-free marginal algebra and a projected CG solver.

Vectors of length ``n**2`` are tied to ``n x n`` matrices by the row-major
reshape ``T(x)[i, j] = x[i * n + j]``.  The marginal operator ``M`` maps a
plan to its stacked row and column sums and ``M.T`` maps a pair of
potentials ``[nu1; nu2]`` to ``nu1[:, None] + nu2[None, :]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.sparse import csr_matrix

# dense n x n arrays are only allowed up to this side length
DENSE_MAX_N = 6000


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class SupportError(ValueError):
    """Raised when a masked matrix cannot be balanced (no positive diagonal)."""


def reshape(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeError(f"expected a flat vector, got shape {x.shape}")
    n = math.isqrt(x.size)
    if n * n != x.size:
        raise ShapeError(f"length {x.size} is not a perfect square")
    return x.reshape(n, n)


def unreshape(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {X.shape}")
    return X.reshape(-1)


def _square(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return reshape(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {x.shape}")
    return x


def check_dense_size(n: int) -> None:
    if n > DENSE_MAX_N:
        raise ShapeError(
            f"n = {n} exceeds the dense limit {DENSE_MAX_N}; use a support-restricted plan")


def as_matrix(c) -> np.ndarray:
    """Square finite matrix (signs unrestricted); used by the balancing kernels."""
    if isinstance(c, PairwiseCost):
        return c.dense()
    C = _square(c)
    check_dense_size(C.shape[0])
    if not np.all(np.isfinite(C)):
        raise DomainError("cost entries must be finite")
    return C


def as_cost(c) -> np.ndarray:
    """Validate a dense cost matrix (square, finite, nonnegative)."""
    if isinstance(c, PairwiseCost):
        return c.dense()
    C = _square(c)
    check_dense_size(C.shape[0])
    if not np.all(np.isfinite(C)):
        raise DomainError("cost entries must be finite")
    if np.any(C < 0):
        raise DomainError("cost entries must be nonnegative")
    return C


@dataclass
class TransportPlan:
    """A nonnegative coupling, dense (``rows is None``) or restricted to a support.

    For a dense plan ``values`` is ``n x n``; otherwise ``values[k]`` sits at
    ``(rows[k], cols[k])``.
    """

    n: int
    values: np.ndarray
    rows: Optional[np.ndarray] = None
    cols: Optional[np.ndarray] = None
    row_marginals: np.ndarray = field(init=False, repr=False)
    col_marginals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.rows is None:
            if self.values.shape != (self.n, self.n):
                raise ShapeError(f"dense plan must be {self.n}x{self.n}")
            check_dense_size(self.n)
        else:
            self.rows = np.asarray(self.rows, dtype=np.intp)
            self.cols = np.asarray(self.cols, dtype=np.intp)
            if not (self.rows.shape == self.cols.shape == self.values.shape):
                raise ShapeError("rows, cols and values must have equal length")
        if np.any(self.values < 0):
            raise DomainError("plan entries must be nonnegative")
        self.row_marginals, self.col_marginals = self._sums()

    @classmethod
    def from_vector(cls, x) -> "TransportPlan":
        X = reshape(np.asarray(x, dtype=float))
        return cls(X.shape[0], X)

    @classmethod
    def from_permutation(cls, perm) -> "TransportPlan":
        perm = np.asarray(perm, dtype=np.intp)
        n = perm.size
        return cls(n, np.ones(n), rows=np.arange(n), cols=perm)

    @property
    def is_dense(self) -> bool:
        return self.rows is None

    @property
    def nnz(self) -> int:
        if self.is_dense:
            return int(np.count_nonzero(self.values))
        return int(self.values.size)

    def _sums(self):
        if self.is_dense:
            return self.values.sum(axis=1), self.values.sum(axis=0)
        r = np.bincount(self.rows, weights=self.values, minlength=self.n)
        c = np.bincount(self.cols, weights=self.values, minlength=self.n)
        return r, c

    def marginals(self) -> np.ndarray:
        return np.concatenate([self.row_marginals, self.col_marginals])

    def dense(self) -> np.ndarray:
        if self.is_dense:
            return self.values
        check_dense_size(self.n)
        X = np.zeros((self.n, self.n))
        np.add.at(X, (self.rows, self.cols), self.values)
        return X

    def inner(self, cost) -> float:
        """<c, x> restricted to the plan's entries."""
        if self.is_dense:
            return float(np.sum(as_cost_like(cost, self.n) * self.values))
        return float(np.dot(cost_entries(cost, self.rows, self.cols), self.values))


def apply_marginal(x) -> np.ndarray:
    if isinstance(x, TransportPlan):
        return x.marginals()
    X = _square(x)
    return np.concatenate([X.sum(axis=1), X.sum(axis=0)])


def apply_adjoint(nu) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if nu.ndim != 1 or nu.size % 2:
        raise ShapeError(f"potential must have even length, got {nu.shape}")
    n = nu.size // 2
    return (nu[:n, None] + nu[None, n:]).reshape(-1)


def null_vector(n: int) -> np.ndarray:
    """The direction [1; -1] spanning the null space of ``M.T``."""
    return np.concatenate([np.ones(n), -np.ones(n)])


def project_out(v: np.ndarray, direction: np.ndarray) -> np.ndarray:
    return v - (v @ direction) / (direction @ direction) * direction


class SchurOperator:
    """Matrix-free ``M diag(w) M.T + reg * I`` on R^{2n}.

    ``weights`` is either an ``n x n`` array (or flat ``n**2`` vector), or the
    values of a support given by ``rows``/``cols``.
    """

    def __init__(self, weights, rows=None, cols=None, n=None, regularizer=0.0):
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise DomainError("Schur weights must be nonnegative")
        if regularizer < 0:
            raise DomainError("regularizer must be nonnegative")
        self.regularizer = float(regularizer)
        if rows is None:
            self.W = _square(w)
            self.n = self.W.shape[0]
            self.rows = self.cols = None
            self.r = self.W.sum(axis=1)
            self.c = self.W.sum(axis=0)
        else:
            if n is None:
                raise ShapeError("n is required for support-restricted weights")
            self.n = int(n)
            self.W = w
            self.rows = np.asarray(rows, dtype=np.intp)
            self.cols = np.asarray(cols, dtype=np.intp)
            self.r = np.bincount(self.rows, weights=w, minlength=self.n)
            self.c = np.bincount(self.cols, weights=w, minlength=self.n)
            self._B = csr_matrix((w, (self.rows, self.cols)), shape=(self.n, self.n))
            self._BT = self._B.T.tocsr()

    def diagonal(self) -> np.ndarray:
        return np.concatenate([self.r, self.c]) + self.regularizer

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        n = self.n
        if y.shape != (2 * n,):
            raise ShapeError(f"expected a vector of length {2 * n}")
        y1, y2 = y[:n], y[n:]
        if self.rows is None:
            top = self.r * y1 + self.W @ y2
            bot = self.c * y2 + self.W.T @ y1
        else:
            top = self.r * y1 + self._B @ y2
            bot = self.c * y2 + self._BT @ y1
        out = np.concatenate([top, bot])
        if self.regularizer:
            out += self.regularizer * y
        return out

    def dense(self) -> np.ndarray:
        n = self.n
        W = self.W if self.rows is None else TransportPlan(n, self.W, self.rows, self.cols).dense()
        H = np.block([[np.diag(self.r), W], [W.T, np.diag(self.c)]])
        return H + self.regularizer * np.eye(2 * n)


def schur_apply(weights, y, regularizer: float = 0.0) -> np.ndarray:
    return SchurOperator(weights, regularizer=regularizer)(y)


def schur_rank(x, rtol: float = 1e-10) -> int:
    """Numerical rank of the dense ``M diag(x**2) M.T``."""
    H = SchurOperator(_square(x) ** 2).dense()
    ev = np.linalg.eigvalsh(H)
    return int(np.sum(ev > rtol * ev.max()))


@dataclass(frozen=True)
class CgConfig:
    tol: float = 1e-10
    max_iter: int = 1000
    regularizer: float = 0.0

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise DomainError("CG tolerance must lie in (0, 1)")
        if self.max_iter < 1:
            raise DomainError("max_iter must be positive")
        if self.regularizer < 0:
            raise DomainError("regularizer must be nonnegative")


@dataclass
class CgResult:
    x: np.ndarray
    converged: bool
    iterations: int
    relative_residual: float


Operator = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def cg_solve(op: Operator, rhs, cfg: CgConfig = CgConfig(), precond=None,
             null: Optional[np.ndarray] = None) -> CgResult:
    """Preconditioned CG for a consistent symmetric PSD system.

    ``precond`` is the diagonal of a Jacobi preconditioner.  When ``null`` is
    given, the right-hand side and the returned solution are kept orthogonal
    to that vector.  The best iterate (smallest residual) is returned.
    """
    b = np.asarray(rhs, dtype=float)
    if callable(op):
        base = op
    else:
        A = np.asarray(op, dtype=float)
        base = lambda v: A @ v  # noqa: E731
    if cfg.regularizer:
        apply = lambda v: base(v) + cfg.regularizer * v  # noqa: E731
    else:
        apply = base
    if null is not None:
        b = project_out(b, null)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0:
        return CgResult(x, True, 0, 0.0)
    if precond is None:
        inv = None
    else:
        d = np.asarray(precond, dtype=float)
        inv = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)

    r = b.copy()
    z = r if inv is None else inv * r
    p = z.copy()
    rz = r @ z
    best_x, best_res = x.copy(), 1.0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        Ap = apply(p)
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise NumericalError("non-finite value in conjugate gradient")
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if not np.isfinite(res):
            raise NumericalError("non-finite residual in conjugate gradient")
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= cfg.tol:
            break
        z = r if inv is None else inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if null is not None:
        best_x = project_out(best_x, null)
    return CgResult(best_x, best_res <= cfg.tol, it, float(best_res))


def solve_schur(op: SchurOperator, rhs, tol: float, max_iter: Optional[int] = None,
                refine: int = 0, fallback: bool = True) -> CgResult:
    """Jacobi-preconditioned projected CG on a Schur system.

    With ``fallback`` a diagonal shift of ``1e-12 * max(diag)`` is tried when CG
    stagnates.
    ``refine`` extra passes of iterative refinement tighten the residual.
    """
    n = op.n
    null = null_vector(n)
    max_iter = max_iter or max(50, 20 * n)
    diag = op.diagonal()
    res = cg_solve(op, rhs, CgConfig(tol=tol, max_iter=max_iter), precond=diag, null=null)
    if fallback and not res.converged:
        reg = 1e-12 * float(diag.max())
        shifted = cg_solve(op, rhs, CgConfig(tol=tol, max_iter=max_iter, regularizer=reg),
                           precond=diag + reg, null=null)
        if shifted.relative_residual < res.relative_residual:
            res = shifted
    b = project_out(np.asarray(rhs, dtype=float), null)
    bnorm = np.linalg.norm(b)
    for _ in range(refine):
        if bnorm == 0:
            break
        resid = b - op(res.x)
        corr = cg_solve(op, resid, CgConfig(tol=tol, max_iter=max_iter), precond=diag, null=null)
        x = res.x + corr.x
        rel = float(np.linalg.norm(b - op(x)) / bnorm)
        if rel >= res.relative_residual:
            break
        res = CgResult(x, rel <= tol, res.iterations + corr.iterations, rel)
    return res


def magic(n: int) -> np.ndarray:
    """Magic square with the classic odd / doubly-even / singly-even layouts.

    >>> magic(3)
    array([[8, 1, 6],
           [3, 5, 7],
           [4, 9, 2]])
    """
    if int(n) != n or n < 3:
        raise DomainError("magic squares are defined here for n >= 3")
    n = int(n)
    return _magic(n)


def _magic(n: int) -> np.ndarray:
    if n % 2 == 1:
        J, I = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1))
        A = np.mod(I + J - (n + 3) // 2, n)
        B = np.mod(I + 2 * J - 2, n)
        return n * A + B + 1
    if n % 4 == 0:
        J, I = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1))
        K = (np.mod(I, 4) // 2) == (np.mod(J, 4) // 2)
        M = np.arange(1, n * n + 1).reshape(n, n)
        M[K] = n * n + 1 - M[K]
        return M
    # singly even: four shifted copies of the odd square, then column swaps
    p = n // 2
    A = _magic(p)
    M = np.block([[A, A + 2 * p * p], [A + 3 * p * p, A + p * p]])
    k = (n - 2) // 4
    rows = np.arange(p)
    cols = np.r_[np.arange(k), np.arange(n - k + 1, n)]
    top = M[np.ix_(rows, cols)].copy()
    M[np.ix_(rows, cols)] = M[np.ix_(rows + p, cols)]
    M[np.ix_(rows + p, cols)] = top
    cols = np.array([0, k])
    top = M[k, cols].copy()
    M[k, cols] = M[k + p, cols]
    M[k + p, cols] = top
    return M


class PairwiseCost:
    """Lazy squared-distance cost ``||y_i - z_j||^2`` for large point sets."""

    def __init__(self, Y, Z):
        Y = np.asarray(Y, dtype=float)
        Z = np.asarray(Z, dtype=float)
        if Y.ndim != 2 or Z.ndim != 2 or Y.shape != Z.shape:
            raise ShapeError(f"point sets must have equal shape, got {Y.shape} and {Z.shape}")
        self.Y, self.Z = Y, Z
        self.n = Y.shape[0]
        self._y2 = np.einsum("ij,ij->i", Y, Y)
        self._z2 = np.einsum("ij,ij->i", Z, Z)

    def entries(self, rows, cols) -> np.ndarray:
        d = self.Y[rows] - self.Z[cols]
        return np.einsum("ij,ij->i", d, d)

    def block(self, r0: int, r1: int) -> np.ndarray:
        B = self._y2[r0:r1, None] + self._z2[None, :] - 2.0 * self.Y[r0:r1] @ self.Z.T
        return np.maximum(B, 0.0)

    def dense(self) -> np.ndarray:
        check_dense_size(self.n)
        return l2_cost(self.Y, self.Z)


def cost_size(cost) -> int:
    if isinstance(cost, PairwiseCost):
        return cost.n
    return np.asarray(cost).shape[0]


def cost_entries(cost, rows, cols) -> np.ndarray:
    if isinstance(cost, PairwiseCost):
        return cost.entries(rows, cols)
    return np.asarray(cost, dtype=float)[rows, cols]


def as_cost_like(cost, n: int) -> np.ndarray:
    if isinstance(cost, PairwiseCost):
        return cost.dense()
    C = _square(cost)
    if C.shape[0] != n:
        raise ShapeError("cost and plan sizes differ")
    return C


def row_blocks(cost, block_rows: int = 512):
    """Yield ``(r0, r1, dense rows)`` without materialising the whole matrix."""
    n = cost_size(cost)
    for r0 in range(0, n, block_rows):
        r1 = min(n, r0 + block_rows)
        if isinstance(cost, PairwiseCost):
            yield r0, r1, cost.block(r0, r1)
        else:
            yield r0, r1, np.asarray(cost, dtype=float)[r0:r1]


def l2_cost(Y, Z) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Y.ndim != 2 or Z.ndim != 2 or Y.shape != Z.shape:
        raise ShapeError(f"point sets must have equal shape, got {Y.shape} and {Z.shape}")
    n, d = Y.shape
    check_dense_size(n)
    C = np.empty((n, n))
    step = max(1, 4_000_000 // max(1, n * d))
    for r0 in range(0, n, step):
        D = Y[r0:r0 + step, None, :] - Z[None, :, :]
        C[r0:r0 + step] = np.einsum("ijk,ijk->ij", D, D)
    return C
