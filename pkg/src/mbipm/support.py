"""Sparse support sets and total-support certificates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix, issparse
from scipy.sparse.csgraph import connected_components, maximum_bipartite_matching

from .core import ShapeError, DomainError, TransportPlan, cost_size, row_blocks


@dataclass
class SupportSet:
    """Index set over ``{0..n-1}^2`` stored as sorted, unique (row, col) pairs."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    sigma: Optional[np.ndarray] = None
    certified_total: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.intp).ravel()
        cols = np.asarray(self.cols, dtype=np.intp).ravel()
        if rows.shape != cols.shape:
            raise ShapeError("rows and cols must have equal length")
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= self.n or cols.max() >= self.n):
            raise ShapeError("support index out of range")
        key = np.unique(rows * self.n + cols)
        self.rows, self.cols = np.divmod(key, self.n)

    @classmethod
    def full(cls, n: int) -> "SupportSet":
        r, c = np.divmod(np.arange(n * n), n)
        return cls(n, r, c)

    @classmethod
    def from_mask(cls, mask) -> "SupportSet":
        mask = np.asarray(mask)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise ShapeError("mask must be square")
        r, c = np.nonzero(mask)
        return cls(mask.shape[0], r, c)

    def __len__(self) -> int:
        return int(self.rows.size)

    @property
    def keys(self) -> np.ndarray:
        return self.rows * self.n + self.cols

    def pairs(self) -> set:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def mask(self) -> np.ndarray:
        M = np.zeros((self.n, self.n), dtype=np.int8)
        M[self.rows, self.cols] = 1
        return M

    def __eq__(self, other) -> bool:
        if not isinstance(other, SupportSet):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.keys, other.keys)

    def issubset(self, other: "SupportSet") -> bool:
        return bool(np.all(np.isin(self.keys, other.keys)))

    def to_text(self) -> str:
        """One 1-based ``"i j"`` pair per line, sorted."""
        return "".join(f"{i + 1} {j + 1}\n" for i, j in zip(self.rows.tolist(), self.cols.tolist()))

    @classmethod
    def from_text(cls, text: str, n: int) -> "SupportSet":
        data = np.loadtxt(text.splitlines(), dtype=np.intp, ndmin=2) if text.strip() else np.zeros((0, 2), np.intp)
        return cls(n, data[:, 0] - 1, data[:, 1] - 1)


def _graph(mask) -> csr_matrix:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ShapeError("mask must be square")
    return csr_matrix((mask != 0).astype(np.int8))


def _support_graph(support) -> csr_matrix:
    if isinstance(support, SupportSet):
        data = np.ones(len(support), dtype=np.int8)
        return csr_matrix((data, (support.rows, support.cols)), shape=(support.n, support.n))
    if issparse(support):
        if support.shape[0] != support.shape[1]:
            raise ShapeError("mask must be square")
        return csr_matrix(support)
    return _graph(support)


def perfect_matching(mask) -> Optional[np.ndarray]:
    """Column matched to each row, or None when no positive diagonal exists."""
    G = _support_graph(mask)
    if G.shape[0] == 0:
        return np.zeros(0, dtype=np.intp)
    match = maximum_bipartite_matching(G, perm_type="column")
    if np.any(match < 0):
        return None
    return match.astype(np.intp)


def has_support(mask) -> bool:
    return perfect_matching(mask) is not None


def has_total_support(mask, method: str = "cycles") -> bool:
    """True iff the pattern is nonzero and every entry lies on a positive diagonal.

    ``method="cycles"`` finds one perfect matching and accepts an off-matching
    edge (i, j) when i and the row matched to column j share a strongly
    connected component of the alternating graph.  ``method="forced"`` forces
    each edge in turn and looks for a perfect matching of the remainder.
    """
    G = _support_graph(mask)
    n = G.shape[0]
    if G.nnz == 0:
        return False
    match = perfect_matching(G)
    if match is None:
        return False
    rows, cols = G.nonzero()
    if method == "forced":
        dense = G.toarray()
        for i, j in zip(rows, cols):
            keep_r = np.arange(n) != i
            keep_c = np.arange(n) != j
            if n > 1 and perfect_matching(dense[np.ix_(keep_r, keep_c)]) is None:
                return False
        return True
    if method != "cycles":
        raise DomainError(f"unknown method {method!r}")
    row_of_col = np.empty(n, dtype=np.intp)
    row_of_col[match] = np.arange(n)
    off = match[rows] != cols
    src, dst = rows[off], row_of_col[cols[off]]
    D = csr_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n))
    _, label = connected_components(D, directed=True, connection="strong")
    return bool(np.all(label[src] == label[dst]))


def _slack_rows(cost, nu, block_rows=512):
    nu = np.asarray(nu, dtype=float)
    n = cost_size(cost)
    if nu.shape != (2 * n,):
        raise ShapeError(f"potential must have length {2 * n}")
    if not np.all(np.isfinite(nu)):
        raise DomainError("potential must be finite")
    for r0, r1, C in row_blocks(cost, block_rows):
        yield r0, r1, C - nu[r0:r1, None] - nu[None, n:]


def threshold_select(cost, nu, eps: float) -> SupportSet:
    """Entries whose slack ``c - nu1 - nu2`` is strictly below ``eps``."""
    n = cost_size(cost)
    rows, cols = [], []
    for r0, _, S in _slack_rows(cost, nu):
        r, c = np.nonzero(S < eps)
        rows.append(r + r0)
        cols.append(c)
    return SupportSet(n, np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])


def k_smallest_select(cost, nu, k: int) -> SupportSet:
    """Union of the k smallest slacks in every row and every column.

    Ties go to the lower column index within a row and the lower row index
    within a column.
    """
    n = cost_size(cost)
    if not 1 <= k:
        raise DomainError("k must be positive")
    k = min(int(k), n)
    rows, cols = [], []
    best_val = np.empty((0, n))
    best_row = np.empty((0, n), dtype=np.intp)
    for r0, r1, S in _slack_rows(cost, nu):
        idx = np.argsort(S, axis=1, kind="stable")[:, :k]
        rows.append(np.repeat(np.arange(r0, r1), k))
        cols.append(idx.ravel())
        cand_val = np.vstack([best_val, S])
        cand_row = np.vstack([best_row, np.broadcast_to(np.arange(r0, r1)[:, None], S.shape)])
        order = np.argsort(cand_val, axis=0, kind="stable")[:k]
        best_val = np.take_along_axis(cand_val, order, axis=0)
        best_row = np.take_along_axis(cand_row, order, axis=0)
    rows.append(best_row.ravel())
    cols.append(np.broadcast_to(np.arange(n), best_row.shape).ravel())
    return SupportSet(n, np.concatenate(rows), np.concatenate(cols))


def _check_perm(sigma, n: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.intp)
    if sigma.shape != (n,) or not np.array_equal(np.sort(sigma), np.arange(n)):
        raise DomainError("sigma must be a permutation of 0..n-1")
    return sigma


def totalize(selected: SupportSet, sigma=None) -> SupportSet:
    """Smallest superset built from a diagonal and the reflection of ``selected``.

    Returns ``diag(sigma) | selected | {(sigma^-1(j), sigma(i)) : (i, j) in selected}``,
    which has total support for any selection.
    """
    n = selected.n
    sigma = np.arange(n) if sigma is None else _check_perm(sigma, n)
    inv = np.empty(n, dtype=np.intp)
    inv[sigma] = np.arange(n)
    rows = np.concatenate([np.arange(n), selected.rows, inv[selected.cols]])
    cols = np.concatenate([sigma, selected.cols, sigma[selected.rows]])
    return SupportSet(n, rows, cols, sigma=sigma, certified_total=True)


def greedy_sigma(plan: TransportPlan) -> np.ndarray:
    """Permutation picking large plan entries first (greedy, not optimal)."""
    n = plan.n
    if plan.is_dense:
        r, c = np.divmod(np.arange(n * n), n)
        v = plan.values.ravel()
    else:
        r, c, v = plan.rows, plan.cols, plan.values
    sigma = -np.ones(n, dtype=np.intp)
    used = np.zeros(n, dtype=bool)
    for idx in np.argsort(-v, kind="stable"):
        i, j = r[idx], c[idx]
        if sigma[i] < 0 and not used[j]:
            sigma[i] = j
            used[j] = True
    free_rows = np.flatnonzero(sigma < 0)
    sigma[free_rows] = np.flatnonzero(~used)
    return sigma
