"""Sparse symmetric storage and a pivot-free LDL^T factorization.

The factorization eliminates pivots strictly in the order fixed by a
fill-reducing symbolic permutation and never swaps rows for stability.  It
is meant for symmetric quasi-definite systems, where the caller guarantees
stability through regularization of the (2,2) block.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

__all__ = [
    "SparseSym",
    "CooAssembler",
    "Symbolic",
    "Factorization",
    "ZeroPivot",
    "NotConverged",
    "symbolic_order",
    "symbolic_analysis",
    "factorize",
    "solve_refined",
    "fill_count",
]

PIVOT_TOL = 1e-12


class ZeroPivot(ArithmeticError):
    """Raised when a pivot falls below the zero-pivot threshold.

    ``index`` is the (0-based) elimination step at which it happened.
    """

    def __init__(self, index, value):
        super().__init__(f"zero pivot at elimination step {index} (d={value:.3e})")
        self.index = index
        self.value = value


class NotConverged(ArithmeticError):
    def __init__(self, residual, x):
        super().__init__(f"iterative refinement stalled at residual {residual:.3e}")
        self.residual = residual
        self.x = x


class SparseSym:
    """Symmetric matrix stored as lower-triangle coordinates.

    Duplicate coordinates are summed by :meth:`finalize`, in input order, so
    independently assembled blocks may overlap.
    """

    def __init__(self, n, rows, cols, vals, finalized=False):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols and vals must have equal length")
        if np.any(rows < cols):
            raise ValueError("only lower-triangle entries (row >= col) may be stored")
        if rows.size and (rows.max() >= n or cols.min() < 0):
            raise ValueError("coordinate out of range")
        self.n = int(n)
        self.rows, self.cols, self.vals = rows, cols, vals
        self.finalized = finalized

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=float)
        if a.shape[0] != a.shape[1] or not np.allclose(a, a.T, rtol=0, atol=0):
            raise ValueError("matrix must be square and exactly symmetric")
        r, c = np.nonzero(np.tril(a))
        return cls(a.shape[0], r, c, a[r, c]).finalize()

    def finalize(self):
        if self.finalized:
            return self
        n = self.n
        key = self.cols * n + self.rows
        uniq, inv = np.unique(key, return_inverse=True)
        vals = np.bincount(inv, weights=self.vals, minlength=uniq.size)
        return SparseSym(n, uniq % n, uniq // n, vals, finalized=True)

    @property
    def nnz(self):
        return self.rows.size

    def diagonal(self):
        d = np.zeros(self.n)
        m = self.rows == self.cols
        np.add.at(d, self.rows[m], self.vals[m])
        return d

    def to_csc(self):
        """Full (both triangles) CSC representation."""
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        return sp.csc_matrix((v, (r, c)), shape=(self.n, self.n))

    def toarray(self):
        return self.to_csc().toarray()

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        y = np.zeros(self.n)
        np.add.at(y, self.rows, self.vals * x[self.cols])
        off = self.rows != self.cols
        np.add.at(y, self.cols[off], self.vals[off] * x[self.rows[off]])
        return y

    def write_matrix_market(self, path):
        """Dump in MatrixMarket ``coordinate real symmetric`` format."""
        m = self.finalize()
        with open(path, "w") as fh:
            fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
            fh.write(f"{m.n} {m.n} {m.nnz}\n")
            for i, j, v in zip(m.rows, m.cols, m.vals):
                fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")


class CooAssembler:
    """Precomputed map from a fixed coordinate list to a finalized pattern.

    Repeated assembly with the same coordinates (as inside an interior-point
    loop) then only costs a ``bincount``.
    """

    def __init__(self, n, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        lo = np.maximum(rows, cols)
        hi = np.minimum(rows, cols)
        key = hi * n + lo
        uniq, self._inv = np.unique(key, return_inverse=True)
        self.n = n
        self.rows = uniq % n
        self.cols = uniq // n
        self.size = uniq.size
        self.symbolic = None

    def assemble(self, vals):
        v = np.bincount(self._inv, weights=vals, minlength=self.size)
        return SparseSym(self.n, self.rows, self.cols, v, finalized=True)


# ---------------------------------------------------------------------------
# ordering


def _adjacency(n, rows, cols):
    adj = [set() for _ in range(n)]
    for i, j in zip(rows.tolist(), cols.tolist()):
        if i != j:
            adj[i].add(j)
            adj[j].add(i)
    return adj


def symbolic_order(n, rows, cols):
    """Minimum-degree ordering of the graph of a symmetric pattern.

    Runs an explicit elimination-graph minimum degree with ties broken by
    the smallest node index, so the result is a deterministic function of
    the pattern.  Returns ``perm`` such that ``perm[k]`` is the original
    index eliminated at step ``k``.
    """
    adj = _adjacency(n, np.asarray(rows), np.asarray(cols))
    heap = [(len(a), i) for i, a in enumerate(adj)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    perm = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        perm.append(v)
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.asarray(perm, dtype=np.int64)


# ---------------------------------------------------------------------------
# numeric kernels (up-looking LDL^T on the permuted matrix)


@njit(cache=True)
def _ldl_symbolic(n, Ap, Ai, P, Pinv):
    parent = np.full(n, -1, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    flag = np.empty(n, dtype=np.int64)
    for k in range(n):
        flag[k] = k
        kk = P[k]
        for p in range(Ap[kk], Ap[kk + 1]):
            i = Pinv[Ai[p]]
            if i < k:
                while flag[i] != k:
                    if parent[i] == -1:
                        parent[i] = k
                    lnz[i] += 1
                    flag[i] = k
                    i = parent[i]
    Lp = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        Lp[k + 1] = Lp[k] + lnz[k]
    return Lp, parent


@njit(cache=True)
def _ldl_numeric(n, Ap, Ai, Ax, Lp, parent, P, Pinv, pivot_tol):
    Li = np.empty(Lp[n], dtype=np.int64)
    Lx = np.empty(Lp[n])
    D = np.empty(n)
    Y = np.zeros(n)
    pattern = np.empty(n, dtype=np.int64)
    flag = np.empty(n, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    for k in range(n):
        Y[k] = 0.0
        top = n
        flag[k] = k
        kk = P[k]
        for p in range(Ap[kk], Ap[kk + 1]):
            i = Pinv[Ai[p]]
            if i <= k:
                Y[i] += Ax[p]
                ln = 0
                while flag[i] != k:
                    pattern[ln] = i
                    ln += 1
                    flag[i] = k
                    i = parent[i]
                while ln > 0:
                    top -= 1
                    ln -= 1
                    pattern[top] = pattern[ln]
        dk = Y[k]
        mag = abs(dk)
        Y[k] = 0.0
        for q in range(top, n):
            i = pattern[q]
            yi = Y[i]
            Y[i] = 0.0
            p2 = Lp[i] + lnz[i]
            for p in range(Lp[i], p2):
                Y[Li[p]] -= Lx[p] * yi
            lki = yi / D[i]
            dk -= lki * yi
            mag += abs(lki * yi)
            Li[p2] = k
            Lx[p2] = lki
            lnz[i] += 1
        D[k] = dk
        if abs(dk) <= pivot_tol * max(1.0, mag):
            return Li, Lx, D, k
    return Li, Lx, D, -1


@njit(cache=True)
def _ldl_solve(n, Lp, Li, Lx, D, b):
    x = b.copy()
    for j in range(n):
        xj = x[j]
        for p in range(Lp[j], Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj
    for j in range(n):
        x[j] /= D[j]
    for j in range(n - 1, -1, -1):
        s = x[j]
        for p in range(Lp[j], Lp[j + 1]):
            s -= Lx[p] * x[Li[p]]
        x[j] = s
    return x


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Symbolic:
    """Ordering plus elimination tree for one sparsity pattern."""

    n: int
    perm: np.ndarray
    pinv: np.ndarray
    Lp: np.ndarray
    parent: np.ndarray

    @property
    def nnz_l(self):
        return int(self.Lp[-1])


def symbolic_analysis(M: SparseSym, perm=None) -> Symbolic:
    M = M.finalize()
    n = M.n
    if perm is None:
        perm = symbolic_order(n, M.rows, M.cols)
    perm = np.asarray(perm, dtype=np.int64)
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)
    A = M.to_csc()
    A.sort_indices()
    Lp, parent = _ldl_symbolic(
        n, A.indptr.astype(np.int64), A.indices.astype(np.int64), perm, pinv
    )
    return Symbolic(n, perm, pinv, Lp, parent)


def fill_count(M: SparseSym, perm=None):
    """Number of strictly-lower nonzeros of L under ``perm``."""
    return symbolic_analysis(M, perm).nnz_l


@dataclass(frozen=True)
class Factorization:
    """``P M P^T = L D L^T`` with unit lower ``L`` and diagonal ``D``."""

    symbolic: Symbolic
    Li: np.ndarray
    Lx: np.ndarray
    D: np.ndarray
    inertia: tuple = field(default=(0, 0, 0))

    @property
    def perm(self):
        return self.symbolic.perm

    @property
    def n(self):
        return self.symbolic.n

    def L(self):
        s = self.symbolic
        return sp.csc_matrix((self.Lx, self.Li, s.Lp), shape=(s.n, s.n)) + sp.eye(s.n)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        s = self.symbolic
        y = _ldl_solve(s.n, s.Lp, self.Li, self.Lx, self.D, b[s.perm])
        x = np.empty_like(y)
        x[s.perm] = y
        return x


def factorize(M: SparseSym, symbolic: Symbolic | None = None, pivot_tol=PIVOT_TOL):
    """Pivot-free LDL^T of ``M`` in the symbolic elimination order.

    Raises :class:`ZeroPivot` when ``|d_k| <= pivot_tol * max(1, a_k)``, where
    ``a_k`` is the magnitude of the terms summed into pivot ``k``
    (``|m_kk| + sum_i |l_ki d_i l_ki|``), i.e. when the pivot is zero up to
    cancellation error.
    """
    M = M.finalize()
    if symbolic is None:
        symbolic = symbolic_analysis(M)
    elif symbolic.n != M.n:
        raise ValueError("symbolic analysis does not match matrix dimension")
    A = M.to_csc()
    A.sort_indices()
    Li, Lx, D, bad = _ldl_numeric(
        M.n,
        A.indptr.astype(np.int64),
        A.indices.astype(np.int64),
        A.data.astype(float),
        symbolic.Lp,
        symbolic.parent,
        symbolic.perm,
        symbolic.pinv,
        float(pivot_tol),
    )
    if bad >= 0:
        raise ZeroPivot(int(bad), float(D[bad]))
    n_pos = int(np.sum(D > 0))
    n_neg = int(np.sum(D < 0))
    inertia = (n_pos, n_neg, M.n - n_pos - n_neg)
    return Factorization(symbolic, Li, Lx, D, inertia)


def solve_refined(F: Factorization, M: SparseSym, b, tol=1e-8, max_sweeps=5, raise_on_fail=True):
    """Solve ``M x = b`` with the factorization plus iterative refinement.

    Returns ``(x, residual)`` where residual is ``||Mx-b||_inf / max(1, ||b||_inf)``.
    """
    b = np.asarray(b, dtype=float)
    A = M.to_csc()
    bnorm = max(1.0, float(np.max(np.abs(b))) if b.size else 0.0)
    x = F.solve(b)
    res = b - A @ x
    err = float(np.max(np.abs(res))) / bnorm if b.size else 0.0
    sweeps = 0
    while err > tol and sweeps < max_sweeps:
        x = x + F.solve(res)
        res = b - A @ x
        err = float(np.max(np.abs(res))) / bnorm
        sweeps += 1
    if err > tol and raise_on_fail:
        raise NotConverged(err, x)
    return x, err
