"""Fill count by explicit symbolic elimination on a dense boolean pattern."""
import numpy as np


def fill_by_elimination(pattern, perm):
    a = np.asarray(pattern, dtype=bool)
    a = (a | a.T)[np.ix_(perm, perm)].copy()
    n = a.shape[0]
    nnz_l = 0
    for k in range(n):
        nb = np.flatnonzero(a[k + 1 :, k]) + k + 1
        nnz_l += nb.size
        a[np.ix_(nb, nb)] = True
    return nnz_l


def inertia_by_eig(a, tol=1e-9):
    ev = np.linalg.eigvalsh(a)
    scale = max(1.0, float(np.max(np.abs(ev))))
    return int(np.sum(ev > tol * scale)), int(np.sum(ev < -tol * scale)), int(np.sum(np.abs(ev) <= tol * scale))
