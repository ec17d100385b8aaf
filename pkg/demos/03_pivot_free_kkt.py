"""Why the NCL block lets LDL^T skip pivoting.

A saddle-point matrix [[H, J^T], [J, 0]] can break a fixed elimination
order: a zero diagonal shows up as soon as a constraint row is eliminated
first.  With the regularization block -C (C = I/rho) the matrix is
quasi-definite and any order works; the signs of D give the inertia.

Run: python3 demos/03_pivot_free_kkt.py
"""
import numpy as np

from ncl_scopf.sparse import SparseSym, ZeroPivot, factorize, symbolic_analysis

H = np.diag([2.0, 1.0, 3.0])
J = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, -1.0]])
order = np.array([3, 4, 0, 1, 2])  # constraint rows first

for rho in (None, 1e2, 1e6):
    C = np.zeros((2, 2)) if rho is None else np.eye(2) / rho
    M = SparseSym.from_dense(np.block([[H, J.T], [J, -C]]))
    label = "no regularization" if rho is None else f"rho = {rho:.0e}"
    try:
        F = factorize(M, symbolic_analysis(M, perm=order))
        eig = np.linalg.eigvalsh(M.toarray())
        print(f"{label}: inertia {F.inertia}, eigenvalue signs ({(eig > 0).sum()}, {(eig < 0).sum()}, 0)")
    except ZeroPivot as exc:
        print(f"{label}: ZeroPivot at elimination step {exc.index}")
