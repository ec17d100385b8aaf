"""Stationarity classification of MPCC solutions.

The NLP multipliers of the regularized problem map onto the MPCC
Lagrangian ``phi + lam.c - xi.w0 - mu1.w1 - mu2.w2`` through
``mu1 = nu1 - nu0*w2`` and ``mu2 = nu2 - nu0*w1``.  A point is strongly
stationary when that gradient vanishes, ``mu1`` vanishes where ``w1 > 0``,
``mu2`` vanishes where ``w2 > 0`` and both are nonnegative on the biactive
set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Family, ModelFunctions, Template
from .scopf import MpccProblem

__all__ = [
    "BothPositive",
    "StationarityCertificate",
    "index_sets",
    "recover_mpcc_multipliers",
    "mpcc_gradient",
    "certify_strong",
    "certify_result",
    "from_expressions",
]


class BothPositive(ValueError):
    def __init__(self, index):
        super().__init__(f"complementarity violated at pair {index}")
        self.index = index


def index_sets(w1, w2, tol_act=1e-6):
    """Return ``(I+0, I0+, I00)`` as sorted 0-based index arrays."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    big1, big2 = w1 > tol_act, w2 > tol_act
    both = np.flatnonzero(big1 & big2)
    if both.size:
        raise BothPositive(int(both[0]))
    return np.flatnonzero(big1), np.flatnonzero(big2), np.flatnonzero(~big1 & ~big2)


def recover_mpcc_multipliers(nlp_duals, w1, w2):
    """Map ``(lam, xi, nu0, nu1, nu2)`` to ``(lam, xi, mu1, mu2)``."""
    lam, xi, nu0, nu1, nu2 = (np.asarray(x, dtype=float) for x in nlp_duals)
    return lam, xi, nu1 - nu0 * np.asarray(w2, dtype=float), nu2 - nu0 * np.asarray(w1, dtype=float)


def mpcc_gradient(problem: MpccProblem, w, lam, xi, mu1, mu2):
    """Gradient of the MPCC Lagrangian with respect to ``w``."""
    g = problem.model.gradient(w) + problem.model.jacobian(w).T @ lam
    g[: problem.n0] -= xi
    g[problem.i1] -= mu1
    g[problem.i2] -= mu2
    return g


@dataclass
class StationarityCertificate:
    i_pos0: np.ndarray
    i_0pos: np.ndarray
    i_00: np.ndarray
    lam: np.ndarray
    xi: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    gradient_residual: float
    complementarity: float
    sign_ok: np.ndarray
    verdict: str
    scale: float = 1.0

    @property
    def strong(self):
        return self.verdict == "strong"

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "gradient_residual": self.gradient_residual,
            "complementarity": self.complementarity,
            "scale": self.scale,
            "I_pos0": self.i_pos0.tolist(),
            "I_0pos": self.i_0pos.tolist(),
            "I_00": self.i_00.tolist(),
            "I_00_sign_ok": [bool(b) for b in self.sign_ok],
        }


def certify_strong(problem: MpccProblem, w, nlp_duals, tol=1e-6, tol_act=1e-6):
    """Check strong stationarity at ``w`` given NLP duals ``(lam, xi, nu0, nu1, nu2)``.

    Residual and multiplier tests use ``tol * scale`` with
    ``scale = max(1, |grad phi(w)|_inf)``, so that costs in $/h and
    per-unit constraints are judged alike.  A point violating
    complementarity beyond ``tol_act`` gets verdict ``weak/unclassified``.
    """
    w = np.asarray(w, dtype=float)
    w1, w2 = problem.w1(w), problem.w2(w)
    lam, xi, mu1, mu2 = recover_mpcc_multipliers(nlp_duals, w1, w2)
    scale = max(1.0, float(np.max(np.abs(problem.model.gradient(w)), initial=0.0)))
    g = mpcc_gradient(problem, w, lam, xi, mu1, mu2)
    gres = float(np.max(np.abs(g), initial=0.0)) / scale
    comp = float(np.max(np.minimum(w1, w2), initial=0.0))
    try:
        ip0, i0p, i00 = index_sets(w1, w2, tol_act)
    except BothPositive:
        empty = np.zeros(0, dtype=np.int64)
        return StationarityCertificate(empty, empty, empty, lam, xi, mu1, mu2, gres, comp,
                                       np.zeros(0, bool), "weak/unclassified", scale)
    lim = tol * scale
    sign_ok = (mu1[i00] >= -lim) & (mu2[i00] >= -lim)
    strong = (
        gres <= tol
        and np.all(np.abs(mu1[ip0]) <= lim)
        and np.all(np.abs(mu2[i0p]) <= lim)
        and bool(np.all(sign_ok))
    )
    return StationarityCertificate(ip0, i0p, i00, lam, xi, mu1, mu2, gres, comp, sign_ok,
                                   "strong" if strong else "weak/unclassified", scale)


def certify_result(problem: MpccProblem, result, tol=1e-6, tol_act=1e-6):
    """Certificate for an :class:`~ncl_scopf.ncl.NclResult`."""
    duals = (result.lam, result.xi(problem), result.nu0, result.nu1(problem), result.nu2(problem))
    return certify_strong(problem, result.w, duals, tol=tol, tol_act=tol_act)


def from_expressions(n0, p, objective, constraints=(), lb=None, ub=None, w_init=None, name="toy"):
    """Build a small :class:`MpccProblem` from Python callables.

    ``objective(x)`` and each ``constraints[i](x)`` receive the list of
    variable symbols (``w0`` first, then ``w1``, then ``w2``) and return an
    expression; constraints are equalities ``c_i(x) = 0``.
    """
    n = n0 + 2 * p
    ids = np.arange(n).reshape(1, n)
    none = np.zeros((1, 0))
    obj = [Family(Template(f"{name}_obj", n, 0, lambda x, _p: objective(x)), ids, none)]
    cons = [
        Family(Template(f"{name}_c{i}", n, 0, lambda x, _p, f=f: f(x)), ids, none, [i])
        for i, f in enumerate(constraints)
    ]
    model = ModelFunctions(n, len(cons), obj, cons)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    lb = lb.copy()
    ub = ub.copy()
    lb[n0:] = 0.0
    ub[n0:] = np.inf
    w_init = np.zeros(n) if w_init is None else np.asarray(w_init, dtype=float)
    return MpccProblem(model, lb, ub, n0, p, w_init, None, name)
