"""Outer augmented Lagrangian (NCL) loop.

Each outer iteration solves the regularized subproblem with the interior
point method.  If the regularization residual ``max(|r|, |t|)`` is small
enough the multiplier estimates take the subproblem duals, otherwise the
penalty grows.  When the penalty saturates and the residual stalls the
problem is declared infeasible, and ``|r|^2 + |t|^2`` measures by how much.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ipm import IpmOptions, IpmState, solve_subproblem

__all__ = [
    "NclParams",
    "NclResult",
    "OuterRecord",
    "SpuriousPointWarning",
    "ncl_solve",
    "classify_termination",
    "bounded_multiplier_guard",
    "objective_scale",
]


class SpuriousPointWarning(RuntimeWarning):
    """Complementarity multipliers grew past the safeguard bound."""


@dataclass
class NclParams:
    rho0: float = 100.0
    rho_growth: float = 10.0
    rho_max: float = 1e12
    eta_star: float = 1e-6
    omega_star: float = 1e-6
    eta0: float = 0.1
    omega0: float = 0.1
    forcing: float = 0.1
    max_outer: int = 40
    lambda_max: float = 1e12
    stall_window: int = 3
    stall_ratio: float = 0.9
    warmstart: bool = True
    scale_objective: bool = True
    ipm: IpmOptions = field(default_factory=IpmOptions)
    log: object = None

    def __post_init__(self):
        if self.rho_growth <= 1:
            raise ValueError("rho_growth must exceed 1")
        if self.eta_star <= 0 or self.omega_star <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class OuterRecord:
    n: int
    rho: float
    r_inf: float
    t_inf: float
    inner_iters: int
    stationarity: float
    inner_status: str
    omega: float
    eta: float
    updated: bool

    @property
    def residual(self):
        return max(self.r_inf, self.t_inf)

    def to_json(self):
        return json.dumps({"n": self.n, "rho": self.rho, "r_inf": self.r_inf, "t_inf": self.t_inf,
                           "inner_iters": self.inner_iters, "stationarity": self.stationarity})


@dataclass
class NclResult:
    status: str
    w: np.ndarray
    lam: np.ndarray
    nu0: np.ndarray
    zl: np.ndarray
    zu: np.ndarray
    r: np.ndarray
    t: np.ndarray
    objective: float
    infeasibility: float
    outer_iterations: int
    inner_iterations: int
    trace: list
    state: IpmState
    obj_scale: float = 1.0
    warned: bool = False
    stats: dict = field(default_factory=dict)

    @property
    def r_inf(self):
        return float(np.max(np.abs(self.r), initial=0.0))

    @property
    def t_inf(self):
        return float(np.max(np.abs(self.t), initial=0.0))

    def xi(self, problem):
        return (self.zl - self.zu)[: problem.n0]

    def nu1(self, problem):
        return self.zl[problem.i1]

    def nu2(self, problem):
        return self.zl[problem.i2]


def objective_scale(problem, cap=100.0):
    """``min(1, cap / |grad phi(w_init)|_inf)``."""
    g = problem.model.gradient(problem.w_init)
    gmax = float(np.max(np.abs(g), initial=0.0))
    return 1.0 if gmax <= cap else cap / gmax


def bounded_multiplier_guard(nu0, lambda_max=1e12):
    """Return ``"warn"`` (and emit a warning) if ``|nu0|_inf > lambda_max``."""
    nu0 = np.asarray(nu0, dtype=float)
    if nu0.size and float(np.max(np.abs(nu0))) > lambda_max:
        warnings.warn(
            f"|nu0|_inf = {np.max(np.abs(nu0)):.3e} exceeds {lambda_max:.1e}; "
            "the iterates may approach a point that is not strongly stationary",
            SpuriousPointWarning,
            stacklevel=2,
        )
        return "warn"
    return "ok"


def _optimal(rec, params):
    return rec.residual <= params.eta_star and rec.stationarity <= params.omega_star


def classify_termination(trace, params: NclParams):
    """Status implied by an outer trace: optimal, infeasible or iteration_limit."""
    if not trace:
        raise ValueError("empty trace")
    last = trace[-1]
    if _optimal(last, params):
        return "optimal"
    k = params.stall_window
    tail = trace[-k:]
    if (
        len(trace) >= k
        and all(rec.rho >= params.rho_max for rec in tail)
        and all(rec.stationarity <= rec.omega for rec in tail)
        and tail[-1].residual > params.stall_ratio * tail[0].residual
    ):
        return "infeasible"
    return "iteration_limit"


def ncl_solve(problem, params: NclParams | None = None, lam0=None, nu00=None, warmstart: IpmState | None = None):
    """Solve the MPCC ``problem`` by the NCL method."""
    params = params or NclParams()
    sigma = objective_scale(problem) if params.scale_objective else 1.0
    lam_n = np.zeros(problem.m) if lam0 is None else np.asarray(lam0, dtype=float) * sigma
    nu0_n = np.zeros(problem.p) if nu00 is None else np.asarray(nu00, dtype=float) * sigma
    rho = params.rho0
    eta, omega = params.eta0, params.omega0
    if warmstart is not None:
        # an exact warm point should terminate at once
        eta, omega = params.eta_star, params.omega_star
    state = warmstart
    trace = []
    inner = 0
    warned = False
    stats = {}
    status = "iteration_limit"
    for n in range(params.max_outer):
        res = solve_subproblem(
            problem, lam_n, nu0_n, rho,
            warmstart=state if (params.warmstart or n == 0) else None,
            tol_inner=omega, options=params.ipm, obj_scale=sigma,
        )
        st = res.state
        inner += res.iterations
        for key, val in res.stats.items():
            stats[key] = max(stats.get(key, 0), val) if key == "max_delta_w" else stats.get(key, 0) + val
        r_inf = float(np.max(np.abs(st.r), initial=0.0))
        t_inf = float(np.max(np.abs(st.t), initial=0.0))
        rec = OuterRecord(n, rho, r_inf, t_inf, res.iterations, res.error, res.status, omega, eta, False)
        trace.append(rec)
        if bounded_multiplier_guard(st.nu0 / sigma, params.lambda_max) == "warn":
            warned = True
        state = st
        if params.log is not None:
            params.log(json.loads(rec.to_json()))
        if _optimal(rec, params):
            status = "optimal"
            break
        if rec.residual <= eta:
            rec.updated = True
            lam_n = st.lam.copy()
            nu0_n = st.nu0.copy()
            eta = max(params.eta_star, params.forcing * eta)
            omega = max(params.omega_star, params.forcing * omega)
        else:
            rho = min(rho * params.rho_growth, params.rho_max)
        if classify_termination(trace, params) == "infeasible":
            status = "infeasible"
            break
    w = state.w
    return NclResult(
        status=status,
        w=w.copy(),
        lam=state.lam / sigma,
        nu0=state.nu0 / sigma,
        zl=state.zl / sigma,
        zu=state.zu / sigma,
        r=state.r.copy(),
        t=state.t.copy(),
        objective=problem.model.eval_objective(w),
        infeasibility=float(state.r @ state.r + state.t @ state.t),
        outer_iterations=len(trace),
        inner_iterations=inner,
        trace=trace,
        state=state,
        obj_scale=sigma,
        warned=warned,
        stats=stats,
    )


def write_trace(trace, stream):
    for rec in trace:
        stream.write(rec.to_json() + "\n")

