"""Primal-dual interior-point solver for the NCL subproblem.

For fixed multiplier estimates ``(lam_n, nu0_n)`` and penalty ``rho`` the
subproblem is

    min  sigma*phi(w) + lam_n.r + nu0_n.t + rho/2 (|r|^2 + |t|^2)
    s.t. c(w) - r = 0,   w1*w2 - t + s = 0,   s >= 0,   lb <= w <= ub

with ``w1, w2`` the complementarity blocks (``lb = 0``).  Multipliers are
``lam`` (equalities), ``nu0`` (the relaxed complementarity, also the dual of
``s``) and ``zl, zu`` (bounds).  The Newton system is condensed to

    [ A   B^T ] [dw]   [r1]
    [ B   -C  ] [dy] = [r2],      dy = (dlam, dnu0)

with ``A = H + V0-coupling + Sigma``, ``B = [J; 0 W2 W1]`` and
``C = diag(1/rho, 1/rho + S/V0)``, factorized without pivoting.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import DomainError
from .sparse import CooAssembler, ZeroPivot, factorize, solve_refined, symbolic_analysis

__all__ = [
    "IpmOptions",
    "IpmState",
    "Direction",
    "Filter",
    "LineSearchFailure",
    "RegularizationExhausted",
    "fraction_to_boundary",
    "barrier_update",
    "assemble_newton",
    "recover_directions",
    "inertia_correct",
    "filter_line_search",
    "solve_subproblem",
]


class LineSearchFailure(RuntimeError):
    pass


class RegularizationExhausted(RuntimeError):
    pass


@dataclass
class IpmOptions:
    mu_init: float = 0.1
    mu_min: float = 1e-7
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    kappa_eps: float = 10.0
    tau_min: float = 0.99
    max_iter: int = 500
    bound_push: float = 1e-2
    bound_frac: float = 1e-2
    slack_init: float = 0.1
    s_max: float = 100.0
    kappa_sigma: float = 1e10
    # filter line search
    gamma_theta: float = 1e-5
    gamma_phi: float = 1e-8
    delta: float = 1.0
    s_theta: float = 1.1
    s_phi: float = 2.3
    eta_phi: float = 1e-4
    gamma_alpha: float = 0.05
    max_restorations: int = 5
    # inertia correction
    delta_w_init: float = 1e-8
    delta_w_growth: float = 10.0
    delta_w_max: float = 1e40
    delta_c: float = 1e-8
    log: object = None


@dataclass
class IpmState:
    """Primal-dual iterate.  ``zl``/``zu`` are bound duals over all of ``w``
    (zero where the bound is infinite)."""

    w: np.ndarray
    r: np.ndarray
    t: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    nu0: np.ndarray
    zl: np.ndarray
    zu: np.ndarray
    mu: float

    def copy(self):
        return replace(self, **{k: getattr(self, k).copy() for k in ("w", "r", "t", "s", "lam", "nu0", "zl", "zu")})

    def xi(self, problem):
        """Bound multipliers of ``w0`` (lower minus upper)."""
        return (self.zl - self.zu)[: problem.n0]

    def nu1(self, problem):
        return self.zl[problem.i1]

    def nu2(self, problem):
        return self.zl[problem.i2]


@dataclass
class Direction:
    dw: np.ndarray
    dr: np.ndarray
    dt: np.ndarray
    ds: np.ndarray
    dlam: np.ndarray
    dnu0: np.ndarray
    dzl: np.ndarray
    dzu: np.ndarray


def fraction_to_boundary(x, dx, tau):
    """Largest ``alpha`` in (0, 1] with ``x + alpha*dx >= (1 - tau) x``."""
    x = np.asarray(x, dtype=float)
    dx = np.asarray(dx, dtype=float)
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * x[neg] / dx[neg])))


def barrier_update(mu, mu_min=1e-7, kappa_mu=0.2, theta_mu=1.5):
    """Monotone (Fiacco-McCormick) barrier decrease."""
    return max(mu_min, min(kappa_mu * mu, mu**theta_mu))


class Filter:
    """Set of forbidden ``(theta, phi)`` corners."""

    def __init__(self):
        self.entries = []

    def acceptable(self, theta, phi):
        return all(theta < th or phi < ph for th, ph in self.entries)

    def add(self, theta, phi):
        self.entries = [(th, ph) for th, ph in self.entries if th < theta or ph < phi]
        self.entries.append((theta, phi))

    def reset(self):
        self.entries = []


# ---------------------------------------------------------------------------
# evaluation helpers


class _Sub:
    """Cached evaluation of the subproblem at fixed ``(lam_n, nu0_n, rho)``."""

    def __init__(self, problem, lam_n, nu0_n, rho, obj_scale):
        self.P = problem
        self.model = problem.model
        self.lam_n = np.asarray(lam_n, dtype=float)
        self.nu0_n = np.asarray(nu0_n, dtype=float)
        self.rho = float(rho)
        self.sigma = float(obj_scale)
        self.fl = np.isfinite(problem.lb)
        self.fu = np.isfinite(problem.ub)
        self.i1 = problem.i1
        self.i2 = problem.i2
        self.n = problem.n
        self.m = problem.m
        self.p = problem.p
        self.kkt = _kkt_structure(problem)

    def dl(self, w):
        return np.where(self.fl, w - np.where(self.fl, self.P.lb, 0.0), 1.0)

    def du(self, w):
        return np.where(self.fu, np.where(self.fu, self.P.ub, 0.0) - w, 1.0)

    def b2t(self, w, y):
        """``B2^T y`` with ``B2 = d(w1*w2)/dw``."""
        out = np.zeros(self.n)
        out[self.i1] = y * w[self.i2]
        out[self.i2] = y * w[self.i1]
        return out

    def sub_objective(self, w, r, t):
        return (
            self.sigma * self.model.eval_objective(w)
            + self.lam_n @ r
            + self.nu0_n @ t
            + 0.5 * self.rho * (r @ r + t @ t)
        )

    def primal(self, w, r, t, s):
        c = self.model.eval_constraints(w) - r
        q = w[self.i1] * w[self.i2] - t + s
        return c, q

    def theta(self, w, r, t, s):
        c, q = self.primal(w, r, t, s)
        return float(np.sum(np.abs(c)) + np.sum(np.abs(q)))

    def barrier(self, w, r, t, s, mu):
        dl, du = self.dl(w), self.du(w)
        if np.any(dl[self.fl] <= 0) or np.any(du[self.fu] <= 0) or np.any(s <= 0):
            return math.inf
        return (
            self.sub_objective(w, r, t)
            - mu * np.sum(np.log(dl[self.fl]))
            - mu * np.sum(np.log(du[self.fu]))
            - mu * np.sum(np.log(s))
        )

    def residuals(self, st: IpmState, mu, grad=None, jac=None):
        w = st.w
        if grad is None:
            grad = self.model.gradient(w)
        if jac is None:
            jac = self.model.jacobian(w)
        gw = self.sigma * grad + jac.T @ st.lam + self.b2t(w, st.nu0) - st.zl + st.zu
        gr = self.lam_n + self.rho * st.r - st.lam
        gt = self.nu0_n + self.rho * st.t - st.nu0
        c, q = self.primal(w, st.r, st.t, st.s)
        dl, du = self.dl(w), self.du(w)
        cl = np.where(self.fl, dl * st.zl - mu, 0.0)
        cu = np.where(self.fu, du * st.zu - mu, 0.0)
        cs = st.s * st.nu0 - mu
        return gw, gr, gt, c, q, cl, cu, cs

    def error(self, st, mu, s_max, res=None):
        gw, gr, gt, c, q, cl, cu, cs = res if res is not None else self.residuals(st, mu)
        nz = int(self.fl.sum() + self.fu.sum())
        zsum = np.sum(np.abs(st.zl)) + np.sum(np.abs(st.zu)) + np.sum(np.abs(st.nu0))
        ysum = np.sum(np.abs(st.lam)) + zsum
        ny = self.m + self.p + nz
        s_d = max(s_max, ysum / ny if ny else 0.0) / s_max
        s_c = max(s_max, zsum / (nz + self.p) if nz + self.p else 0.0) / s_max
        dual = max(_inf(gw), _inf(gr), _inf(gt))
        primal = max(_inf(c), _inf(q))
        compl = max(_inf(cl), _inf(cu), _inf(cs))
        return max(dual / s_d, primal, compl / s_c), dual, primal, compl


def _inf(x):
    return float(np.max(np.abs(x))) if x.size else 0.0


class _KktStructure:
    """Fixed coordinate list of the condensed Newton matrix."""

    def __init__(self, problem):
        model = problem.model
        n, m, p = problem.n, problem.m, problem.p
        i1, i2 = problem.i1, problem.i2
        N = n + m + p
        self.n, self.m, self.p, self.N = n, m, p, N
        rows = [model.hess_rows, np.arange(n), i2, n + model.jac_rows, n + m + np.arange(p),
                n + m + np.arange(p), np.arange(n, N)]
        cols = [model.hess_cols, np.arange(n), i1, model.jac_cols, i1, i2, np.arange(n, N)]
        self.sizes = [len(r) for r in rows]
        self.assembler = CooAssembler(N, np.concatenate(rows), np.concatenate(cols))
        probe = self.assembler.assemble(np.ones(sum(self.sizes)))
        self.symbolic = symbolic_analysis(probe)


def _kkt_structure(problem):
    ks = getattr(problem, "_kkt_cache", None)
    if ks is None:
        ks = _KktStructure(problem)
        problem._kkt_cache = ks
    return ks


def _kkt_parts(sub: _Sub, st: IpmState, hess_vals, jac_vals):
    """Values of A (without delta_w) and -C (without delta_c) in structure order."""
    w = st.w
    sig = np.zeros(sub.n)
    dl, du = sub.dl(w), sub.du(w)
    sig[sub.fl] += st.zl[sub.fl] / dl[sub.fl]
    sig[sub.fu] += st.zu[sub.fu] / du[sub.fu]
    cdiag = np.concatenate([np.full(sub.m, 1.0 / sub.rho), 1.0 / sub.rho + st.s / st.nu0])
    return [hess_vals, sig, st.nu0, jac_vals, w[sub.i2], w[sub.i1]], cdiag


def assemble_newton(problem, state: IpmState, lam_n, nu0_n, rho, delta_w=0.0, delta_c=0.0, obj_scale=1.0):
    """Condensed Newton matrix (lower triangle) and right-hand side at ``state``."""
    sub = _Sub(problem, lam_n, nu0_n, rho, obj_scale)
    model = problem.model
    hv = model.hessian_values(state.w, sub.sigma, state.lam)
    jv = model.jacobian_values(state.w)
    M = _assemble(sub, state, hv, jv, delta_w, delta_c)
    rhs = _rhs(sub, state, state.mu, model.gradient(state.w), model.jacobian(state.w))
    return M, rhs


def _assemble(sub, st, hv, jv, delta_w, delta_c):
    parts, cdiag = _kkt_parts(sub, st, hv, jv)
    parts[1] = parts[1] + delta_w
    parts.append(-(cdiag + delta_c))
    return sub.kkt.assembler.assemble(np.concatenate(parts))


def _rhs(sub, st, mu, grad, jac):
    w = st.w
    dl, du = sub.dl(w), sub.du(w)
    bar = np.zeros(sub.n)
    bar[sub.fl] -= mu / dl[sub.fl]
    bar[sub.fu] += mu / du[sub.fu]
    r1 = -(sub.sigma * grad + jac.T @ st.lam + sub.b2t(w, st.nu0) + bar)
    gr = sub.lam_n + sub.rho * st.r - st.lam
    gt = sub.nu0_n + sub.rho * st.t - st.nu0
    c = sub.model.eval_constraints(w) - st.r
    r2a = -c - gr / sub.rho
    r2b = -(w[sub.i1] * w[sub.i2] - st.t) - gt / sub.rho - mu / st.nu0
    return np.concatenate([r1, r2a, r2b])


def recover_directions(problem, state: IpmState, dw, dlam, dnu0, rho, lam_n, nu0_n, mu) -> Direction:
    """Eliminated components of the Newton step.

    ``dr = (dlam - (lam_n + rho r - lam)) / rho``, ``dt`` likewise with
    ``nu0``; ``ds`` from the linearized ``s nu0 = mu``; bound duals from
    ``(w - l) zl = mu`` and ``(u - w) zu = mu``.
    """
    st = state
    fl, fu = np.isfinite(problem.lb), np.isfinite(problem.ub)
    dr = (dlam - (lam_n + rho * st.r - st.lam)) / rho
    dt = (dnu0 - (nu0_n + rho * st.t - st.nu0)) / rho
    ds = mu / st.nu0 - st.s - (st.s / st.nu0) * dnu0
    dzl = np.zeros_like(st.w)
    dzu = np.zeros_like(st.w)
    dl = st.w[fl] - problem.lb[fl]
    du = problem.ub[fu] - st.w[fu]
    dzl[fl] = (mu - dl * st.zl[fl] - st.zl[fl] * dw[fl]) / dl
    dzu[fu] = (mu - du * st.zu[fu] + st.zu[fu] * dw[fu]) / du
    return Direction(dw, dr, dt, ds, dlam, dnu0, dzl, dzu)


def inertia_correct(assemble, n_w, m_y, mu, hnorm, opts: IpmOptions, last_delta_w=0.0, stats=None):
    """Find regularization giving inertia ``(n_w, m_y, 0)``.

    ``assemble(delta_w, delta_c)`` must return the regularized matrix.
    Returns ``(delta_w, delta_c, factorization, matrix)``.
    """
    stats = stats if stats is not None else {}
    target = (n_w, m_y, 0)
    first = opts.delta_w_init * max(1.0, hnorm)
    delta_c = 0.0
    delta_w = 0.0
    while True:
        for attempt in range(2):
            M = assemble(delta_w, delta_c)
            stats["factorizations"] = stats.get("factorizations", 0) + 1
            try:
                F = factorize(M, symbolic=assemble.symbolic)
            except ZeroPivot:
                stats["zero_pivots"] = stats.get("zero_pivots", 0) + 1
                if delta_w > 0 and delta_c > 0:
                    stats["zero_pivots_regularized"] = stats.get("zero_pivots_regularized", 0) + 1
                if delta_c == 0.0:
                    delta_c = opts.delta_c * mu
                    continue
                break
            if F.inertia == target:
                if delta_w > 0 or delta_c > 0:
                    stats["corrections"] = stats.get("corrections", 0) + 1
                return delta_w, delta_c, F, M
            break
        if delta_w == 0.0:
            delta_w = first
            if last_delta_w > 0:
                while delta_w < last_delta_w / opts.delta_w_growth:
                    delta_w *= opts.delta_w_growth
        else:
            delta_w *= opts.delta_w_growth
        if delta_w > opts.delta_w_max:
            raise RegularizationExhausted(f"delta_w exceeded {opts.delta_w_max:g}")


class _Assembler:
    def __init__(self, sub, st, hv, jv):
        self.sub, self.st, self.hv, self.jv = sub, st, hv, jv
        self.symbolic = sub.kkt.symbolic

    def __call__(self, delta_w, delta_c):
        return _assemble(self.sub, self.st, self.hv, self.jv, delta_w, delta_c)


# ---------------------------------------------------------------------------


def _initial_state(sub: _Sub, opts: IpmOptions):
    P = sub.P
    w = P.w_init.astype(float).copy()
    lb, ub = P.lb, P.ub
    fl, fu = sub.fl, sub.fu
    k1, k2 = opts.bound_push, opts.bound_frac
    both = fl & fu
    pl = np.where(fl, k1 * np.maximum(1.0, np.abs(np.where(fl, lb, 0.0))), 0.0)
    pu = np.where(fu, k1 * np.maximum(1.0, np.abs(np.where(fu, ub, 0.0))), 0.0)
    span = np.where(both, np.where(fu, ub, 0.0) - np.where(fl, lb, 0.0), np.inf)
    pl = np.where(both, np.minimum(pl, k2 * span), pl)
    pu = np.where(both, np.minimum(pu, k2 * span), pu)
    w = np.where(fl, np.maximum(w, np.where(fl, lb, 0.0) + pl), w)
    w = np.where(fu, np.minimum(w, np.where(fu, ub, 0.0) - pu), w)
    r = sub.model.eval_constraints(w)
    s = np.full(sub.p, opts.slack_init)
    t = w[sub.i1] * w[sub.i2] + s
    lam = sub.lam_n + sub.rho * r
    nu0 = np.ones(sub.p)
    zl = np.where(fl, 1.0, 0.0)
    zu = np.where(fu, 1.0, 0.0)
    return IpmState(w, r, t, s, lam, nu0, zl, zu, opts.mu_init)


def _warm_state(sub: _Sub, warm: IpmState, opts: IpmOptions):
    st = warm.copy()
    P = sub.P
    fl, fu = sub.fl, sub.fu
    eps = 1e-12
    st.w = np.where(fl, np.maximum(st.w, np.where(fl, P.lb, 0.0) + eps), st.w)
    st.w = np.where(fu, np.minimum(st.w, np.where(fu, P.ub, 0.0) - eps), st.w)
    st.s = np.maximum(st.s, eps)
    # first-order estimates for the new (lam_n, nu0_n, rho); exact at a solved point
    st.lam = sub.lam_n + sub.rho * st.r
    st.nu0 = np.maximum(sub.nu0_n + sub.rho * st.t, eps)
    st.zl = np.where(fl, np.maximum(st.zl, eps), 0.0)
    st.zu = np.where(fu, np.maximum(st.zu, eps), 0.0)
    st.mu = max(opts.mu_min, min(opts.mu_init, warm.mu))
    return st


def _reset_duals(sub, st, mu, kappa):
    dl, du = sub.dl(st.w), sub.du(st.w)
    fl, fu = sub.fl, sub.fu
    st.zl[fl] = np.clip(st.zl[fl], mu / (kappa * dl[fl]), kappa * mu / dl[fl])
    st.zu[fu] = np.clip(st.zu[fu], mu / (kappa * du[fu]), kappa * mu / du[fu])
    st.nu0 = np.clip(st.nu0, mu / (kappa * st.s), kappa * mu / st.s)


def _step(st, d, alpha, alpha_z):
    return IpmState(
        st.w + alpha * d.dw,
        st.r + alpha * d.dr,
        st.t + alpha * d.dt,
        st.s + alpha * d.ds,
        st.lam + alpha * d.dlam,
        st.nu0 + alpha_z * d.dnu0,
        st.zl + alpha_z * d.dzl,
        st.zu + alpha_z * d.dzu,
        st.mu,
    )


def _restore(sub, st):
    """Reproject the free regularization variables so that ``theta = 0``.

    The subproblem is always feasible: ``r = c(w)`` and
    ``t = w1*w2 + s`` satisfy the constraints for any interior ``w, s``.
    """
    st = st.copy()
    st.r = sub.model.eval_constraints(st.w)
    st.t = st.w[sub.i1] * st.w[sub.i2] + st.s
    return st


@dataclass
class IpmResult:
    state: IpmState
    status: str
    iterations: int
    error: float
    stats: dict = field(default_factory=dict)

    def __iter__(self):
        # unpacks as ``state, status``
        return iter((self.state, self.status))


def solve_subproblem(problem, lam_n, nu0_n, rho, warmstart=None, tol_inner=1e-6, options=None, obj_scale=1.0):
    """Solve one NCL subproblem; returns an :class:`IpmResult`.

    ``status`` is ``solved``, ``max_iter`` or ``restoration_failure``.
    """
    opts = options or IpmOptions()
    # complementarity cannot drop below mu, so keep the floor under the tolerance
    opts = replace(opts, mu_min=min(opts.mu_min, 0.1 * tol_inner))
    sub = _Sub(problem, lam_n, nu0_n, rho, obj_scale)
    st = _warm_state(sub, warmstart, opts) if warmstart is not None else _initial_state(sub, opts)
    model = problem.model
    stats = {"factorizations": 0, "zero_pivots": 0, "zero_pivots_regularized": 0, "corrections": 0,
             "restorations": 0, "max_delta_w": 0.0, "refine_failures": 0}
    n_y = sub.m + sub.p
    theta0 = sub.theta(st.w, st.r, st.t, st.s)
    theta_max = 1e4 * max(1.0, theta0)
    theta_min = 1e-4 * max(1.0, theta0)
    filt = Filter()
    last_dw = 0.0
    extra_dw = 0.0
    fails = 0
    err = math.inf
    status = "max_iter"
    it = 0
    for it in range(opts.max_iter + 1):
        grad = model.gradient(st.w)
        jac = model.jacobian(st.w)
        res0 = sub.residuals(st, 0.0, grad, jac)
        err, dual, primal, compl = sub.error(st, 0.0, opts.s_max, res0)
        if err <= tol_inner:
            status = "solved"
            break
        if it == opts.max_iter:
            break
        while True:
            err_mu = sub.error(st, st.mu, opts.s_max, sub.residuals(st, st.mu, grad, jac))[0]
            if err_mu > opts.kappa_eps * st.mu or st.mu <= opts.mu_min:
                break
            st.mu = barrier_update(st.mu, opts.mu_min, opts.kappa_mu, opts.theta_mu)
            filt.reset()
        mu = st.mu
        hv = model.hessian_values(st.w, sub.sigma, st.lam)
        jv = model.jacobian_values(st.w)
        hnorm = float(np.max(np.abs(hv), initial=0.0))
        asm = _Assembler(sub, st, hv, jv)
        dw_floor = extra_dw
        if dw_floor > 0:
            base = asm
            asm = lambda dw, dc, _b=base: _b(max(dw, dw_floor), dc)  # noqa: E731
            asm.symbolic = base.symbolic
        delta_w, delta_c, F, M = inertia_correct(asm, sub.n, n_y, mu, hnorm, opts, last_dw, stats)
        delta_w = max(delta_w, dw_floor)
        last_dw = delta_w
        stats["max_delta_w"] = max(stats["max_delta_w"], delta_w)
        rhs = _rhs(sub, st, mu, grad, jac)
        sol, rerr = solve_refined(F, M, rhs, raise_on_fail=False)
        if rerr > 1e-8:
            stats["refine_failures"] += 1
        d_w, d_lam, d_nu0 = sol[: sub.n], sol[sub.n : sub.n + sub.m], sol[sub.n + sub.m :]
        d = recover_directions(problem, st, d_w, d_lam, d_nu0, rho, sub.lam_n, sub.nu0_n, mu)

        tau = max(opts.tau_min, 1.0 - mu)
        dl, du = sub.dl(st.w), sub.du(st.w)
        alpha_max = min(
            fraction_to_boundary(dl[sub.fl], d.dw[sub.fl], tau),
            fraction_to_boundary(du[sub.fu], -d.dw[sub.fu], tau),
            fraction_to_boundary(st.s, d.ds, tau),
        )
        alpha_z = min(
            fraction_to_boundary(st.zl[sub.fl], d.dzl[sub.fl], tau),
            fraction_to_boundary(st.zu[sub.fu], d.dzu[sub.fu], tau),
            fraction_to_boundary(st.nu0, d.dnu0, tau),
        )
        try:
            alpha, accepted_as = _line_search(sub, st, d, mu, alpha_max, filt, theta_min, theta_max, opts)
        except LineSearchFailure:
            fails += 1
            theta = sub.theta(st.w, st.r, st.t, st.s)
            if theta > 1e-12 and stats["restorations"] < opts.max_restorations * (1 + it // 50):
                st = _restore(sub, st)
                stats["restorations"] += 1
                filt.reset()
                continue
            extra_dw = max(1e-4, 100.0 * max(delta_w, extra_dw))
            if fails > 10:
                status = "restoration_failure"
                break
            continue
        fails = 0
        extra_dw = 0.0
        st = _step(st, d, alpha, alpha_z)
        _reset_duals(sub, st, mu, opts.kappa_sigma)
        if opts.log is not None:
            opts.log({"iter": it, "mu": mu, "err": err, "inf_pr": primal, "inf_du": dual,
                      "alpha_pr": alpha, "alpha_du": alpha_z, "delta_w": delta_w, "delta_c": delta_c,
                      "step": accepted_as})
    return IpmResult(st, status, it, err, stats)


def _line_search(sub, st, d, mu, alpha_max, filt, theta_min, theta_max, opts):
    theta = sub.theta(st.w, st.r, st.t, st.s)
    phi = sub.barrier(st.w, st.r, st.t, st.s, mu)
    dl, du = sub.dl(st.w), sub.du(st.w)
    gw = sub.sigma * sub.model.gradient(st.w)
    gw[sub.fl] -= mu / dl[sub.fl]
    gw[sub.fu] += mu / du[sub.fu]
    gphi = (
        gw @ d.dw
        + (sub.lam_n + sub.rho * st.r) @ d.dr
        + (sub.nu0_n + sub.rho * st.t) @ d.dt
        - mu * np.sum(d.ds / st.s)
    )
    g = opts
    if gphi < 0:
        a_min = min(g.gamma_theta, g.gamma_phi * theta / -gphi)
        if theta <= theta_min:
            a_min = min(a_min, g.delta * theta**g.s_theta / (-gphi) ** g.s_phi)
    else:
        a_min = g.gamma_theta
    a_min *= g.gamma_alpha
    alpha = alpha_max
    while alpha >= a_min and alpha > 1e-16:
        w = st.w + alpha * d.dw
        r = st.r + alpha * d.dr
        t = st.t + alpha * d.dt
        s = st.s + alpha * d.ds
        try:
            th_t = sub.theta(w, r, t, s)
            ph_t = sub.barrier(w, r, t, s, mu)
        except DomainError:
            th_t, ph_t = math.inf, math.inf
        if not (math.isfinite(th_t) and math.isfinite(ph_t)) or th_t > theta_max or not filt.acceptable(th_t, ph_t):
            alpha *= 0.5
            continue
        switching = gphi < 0 and alpha * (-gphi) ** g.s_phi > g.delta * theta**g.s_theta
        if theta <= theta_min and switching:
            if ph_t <= phi + g.eta_phi * alpha * gphi:
                return alpha, "f"
        elif th_t <= (1 - g.gamma_theta) * theta or ph_t <= phi - g.gamma_phi * theta:
            filt.add((1 - g.gamma_theta) * theta, phi - g.gamma_phi * theta)
            return alpha, "h"
        alpha *= 0.5
    raise LineSearchFailure(f"step size below {a_min:.2e}")


def filter_line_search(problem, state: IpmState, direction: Direction, lam_n, nu0_n, rho, mu=None,
                       filt=None, options=None, obj_scale=1.0):
    """Backtrack along ``direction`` from ``state``; returns ``(alpha, filter)``.

    The fraction-to-boundary cap uses ``tau = max(tau_min, 1 - mu)``.
    Raises :class:`LineSearchFailure` when no trial step is acceptable.
    """
    opts = options or IpmOptions()
    mu = state.mu if mu is None else mu
    filt = filt if filt is not None else Filter()
    sub = _Sub(problem, np.asarray(lam_n, dtype=float), np.asarray(nu0_n, dtype=float), rho, obj_scale)
    tau = max(opts.tau_min, 1.0 - mu)
    alpha_max = min(
        fraction_to_boundary(sub.dl(state.w)[sub.fl], direction.dw[sub.fl], tau),
        fraction_to_boundary(sub.du(state.w)[sub.fu], -direction.dw[sub.fu], tau),
        fraction_to_boundary(state.s, direction.ds, tau),
    )
    theta0 = sub.theta(state.w, state.r, state.t, state.s)
    alpha, _ = _line_search(sub, state, direction, mu, alpha_max, filt,
                            1e-4 * max(1.0, theta0), 1e4 * max(1.0, theta0), opts)
    return alpha, filt


def jsonl_logger(stream):
    """Return a callback writing one JSON object per line to ``stream``."""

    def log(record):
        stream.write(json.dumps(record) + "\n")

    return log
