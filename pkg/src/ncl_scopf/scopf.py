"""Corrective AC-SCOPF and contingency-screening problems in vertical MPCC form.

Each scenario ``k`` (``k = 0`` is the base case) carries bus voltages and
angles, generator outputs, and for ``k >= 1`` the recourse variables of the
droop (AGC) and PV/PQ-switching blocks.  Inequalities are turned into
equalities with nonnegative slacks, and the two sides of every
complementarity pair become variables in the ``w1`` and ``w2`` blocks, so
the emitted problem reads

    min phi(w)  s.t.  c(w) = 0,  lb <= w0 <= ub,  0 <= w1 _|_ w2 >= 0.

The variable vector is ordered ``(w0, w1, w2)`` with pair ``i`` being
``(w[n0 + i], w[n0 + p + i])``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .matpower import Contingency, PowerNetwork, branch_admittances
from .model import Family, ModelFunctions, Template, cos, sin

__all__ = [
    "MpccProblem",
    "ScopfLayout",
    "ScenarioLayout",
    "IslandedTopology",
    "DegeneratePairWarning",
    "participation_factors",
    "agc_clip_oracle",
    "build_scopf",
    "build_screening",
    "islands",
]

INF = np.inf
DEGENERATE_Q_GAP = 1e-6


class IslandedTopology(ValueError):
    def __init__(self, k, n_islands):
        super().__init__(f"scenario {k} splits the network into {n_islands} islands")
        self.k = k
        self.n_islands = n_islands


class DegeneratePairWarning(UserWarning):
    pass


def agc_clip_oracle(p0, alpha, delta, pmin, pmax):
    """Reference droop response ``min(max(p0 + alpha*delta, pmin), pmax)``."""
    return np.minimum(np.maximum(np.asarray(p0) + np.asarray(alpha) * delta, pmin), pmax)


def participation_factors(net: PowerNetwork, rule="pmax"):
    """Droop participation factors over in-service generators.

    ``pmax`` shares in proportion to capacity; ``uniform`` shares equally.
    """
    on = np.asarray(net.gen_status, dtype=bool)
    alpha = np.zeros(net.n_gen)
    if rule == "pmax":
        cap = np.where(on, net.pmax, 0.0)
        alpha[on] = cap[on] / cap.sum()
    elif rule == "uniform":
        alpha[on] = 1.0 / on.sum()
    else:
        raise ValueError(f"unknown participation rule {rule!r}")
    return alpha


def islands(net: PowerNetwork):
    """Connected components of the in-service branch graph (list of bus index arrays)."""
    on = np.asarray(net.branch_status, dtype=bool)
    g = coo_matrix(
        (np.ones(on.sum()), (net.f_bus[on], net.t_bus[on])), shape=(net.n_bus, net.n_bus)
    )
    nc, labels = connected_components(g, directed=False)
    return [np.flatnonzero(labels == c) for c in range(nc)]


# ---------------------------------------------------------------------------
# templates


def _pf(x, p):
    vi, vj, ti, tj = x
    gii, gij, bij = p
    d = ti - tj
    return gii * vi**2 + vi * vj * (gij * cos(d) + bij * sin(d))


def _qf(x, p):
    vi, vj, ti, tj = x
    bii, gij, bij = p
    d = ti - tj
    return -bii * vi**2 + vi * vj * (gij * sin(d) - bij * cos(d))


def _flow_limit(x, p):
    vi, vj, ti, tj, s = x
    gii, bii, gij, bij, rate2 = p
    d = ti - tj
    pf = gii * vi**2 + vi * vj * (gij * cos(d) + bij * sin(d))
    qf = -bii * vi**2 + vi * vj * (gij * sin(d) - bij * cos(d))
    return pf**2 + qf**2 + s - rate2


T_COST = Template("gen_cost", 1, 3, lambda x, p: p[0] * x[0] ** 2 + p[1] * x[0] + p[2])
T_SHUNT_P = Template("shunt_p", 1, 2, lambda x, p: p[0] + p[1] * x[0] ** 2)
T_SHUNT_Q = Template("shunt_q", 1, 2, lambda x, p: p[0] - p[1] * x[0] ** 2)
T_FLOW_P = Template("branch_p", 4, 3, _pf)
T_FLOW_Q = Template("branch_q", 4, 3, _qf)
T_FLOW_LIMIT = Template("flow_limit", 5, 5, _flow_limit)
T_LINEAR = Template("linear", 1, 1, lambda x, p: p[0] * x[0])
T_CONST = Template("const", 0, 1, lambda x, p: p[0])


class _Families:
    """Accumulates instances per template; emits one family per template."""

    def __init__(self):
        self._acc = {}

    def add(self, template, vars, params, rows=None):
        vars = np.asarray(vars, dtype=np.int64)
        n = vars.shape[0] if vars.ndim else 1
        vars = vars.reshape(n, template.nvar)
        if n == 0:
            return
        params = np.broadcast_to(np.asarray(params, dtype=float), (n, template.npar)) if template.npar else np.zeros((n, 0))
        rows = None if rows is None else np.broadcast_to(np.asarray(rows, dtype=np.int64), (n,))
        self._acc.setdefault(template.name, (template, []))[1].append((vars, params, rows))

    def linear(self, rows, vars, coef):
        rows = np.atleast_1d(rows)
        vars = np.broadcast_to(np.atleast_1d(vars), rows.shape)
        coef = np.broadcast_to(np.asarray(coef, dtype=float), rows.shape)
        self.add(T_LINEAR, vars.reshape(-1, 1), coef.reshape(-1, 1), rows)

    def const(self, rows, value):
        rows = np.atleast_1d(rows)
        value = np.broadcast_to(np.asarray(value, dtype=float), rows.shape)
        self.add(T_CONST, np.zeros((rows.size, 0), dtype=np.int64), value.reshape(-1, 1), rows)

    def build(self):
        out = []
        for template, parts in self._acc.values():
            vars = np.concatenate([p[0] for p in parts])
            params = np.concatenate([p[1] for p in parts])
            rows = None if parts[0][2] is None else np.concatenate([p[2] for p in parts])
            out.append(Family(template, vars, params, rows))
        return out


class _Alloc:
    def __init__(self):
        self.n = 0

    def take(self, k):
        idx = np.arange(self.n, self.n + k, dtype=np.int64)
        self.n += k
        return idx


# ---------------------------------------------------------------------------
# layout


@dataclass
class ScenarioLayout:
    """Variable and row indices of one scenario.

    Arrays over generators are aligned with ``gens`` (the in-service
    generators of this scenario).  Recourse entries are empty for ``k = 0``.
    """

    k: int
    contingency: Contingency | None
    net: PowerNetwork
    gens: np.ndarray
    v: np.ndarray
    th: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    limited: np.ndarray
    s_from: np.ndarray
    s_to: np.ndarray
    delta: int = -1
    pi_plus: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    pi_minus: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    nu_plus: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    nu_minus: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    z_pmax: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    z_pmin: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    z_qmax: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    z_qmin: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    rows: dict = field(default_factory=dict)
    n_islands: int = 1

    def variables(self):
        """All variable indices owned by this scenario."""
        parts = [self.v, self.th, self.pg, self.qg, self.s_from, self.s_to,
                 self.pi_plus, self.pi_minus, self.nu_plus, self.nu_minus,
                 self.z_pmax, self.z_pmin, self.z_qmax, self.z_qmin]
        if self.delta >= 0:
            parts.append(np.array([self.delta]))
        return np.sort(np.concatenate(parts))

    def all_rows(self):
        return np.sort(np.concatenate(list(self.rows.values())))


@dataclass
class ScopfLayout:
    scenarios: list
    alpha: np.ndarray
    base_fixed: dict | None = None
    degenerate: list = field(default_factory=list)

    @property
    def K(self):
        return sum(1 for s in self.scenarios if s.k > 0)


@dataclass
class MpccProblem:
    """``min phi(w)  s.t.  c(w) = 0,  lb <= w0 <= ub,  0 <= w1 _|_ w2 >= 0``."""

    model: ModelFunctions
    lb: np.ndarray
    ub: np.ndarray
    n0: int
    p: int
    w_init: np.ndarray
    layout: ScopfLayout | None = None
    name: str = "mpcc"

    def __post_init__(self):
        n = self.model.n
        if self.n0 + 2 * self.p != n:
            raise ValueError("partition sizes do not add up to n")
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        self.w_init = np.asarray(self.w_init, dtype=float)
        pairs = slice(self.n0, n)
        if np.any(self.lb[pairs] != 0) or np.any(np.isfinite(self.ub[pairs])):
            raise ValueError("complementarity variables must have bounds [0, inf)")

    @property
    def n(self):
        return self.model.n

    @property
    def m(self):
        return self.model.m

    @property
    def i1(self):
        return np.arange(self.n0, self.n0 + self.p)

    @property
    def i2(self):
        return np.arange(self.n0 + self.p, self.n0 + 2 * self.p)

    def w1(self, w):
        return w[self.n0 : self.n0 + self.p]

    def w2(self, w):
        return w[self.n0 + self.p :]


# ---------------------------------------------------------------------------
# emitters


def _emit_network(fam, sc: ScenarioLayout, rows_p, rows_q):
    """Polar bus balance ``sum flows + load + shunt - generation = 0``."""
    net = sc.net
    nb = net.n_bus
    fam.add(T_SHUNT_P, sc.v.reshape(-1, 1), np.column_stack([net.pd, net.gs]), rows_p)
    fam.add(T_SHUNT_Q, sc.v.reshape(-1, 1), np.column_stack([net.qd, net.bs]), rows_q)
    gb = net.gen_bus[sc.gens]
    fam.linear(rows_p[gb], sc.pg, -1.0)
    fam.linear(rows_q[gb], sc.qg, -1.0)
    on = np.flatnonzero(net.branch_status)
    yff, yft, ytf, ytt = (y[on] for y in branch_admittances(net))
    f, t = net.f_bus[on], net.t_bus[on]
    vf = np.column_stack([sc.v[f], sc.v[t], sc.th[f], sc.th[t]])
    vt = np.column_stack([sc.v[t], sc.v[f], sc.th[t], sc.th[f]])
    fam.add(T_FLOW_P, vf, np.column_stack([yff.real, yft.real, yft.imag]), rows_p[f])
    fam.add(T_FLOW_Q, vf, np.column_stack([yff.imag, yft.real, yft.imag]), rows_q[f])
    fam.add(T_FLOW_P, vt, np.column_stack([ytt.real, ytf.real, ytf.imag]), rows_p[t])
    fam.add(T_FLOW_Q, vt, np.column_stack([ytt.imag, ytf.real, ytf.imag]), rows_q[t])
    assert rows_p.size == nb


def _emit_flow_limits(fam, sc: ScenarioLayout, rows_f, rows_t):
    net = sc.net
    lim = sc.limited
    if lim.size == 0:
        return
    yff, yft, ytf, ytt = (y[lim] for y in branch_admittances(net))
    f, t = net.f_bus[lim], net.t_bus[lim]
    rate2 = net.rate_a[lim] ** 2
    fam.add(T_FLOW_LIMIT, np.column_stack([sc.v[f], sc.v[t], sc.th[f], sc.th[t], sc.s_from]),
            np.column_stack([yff.real, yff.imag, yft.real, yft.imag, rate2]), rows_f)
    fam.add(T_FLOW_LIMIT, np.column_stack([sc.v[t], sc.v[f], sc.th[t], sc.th[f], sc.s_to]),
            np.column_stack([ytt.real, ytt.imag, ytf.real, ytf.imag, rate2]), rows_t)


def emit_agc(fam, sc: ScenarioLayout, rows, link_max, link_min, p0, alpha):
    """Droop recourse as complementarity.

    ``pi+ - pi- - p^k + p^0 + alpha*Delta = 0`` and bound-distance links
    ``z_max = pmax - p^k``, ``z_min = p^k - pmin``; pairs
    ``(pi-, z_max)`` and ``(pi+, z_min)``.  ``p0`` holds either base-case
    variable indices (``("var", idx)``) or fixed values (``("val", x)``).
    """
    net = sc.net
    g = sc.gens
    fam.linear(rows, sc.pi_plus, 1.0)
    fam.linear(rows, sc.pi_minus, -1.0)
    fam.linear(rows, sc.pg, -1.0)
    kind, val = p0
    if kind == "var":
        fam.linear(rows, val, 1.0)
    else:
        fam.const(rows, val)
    fam.linear(rows, sc.delta, alpha[g])
    fam.linear(link_max, sc.z_pmax, 1.0)
    fam.linear(link_max, sc.pg, 1.0)
    fam.const(link_max, -net.pmax[g])
    fam.linear(link_min, sc.z_pmin, 1.0)
    fam.linear(link_min, sc.pg, -1.0)
    fam.const(link_min, net.pmin[g])


def emit_pvpq(fam, sc: ScenarioLayout, rows, link_max, link_min, v0):
    """Voltage-control recourse as complementarity.

    ``nu+ - nu- - v^k_b + v^0_b = 0`` per generator (``b`` its bus),
    ``z_max = qmax - q^k``, ``z_min = q^k - qmin``; pairs ``(nu-, z_max)``
    and ``(nu+, z_min)``.
    """
    net = sc.net
    g = sc.gens
    fam.linear(rows, sc.nu_plus, 1.0)
    fam.linear(rows, sc.nu_minus, -1.0)
    fam.linear(rows, sc.v[net.gen_bus[g]], -1.0)
    kind, val = v0
    if kind == "var":
        fam.linear(rows, val, 1.0)
    else:
        fam.const(rows, val)
    fam.linear(link_max, sc.z_qmax, 1.0)
    fam.linear(link_max, sc.qg, 1.0)
    fam.const(link_max, -net.qmax[g])
    fam.linear(link_min, sc.z_qmin, 1.0)
    fam.linear(link_min, sc.qg, -1.0)
    fam.const(link_min, net.qmin[g])


def _scenario_net(net, contingency):
    return net if contingency is None else contingency.apply(net)


def _check_islands(sc_net, k, allow):
    comps = islands(sc_net)
    if len(comps) > 1 and not allow:
        raise IslandedTopology(k, len(comps))
    return comps


def _build(net, contingencies, alpha, base_fixed=None, allow_islanding=False):
    """Shared assembly for SCOPF (``base_fixed is None``) and screening."""
    on_gen = np.flatnonzero(net.gen_status)
    nets = []
    comps = []
    for k, cont in enumerate([None] + list(contingencies)):
        if base_fixed is not None and k == 0:
            nets.append(None)
            comps.append(None)
            continue
        sn = _scenario_net(net, cont)
        nets.append(sn)
        comps.append(_check_islands(sn, k, allow_islanding))

    var = _Alloc()
    rows = _Alloc()
    scen = []
    # w0 block, scenario by scenario
    for k, (cont, sn) in enumerate(zip([None] + list(contingencies), nets)):
        if sn is None:
            continue
        gens = np.flatnonzero(sn.gen_status)
        lim = np.flatnonzero(sn.branch_status & (sn.rate_a > 0))
        nb = sn.n_bus
        sc = ScenarioLayout(
            k=k, contingency=cont, net=sn, gens=gens,
            v=var.take(nb), th=var.take(nb), pg=var.take(gens.size), qg=var.take(gens.size),
            limited=lim, s_from=var.take(lim.size), s_to=var.take(lim.size),
        )
        if k > 0:
            sc.delta = int(var.take(1)[0])
        sc.n_islands = len(comps[k])
        scen.append(sc)
    n0 = var.n
    # w1 then w2 blocks; per generator the pair order is (pi-, pi+, nu-, nu+)
    w1 = {}
    for sc in scen:
        if sc.k == 0:
            continue
        ng = sc.gens.size
        blk = var.take(4 * ng).reshape(ng, 4)
        w1[sc.k] = blk
        sc.pi_minus, sc.pi_plus, sc.nu_minus, sc.nu_plus = (blk[:, j].copy() for j in range(4))
    p = var.n - n0
    for sc in scen:
        if sc.k == 0:
            continue
        ng = sc.gens.size
        blk = var.take(4 * ng).reshape(ng, 4)
        sc.z_pmax, sc.z_pmin, sc.z_qmax, sc.z_qmin = (blk[:, j].copy() for j in range(4))
    n = var.n

    fam = _Families()
    obj = _Families()
    base = scen[0] if scen[0].k == 0 else None
    degenerate = []
    for sc in scen:
        sn = sc.net
        nb = sn.n_bus
        rp, rq = rows.take(nb), rows.take(nb)
        sc.rows["p_balance"], sc.rows["q_balance"] = rp, rq
        _emit_network(fam, sc, rp, rq)
        # one angle reference per island
        refs = []
        for comp in comps[sc.k]:
            refs.append(sn.ref_bus if sn.ref_bus in comp else int(comp[0]))
        rr = rows.take(len(refs))
        sc.rows["angle_ref"] = rr
        fam.linear(rr, sc.th[np.array(refs)], 1.0)
        rf, rt = rows.take(sc.limited.size), rows.take(sc.limited.size)
        sc.rows["flow_from"], sc.rows["flow_to"] = rf, rt
        _emit_flow_limits(fam, sc, rf, rt)
        if sc.k == 0:
            continue
        ng = sc.gens.size
        ra, ram, rai = rows.take(ng), rows.take(ng), rows.take(ng)
        rv, rvm, rvi = rows.take(ng), rows.take(ng), rows.take(ng)
        sc.rows.update(agc=ra, agc_pmax=ram, agc_pmin=rai, pvpq=rv, pvpq_qmax=rvm, pvpq_qmin=rvi)
        if base is not None:
            pos = np.searchsorted(base.gens, sc.gens)
            p0 = ("var", base.pg[pos])
            v0 = ("var", base.v[net.gen_bus[sc.gens]])
        else:
            p0 = ("val", base_fixed["pg"][sc.gens])
            v0 = ("val", base_fixed["vm"][net.gen_bus[sc.gens]])
        emit_agc(fam, sc, ra, ram, rai, p0, alpha)
        emit_pvpq(fam, sc, rv, rvm, rvi, v0)
        gap = sn.qmax[sc.gens] - sn.qmin[sc.gens]
        for g in sc.gens[gap < DEGENERATE_Q_GAP]:
            degenerate.append((sc.k, int(g)))
    if degenerate:
        warnings.warn(f"reactive limits nearly equal for (scenario, gen) {degenerate}", DegeneratePairWarning)
    if base is not None:
        g = base.gens
        obj.add(T_COST, base.pg.reshape(-1, 1), np.column_stack([net.c2[g], net.c1[g], net.c0[g]]))

    model = ModelFunctions(n, rows.n, obj.build(), fam.build())
    lb = np.full(n, -INF)
    ub = np.full(n, INF)
    w0 = np.zeros(n)
    for sc in scen:
        sn = sc.net
        g = sc.gens
        lb[sc.v], ub[sc.v] = sn.vmin, sn.vmax
        w0[sc.v] = np.clip(1.0, sn.vmin, sn.vmax)
        lb[sc.s_from] = lb[sc.s_to] = 0.0
        if sc.k == 0:
            lb[sc.pg], ub[sc.pg] = sn.pmin[g], sn.pmax[g]
            lb[sc.qg], ub[sc.qg] = sn.qmin[g], sn.qmax[g]
        pmid = 0.5 * (sn.pmin[g] + sn.pmax[g])
        qmid = 0.5 * (sn.qmin[g] + sn.qmax[g])
        if base_fixed is not None:
            pmid = np.clip(base_fixed["pg"][g], sn.pmin[g], sn.pmax[g])
        w0[sc.pg], w0[sc.qg] = pmid, qmid
        if sc.k > 0:
            w0[sc.z_pmax] = sn.pmax[g] - pmid
            w0[sc.z_pmin] = pmid - sn.pmin[g]
            w0[sc.z_qmax] = sn.qmax[g] - qmid
            w0[sc.z_qmin] = qmid - sn.qmin[g]
    lb[n0:] = 0.0
    # flow-limit slacks start at the headroom left by the initial flows
    c0 = model.eval_constraints(w0)
    for sc in scen:
        if sc.limited.size:
            w0[sc.s_from] = np.maximum(-c0[sc.rows["flow_from"]], 0.0)
            w0[sc.s_to] = np.maximum(-c0[sc.rows["flow_to"]], 0.0)
    layout = ScopfLayout(scen, alpha, base_fixed, degenerate)
    return MpccProblem(model, lb, ub, n0, p, w0, layout, name=net.name)


def build_scopf(net: PowerNetwork, contingencies=(), alpha=None, alpha_rule="pmax") -> MpccProblem:
    """AC-SCOPF with droop and PV/PQ recourse for every contingency.

    With no contingencies this is a plain AC-OPF (``p = 0``).  Raises
    :class:`IslandedTopology` when an outage disconnects the network.
    """
    contingencies = list(contingencies)
    for c in contingencies:
        c.validate(net)
    if alpha is None:
        alpha = participation_factors(net, alpha_rule)
    if len(islands(net)) > 1:
        raise IslandedTopology(0, len(islands(net)))
    return _build(net, contingencies, np.asarray(alpha, dtype=float))


def build_screening(net: PowerNetwork, contingency: Contingency, u0, alpha=None, alpha_rule="pmax",
                    allow_islanding=False) -> MpccProblem:
    """Feasibility system of one contingency with the base-case control fixed.

    ``u0`` maps ``"pg"`` to base generator outputs (per generator, per-unit)
    and ``"vm"`` to base bus voltage magnitudes (only generator buses are
    used).  The objective is identically zero.
    """
    contingency.validate(net)
    if alpha is None:
        alpha = participation_factors(net, alpha_rule)
    u0 = {"pg": np.asarray(u0["pg"], dtype=float), "vm": np.asarray(u0["vm"], dtype=float)}
    return _build(net, [contingency], np.asarray(alpha, dtype=float), base_fixed=u0,
                  allow_islanding=allow_islanding)
