import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ncl_scopf.matpower import Contingency, bundled_case, parse_case
from ncl_scopf.ncl import ncl_solve
from ncl_scopf.scopf import (
    DegeneratePairWarning,
    IslandedTopology,
    agc_clip_oracle,
    build_scopf,
    build_screening,
    islands,
    participation_factors,
)
from tests.helpers import interior_point, triangle

CASE9 = bundled_case("case9")


def test_agc_clip_examples():
    assert agc_clip_oracle(1.0, 0.1, 2.0, 0.0, 1.1) == pytest.approx(1.1)
    assert agc_clip_oracle(0.7, 0.3, 0.0, 0.0, 1.0) == pytest.approx(0.7)
    assert agc_clip_oracle(0.5, 0.5, -2.0, 0.2, 1.0) == pytest.approx(0.2)


def test_participation_rules():
    a = participation_factors(CASE9, "pmax")
    assert a.sum() == pytest.approx(1.0)
    assert np.allclose(a, CASE9.pmax / CASE9.pmax.sum())
    assert np.allclose(participation_factors(CASE9, "uniform"), 1 / 3)
    with pytest.raises(ValueError):
        participation_factors(CASE9, "droop")


def test_single_generator_block_counts():
    net = parse_case(triangle())
    base = build_scopf(net)
    one = build_scopf(net, [Contingency("branch", 2)])
    sc = one.layout.scenarios[1]
    assert len(sc.rows["agc"]) == 1
    assert len(sc.rows["agc_pmax"]) + len(sc.rows["agc_pmin"]) == 2
    assert one.p == 4  # two droop pairs plus two voltage pairs
    assert base.p == 0


def _scenario_point(prob, rng):
    """A point with scenario 1 rows satisfied except those under test."""
    return interior_point(prob, rng)


def test_agc_interior_point_feasible():
    prob = build_scopf(CASE9, [Contingency("branch", 5)])
    base, sc = prob.layout.scenarios
    alpha = prob.layout.alpha
    w = interior_point(prob, np.random.default_rng(0))
    g = sc.gens
    w[base.pg] = [0.9, 1.3, 0.9]
    w[sc.delta] = 0.2
    pk = w[base.pg] + alpha[g] * 0.2
    w[sc.pg] = pk
    w[sc.pi_plus] = w[sc.pi_minus] = 0.0
    w[sc.z_pmax] = CASE9.pmax[g] - pk
    w[sc.z_pmin] = pk - CASE9.pmin[g]
    c = prob.model.eval_constraints(w)
    for key in ("agc", "agc_pmax", "agc_pmin"):
        assert np.allclose(c[sc.rows[key]], 0.0, atol=1e-14)


def test_agc_upper_clip():
    prob = build_scopf(CASE9, [Contingency("branch", 5)])
    base, sc = prob.layout.scenarios
    alpha = prob.layout.alpha
    g = sc.gens
    w = interior_point(prob, np.random.default_rng(1))
    p0 = CASE9.pmax[g] - 0.05
    w[base.pg] = p0
    w[sc.delta] = 1.0
    target = p0 + alpha[g] * 1.0
    pk = agc_clip_oracle(p0, alpha[g], 1.0, CASE9.pmin[g], CASE9.pmax[g])
    assert np.all(pk == CASE9.pmax[g])
    w[sc.pg] = pk
    w[sc.pi_minus] = target - pk
    w[sc.pi_plus] = 0.0
    w[sc.z_pmax] = CASE9.pmax[g] - pk
    w[sc.z_pmin] = pk - CASE9.pmin[g]
    c = prob.model.eval_constraints(w)
    assert np.all(w[sc.pi_minus] > 0)
    assert np.allclose(c[np.r_[sc.rows["agc"], sc.rows["agc_pmax"], sc.rows["agc_pmin"]]], 0.0, atol=1e-14)
    assert np.max(np.minimum(w[sc.pi_minus], w[sc.z_pmax])) == 0.0


def test_pvpq_upper_reactive_limit():
    prob = build_scopf(CASE9, [Contingency("branch", 5)])
    base, sc = prob.layout.scenarios
    g = sc.gens
    gb = CASE9.gen_bus[g]
    w = interior_point(prob, np.random.default_rng(2))
    w[base.v[gb]] = 1.05
    w[sc.v[gb]] = 1.02
    w[sc.qg] = CASE9.qmax[g]
    w[sc.nu_minus] = 0.03
    w[sc.nu_plus] = 0.0
    w[sc.z_qmax] = 0.0
    w[sc.z_qmin] = CASE9.qmax[g] - CASE9.qmin[g]
    c = prob.model.eval_constraints(w)
    rows = np.r_[sc.rows["pvpq"], sc.rows["pvpq_qmax"], sc.rows["pvpq_qmin"]]
    assert np.allclose(c[rows], 0.0, atol=1e-14)
    # interior case: same voltage, no deviation needed
    w[sc.v[gb]] = w[base.v[gb]]
    w[sc.nu_minus] = 0.0
    assert np.allclose(prob.model.eval_constraints(w)[sc.rows["pvpq"]], 0.0, atol=1e-14)


def test_degenerate_reactive_pair_flagged():
    net = parse_case(triangle(qmax=20.0, qmin=20.0))
    with pytest.warns(DegeneratePairWarning):
        prob = build_scopf(net, [Contingency("branch", 2)])
    assert prob.layout.degenerate == [(1, 0)]


def test_pair_counts_and_affine_growth():
    assert build_scopf(CASE9).p == 0
    assert build_scopf(CASE9, [Contingency("branch", 5)]).p == 12
    sizes = [build_scopf(CASE9, [Contingency("branch", i) for i in ids])
             for ids in ([], [2], [2, 3], [2, 3, 5])]
    n = np.array([s.n for s in sizes])
    m = np.array([s.m for s in sizes])
    assert np.all(np.diff(n[1:]) == n[2] - n[1]) and np.all(np.diff(m[1:]) == m[2] - m[1])
    # the first contingency also adds the droop variable, so K=0 differs only by the per-scenario width
    assert n[1] - n[0] == n[2] - n[1]


def test_islanding_rejected():
    assert len(islands(Contingency("branch", 1).apply(CASE9))) == 2
    with pytest.raises(IslandedTopology) as exc:
        build_scopf(CASE9, [Contingency("branch", 2), Contingency("branch", 1)])
    assert exc.value.k == 2


def test_pair_members_have_zero_lower_bound():
    prob = build_scopf(CASE9, [Contingency("branch", 5), Contingency("gen", 2)])
    assert np.all(prob.lb[prob.n0 :] == 0.0)
    assert np.all(np.isinf(prob.ub[prob.n0 :]))
    assert prob.p == 12 + 8


def test_generator_outage_removes_recourse():
    prob = build_scopf(CASE9, [Contingency("gen", 3)])
    sc = prob.layout.scenarios[1]
    assert sc.gens.tolist() == [0, 1]
    assert len(sc.rows["agc"]) == 2


def test_base_case_reduction():
    opf = build_scopf(CASE9)
    sc = build_scopf(CASE9, [Contingency("branch", 5)])
    b0, b1 = opf.layout.scenarios[0], sc.layout.scenarios[0]
    rng = np.random.default_rng(5)
    w_opf = interior_point(opf, rng)
    w_sc = interior_point(sc, rng)
    for name in ("v", "th", "pg", "qg", "s_from", "s_to"):
        w_sc[getattr(b1, name)] = w_opf[getattr(b0, name)]
    assert opf.model.eval_objective(w_opf) == sc.model.eval_objective(w_sc)
    c0 = opf.model.eval_constraints(w_opf)
    c1 = sc.model.eval_constraints(w_sc)
    assert np.array_equal(c0[b0.all_rows()], c1[b1.all_rows()])


def test_scenario_separability():
    prob = build_scopf(CASE9, [Contingency("branch", 5), Contingency("branch", 9)])
    J = prob.model.jacobian(interior_point(prob, np.random.default_rng(0))).tocsr()
    base = set(prob.layout.scenarios[0].variables().tolist())
    for sc in prob.layout.scenarios[1:]:
        own = set(sc.variables().tolist())
        cols = set(J[sc.all_rows()].indices.tolist())
        assert cols <= own | base
        assert cols & own


@given(
    st.floats(0.1, 2.0), st.floats(0.01, 1.0), st.floats(-3.0, 3.0),
    st.floats(0.0, 0.5), st.floats(0.6, 2.5),
)
def test_recourse_rows_match_clipping(p0, alpha, delta, pmin, pmax):
    """The clipped response, with its pair variables, satisfies the emitted rows."""
    net = parse_case(triangle())
    prob = build_scopf(net, [Contingency("branch", 2)], alpha=np.array([alpha]))
    base, sc = prob.layout.scenarios
    w = prob.w_init.copy()
    lo, hi = net.pmin[0], net.pmax[0]
    p0 = np.clip(p0, lo, hi)
    pk = float(agc_clip_oracle(p0, alpha, delta, lo, hi))
    w[base.pg] = p0
    w[sc.delta] = delta
    w[sc.pg] = pk
    excess = p0 + alpha * delta - pk
    w[sc.pi_minus] = max(excess, 0.0)
    w[sc.pi_plus] = max(-excess, 0.0)
    w[sc.z_pmax] = hi - pk
    w[sc.z_pmin] = pk - lo
    c = prob.model.eval_constraints(w)
    rows = np.r_[sc.rows["agc"], sc.rows["agc_pmax"], sc.rows["agc_pmin"]]
    assert np.max(np.abs(c[rows])) <= 1e-12
    assert max(min(w[sc.pi_minus][0], w[sc.z_pmax][0]), min(w[sc.pi_plus][0], w[sc.z_pmin][0])) <= 1e-12


def test_screening_problem_shape():
    u0 = {"pg": CASE9.pg0, "vm": CASE9.vm0}
    prob = build_screening(CASE9, Contingency("branch", 5), u0)
    assert len(prob.layout.scenarios) == 1 and prob.layout.scenarios[0].k == 1
    assert prob.model.eval_objective(prob.w_init) == 0.0
    assert np.all(prob.model.gradient(prob.w_init) == 0.0)
    with pytest.raises(IslandedTopology):
        build_screening(CASE9, Contingency("branch", 1), u0)
    isl = build_screening(CASE9, Contingency("branch", 1), u0, allow_islanding=True)
    assert isl.layout.scenarios[0].n_islands == 2


def test_zero_load_screening_feasible():
    net = parse_case(triangle(pd=0.0, qd=0.0, pmin=0.0))
    u0 = {"pg": np.zeros(1), "vm": np.ones(3)}
    for bid in (1, 2, 3):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = ncl_solve(build_screening(net, Contingency("branch", bid), u0))
        assert res.infeasibility <= 1e-10
