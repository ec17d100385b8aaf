import csv
import io
import json
import math

import numpy as np
import pytest

import ncl_scopf.screening as scr
from ncl_scopf.matpower import Contingency, bundled_case, parse_case
from ncl_scopf.ncl import ncl_solve
from ncl_scopf.scopf import build_scopf
from ncl_scopf.screening import (
    NotEnoughFeasible,
    ScreeningRecord,
    ScreeningReport,
    all_branch_contingencies,
    base_controls,
    screen_all,
    screen_one,
    select_representative,
    select_verified,
)
from tests.helpers import triangle


@pytest.fixture(scope="module")
def case9():
    net = bundled_case("case9")
    prob = build_scopf(net)
    return net, base_controls(prob, ncl_solve(prob).w)


def report(*recs):
    return ScreeningReport([ScreeningRecord(i, "branch", obj, status, 10, islands=isl)
                            for i, obj, status, isl in recs])


def test_zero_load_all_feasible():
    net = parse_case(triangle(pd=0.0, qd=0.0, pmin=0.0))
    rep = screen_all(net, {"pg": np.zeros(1), "vm": np.ones(3)}, all_branch_contingencies(net))
    assert all(r.objective <= 1e-10 and r.status == "feasible" for r in rep.records)


def test_islanded_generator_is_infeasible(case9):
    net, u0 = case9
    rec = screen_one(net, u0, Contingency("branch", 1))
    assert rec.status == "islanded" and rec.islands == 2
    assert rec.ncl_status == "infeasible"
    # the isolated generator must still produce pmin: |r|^2 >= pmin^2 / 2
    assert rec.objective >= 0.5 * net.pmin[0] ** 2
    assert rec.structural()


def test_redundant_line_feasible(case9):
    net, u0 = case9
    rec = screen_one(net, u0, Contingency("branch", 5))
    assert rec.status == "feasible" and rec.objective <= 1e-8


def test_rerun_identical_and_parallel(case9):
    net, u0 = case9
    conts = [Contingency("branch", i) for i in (1, 3, 5, 9)]
    a = screen_all(net, u0, conts)
    b = screen_all(net, u0, conts)
    c = screen_all(net, u0, list(reversed(conts)), jobs=2)
    key = [(r.id, r.objective, r.status, r.iters) for r in a.ranking]
    assert key == [(r.id, r.objective, r.status, r.iters) for r in b.ranking]
    assert key == [(r.id, r.objective, r.status, r.iters) for r in c.ranking]
    objs = [r.objective for r in a.ranking]
    assert objs == sorted(objs, reverse=True)


def test_failures_recorded_not_raised(case9, monkeypatch):
    net, u0 = case9

    def boom(*a, **k):
        raise RuntimeError("solver blew up")

    monkeypatch.setattr(scr, "ncl_solve", boom)
    rep = screen_all(net, u0, [Contingency("branch", 5), Contingency("branch", 6)])
    assert [r.status for r in rep.records] == ["failed", "failed"]
    assert all(math.isnan(r.objective) and "blew up" in r.error for r in rep.records)


def test_invalid_contingency_rejected(case9):
    net, u0 = case9
    with pytest.raises(ValueError):
        screen_all(net, u0, [Contingency("branch", 42)])


def test_select_top_k():
    rep = report((1, 1e-9, "feasible", 1), (2, 5e-9, "feasible", 1), (3, 2e-10, "feasible", 1))
    assert [c.id for c in select_representative(rep, 2)] == [2, 1]


def test_select_excludes_structural():
    rep = report((1, 1e-9, "feasible", 1), (2, 0.4, "islanded", 2), (3, 0.05, "infeasible", 1),
                 (4, 1e-4, "marginal", 1))
    assert [c.id for c in select_representative(rep, 2)] == [4, 1]
    with pytest.raises(NotEnoughFeasible):
        select_representative(rep, 3)


def test_select_all_feasible_keeps_order():
    rep = report((5, 3e-9, "feasible", 1), (2, 1e-9, "feasible", 1), (7, 2e-9, "feasible", 1))
    assert [c.id for c in select_representative(rep, 3)] == [5, 7, 2]


def test_select_verified_skips_rejected():
    rep = report((1, 1e-9, "feasible", 1), (2, 5e-3, "marginal", 1), (3, 1e-4, "marginal", 1),
                 (4, 0.4, "islanded", 2))
    seen = []

    def accept(c):
        seen.append(c.id)
        return c.id != 2

    chosen, rejected = select_verified(rep, 2, accept)
    assert [c.id for c in chosen] == [3, 1] and [c.id for c in rejected] == [2]
    assert seen == [2, 3, 1]
    with pytest.raises(NotEnoughFeasible):
        select_verified(rep, 3, accept)


def test_ranking_ties_and_nan():
    rep = ScreeningReport([
        ScreeningRecord(3, "gen", 0.1, "infeasible", 1),
        ScreeningRecord(2, "branch", 0.1, "infeasible", 1),
        ScreeningRecord(1, "branch", math.nan, "failed", 0),
        ScreeningRecord(4, "branch", 0.2, "infeasible", 1),
    ])
    assert [(r.kind, r.id) for r in rep.ranking] == [("branch", 4), ("branch", 2), ("gen", 3), ("branch", 1)]


def test_csv_and_json():
    rep = report((1, 1e-9, "feasible", 1), (2, 0.4, "islanded", 2))
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["id", "kind", "objective", "status", "iters"]
    assert rows[1][0] == "2" and rows[1][3] == "islanded"
    data = json.loads(rep.to_json())
    assert [r["id"] for r in data["records"]] == [2, 1]
    assert data["feas_tol"] == 1e-8


def test_feasible_entries_under_tolerance(case9):
    net, u0 = case9
    rep = screen_all(net, u0, all_branch_contingencies(net))
    for r in rep.feasible():
        assert r.objective <= rep.feas_tol
    assert {r.id for r in rep.records if r.status == "islanded"} == {1, 4, 7}
