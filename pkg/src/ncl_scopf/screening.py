"""Contingency screening.

With the base-case controls fixed, each contingency's post-outage system
(network equations plus droop and PV/PQ recourse) is solved by NCL with a
zero objective.  The attained ``|r|^2 + |t|^2`` says how far the
contingency is from being feasible; sorting by it ranks contingencies from
hardest to easiest.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .matpower import Contingency, PowerNetwork
from .ncl import NclParams, ncl_solve
from .scopf import build_screening, participation_factors

__all__ = [
    "FEAS_TOL",
    "STRUCTURAL_CAP",
    "NotEnoughFeasible",
    "ScreeningRecord",
    "ScreeningReport",
    "base_controls",
    "all_branch_contingencies",
    "screen_one",
    "screen_all",
    "select_representative",
    "select_verified",
]

FEAS_TOL = 1e-8
STRUCTURAL_CAP = 1e-2


class NotEnoughFeasible(ValueError):
    pass


@dataclass
class ScreeningRecord:
    id: int
    kind: str
    objective: float
    status: str
    iters: int
    ncl_status: str = ""
    outer: int = 0
    islands: int = 1
    time_s: float = 0.0
    error: str | None = None

    @property
    def contingency(self):
        return Contingency(self.kind, self.id)

    def structural(self, cap=STRUCTURAL_CAP):
        return self.islands > 1 or not math.isfinite(self.objective) or self.objective > cap


@dataclass
class ScreeningReport:
    records: list
    feas_tol: float = FEAS_TOL
    cap: float = STRUCTURAL_CAP
    meta: dict = field(default_factory=dict)

    @property
    def ranking(self):
        """Records by nonincreasing objective (failed solves last); ties by kind, id."""
        def key(rec):
            obj = rec.objective if math.isfinite(rec.objective) else -math.inf
            return (-obj, rec.kind, rec.id)

        return sorted(self.records, key=key)

    def feasible(self):
        return [r for r in self.ranking if r.objective <= self.feas_tol]

    def to_csv(self, stream=None):
        out = stream or io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["id", "kind", "objective", "status", "iters"])
        for r in self.ranking:
            writer.writerow([r.id, r.kind, f"{r.objective:.6e}", r.status, r.iters])
        return out.getvalue() if stream is None else None

    def to_json(self):
        return json.dumps(
            {"feas_tol": self.feas_tol, "cap": self.cap, "meta": self.meta,
             "records": [asdict(r) for r in self.ranking]},
            indent=2, sort_keys=True,
        )


def base_controls(problem, w):
    """Generator outputs and bus voltages of the base case in ``w``."""
    sc = problem.layout.scenarios[0]
    net = sc.net
    pg = np.zeros(net.n_gen)
    pg[sc.gens] = w[sc.pg]
    return {"pg": pg, "vm": np.asarray(w[sc.v], dtype=float).copy()}


def all_branch_contingencies(net: PowerNetwork):
    return [Contingency("branch", i + 1) for i in np.flatnonzero(net.branch_status)]


def _classify(objective, n_islands, feas_tol, cap):
    if not math.isfinite(objective):
        return "failed"
    if n_islands > 1:
        return "islanded"
    if objective <= feas_tol:
        return "feasible"
    return "marginal" if objective <= cap else "infeasible"


def screen_one(net, u0, contingency, params=None, alpha=None, feas_tol=FEAS_TOL, cap=STRUCTURAL_CAP):
    """Screen a single contingency; never raises for solver trouble."""
    params = params or NclParams()
    t0 = time.perf_counter()
    try:
        problem = build_screening(net, contingency, u0, alpha=alpha, allow_islanding=True)
        n_isl = problem.layout.scenarios[-1].n_islands
        res = ncl_solve(problem, params)
        obj = res.infeasibility
        rec = ScreeningRecord(contingency.id, contingency.kind, obj, _classify(obj, n_isl, feas_tol, cap),
                              res.inner_iterations, res.status, res.outer_iterations, n_isl)
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        rec = ScreeningRecord(contingency.id, contingency.kind, math.nan, "failed", 0, "error",
                              error=f"{type(exc).__name__}: {exc}")
    rec.time_s = time.perf_counter() - t0
    return rec


def _screen_task(args):
    return screen_one(*args)


def screen_all(net, u0, contingencies, params=None, alpha=None, alpha_rule="pmax", jobs=1,
               feas_tol=FEAS_TOL, cap=STRUCTURAL_CAP):
    """Screen every contingency and return a :class:`ScreeningReport`.

    Per-contingency failures are recorded with status ``failed``.  With
    ``jobs > 1`` solves run in worker processes; the report does not depend
    on completion order.
    """
    contingencies = list(contingencies)
    for c in contingencies:
        c.validate(net)
    if alpha is None:
        alpha = participation_factors(net, alpha_rule)
    tasks = [(net, u0, c, params, alpha, feas_tol, cap) for c in contingencies]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_screen_task, tasks))
    else:
        records = [_screen_task(t) for t in tasks]
    return ScreeningReport(records, feas_tol, cap, {"case": net.name, "n": len(records)})


def select_representative(report: ScreeningReport, K):
    """The ``K`` highest-objective contingencies that are not structurally infeasible."""
    pool = [r for r in report.ranking if not r.structural(report.cap)]
    if K > len(pool):
        raise NotEnoughFeasible(f"asked for {K} contingencies, only {len(pool)} are not structurally infeasible")
    return [r.contingency for r in pool[:K]]


def select_verified(report: ScreeningReport, K, accept):
    """Like :func:`select_representative`, but each candidate must pass ``accept(contingency)``.

    Candidates are tried hardest first.  ``accept`` is typically a full
    single-contingency SCOPF solve, which catches marginal entries whose
    residual survives even when the base controls are free to move.
    Returns ``(selected, rejected)``.
    """
    pool = [r for r in report.ranking if not r.structural(report.cap)]
    chosen, rejected = [], []
    for rec in pool:
        if len(chosen) == K:
            break
        (chosen if accept(rec.contingency) else rejected).append(rec.contingency)
    if len(chosen) < K:
        raise NotEnoughFeasible(f"asked for {K} contingencies, only {len(chosen)} passed verification")
    return chosen, rejected
