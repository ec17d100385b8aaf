"""Command-line front end: ``ncl-scopf {opf,scopf,screen,bench}``.

Exit codes: 0 success, 1 solver failure, 2 input error, 3 infeasible.
Setting ``NCL_LOG_DIR`` writes JSON-lines solver logs into that directory.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ipm import IpmOptions, RegularizationExhausted, jsonl_logger
from .matpower import (
    DegenerateBranch,
    ParseError,
    ValidationError,
    bundled_case,
    load_case,
    load_contingencies,
)
from .mpcc import certify_result
from .ncl import NclParams, ncl_solve
from .scopf import IslandedTopology, agc_clip_oracle, build_scopf, participation_factors
from .screening import (
    NotEnoughFeasible,
    ScreeningReport,
    all_branch_contingencies,
    base_controls,
    screen_all,
    screen_one,
    select_representative,
    select_verified,
)

SCHEMA_VERSION = 1
BENCH_HEADER = ["K", "nvar", "ncon", "iter", "obj", "time_s", "time_per_iter_s"]

EXIT_OK, EXIT_SOLVER, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    case: str
    contingencies: str | None = None
    K: list = field(default_factory=list)
    tol: float = 1e-6
    mu_min: float = 1e-7
    alpha_rule: str = "pmax"
    out: str | None = None
    jobs: int = 1
    verbose: bool = False
    seed: int = 0
    command: str = ""
    verify_selection: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise InputError("--tol must be positive")
        if not self.mu_min < self.tol:
            raise InputError("--mu-min must be smaller than --tol")
        if self.jobs < 1:
            raise InputError("--jobs must be at least 1")


def _log(cfg, msg):
    if cfg.verbose:
        print(msg, file=sys.stderr)


class _Logs:
    """Optional JSON-lines sinks under ``NCL_LOG_DIR``."""

    def __init__(self, cfg, tag):
        self.stack = contextlib.ExitStack()
        self.outer = self.inner = None
        root = os.environ.get("NCL_LOG_DIR")
        if root:
            d = Path(root)
            d.mkdir(parents=True, exist_ok=True)
            self.outer = jsonl_logger(self.stack.enter_context(open(d / f"{tag}.outer.jsonl", "w")))
            if cfg.verbose:
                self.inner = jsonl_logger(self.stack.enter_context(open(d / f"{tag}.inner.jsonl", "w")))

    def close(self):
        self.stack.close()


def _params(cfg, logs=None):
    ipm = IpmOptions(mu_min=cfg.mu_min, log=logs.inner if logs else None)
    return NclParams(eta_star=cfg.tol, omega_star=cfg.tol, ipm=ipm, log=logs.outer if logs else None)


def _load_network(case):
    path = Path(case)
    if path.exists():
        return load_case(path)
    try:
        return bundled_case(case)
    except (FileNotFoundError, KeyError, ModuleNotFoundError) as exc:
        raise InputError(f"case not found: {case}") from exc


def _pu(x):
    return [float(v) for v in np.asarray(x)]


def solution_json(cfg, net, problem, result, elapsed):
    """Solution document (deterministic apart from ``time_s``)."""
    layout = problem.layout
    base = layout.scenarios[0]
    cert = certify_result(problem, result, tol=max(cfg.tol, 1e-6)) if problem.p else None
    doc = {
        "schema_version": SCHEMA_VERSION,
        "solver_version": __version__,
        "case": net.name,
        "status": result.status,
        "objective": float(result.objective),
        "infeasibility": float(result.infeasibility),
        "r_inf": result.r_inf,
        "t_inf": result.t_inf,
        "iterations": {"outer": result.outer_iterations, "inner": result.inner_iterations},
        "base_mva": float(net.base_mva),
        "buses": {"id": [int(b) for b in net.bus_ids], "vm": _pu(result.w[base.v]),
                  "va_deg": _pu(np.degrees(result.w[base.th]))},
        "gens": {"index": [int(g) + 1 for g in base.gens], "pg_mw": _pu(result.w[base.pg] * net.base_mva),
                 "qg_mvar": _pu(result.w[base.qg] * net.base_mva)},
        "contingencies": [],
        "complementarity": {},
        "certificate": cert.to_dict() if cert is not None else None,
        "time_s": elapsed,
    }
    if problem.p:
        w1, w2 = problem.w1(result.w), problem.w2(result.w)
        doc["complementarity"] = {"p": int(problem.p), "max_min_pair": float(np.max(np.minimum(w1, w2)))}
    for sc in layout.scenarios[1:]:
        g = sc.gens
        p0 = result.w[base.pg][np.searchsorted(base.gens, g)]
        ref = agc_clip_oracle(p0, layout.alpha[g], result.w[sc.delta], sc.net.pmin[g], sc.net.pmax[g])
        doc["contingencies"].append({
            "kind": sc.contingency.kind, "id": sc.contingency.id,
            "delta": float(result.w[sc.delta]),
            "pg_mw": _pu(result.w[sc.pg] * net.base_mva),
            "vm": _pu(result.w[sc.v]),
            "agc_error": float(np.max(np.abs(result.w[sc.pg] - ref), initial=0.0)),
        })
    return doc


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")


def _solve(cfg, net, contingencies, tag):
    alpha = participation_factors(net, cfg.alpha_rule)
    problem = build_scopf(net, contingencies, alpha=alpha)
    logs = _Logs(cfg, tag)
    try:
        t0 = time.perf_counter()
        result = ncl_solve(problem, _params(cfg, logs))
        elapsed = time.perf_counter() - t0
    finally:
        logs.close()
    return problem, result, elapsed


def _status_code(result):
    return {"optimal": EXIT_OK, "infeasible": EXIT_INFEASIBLE}.get(result.status, EXIT_SOLVER)


def bench_row(K, problem, result, elapsed):
    it = result.inner_iterations
    return [K, problem.n, problem.m, it, f"{result.objective:.8g}", f"{elapsed:.4f}",
            f"{elapsed / max(it, 1):.6f}"]


def cmd_opf(cfg: RunConfig):
    net = _load_network(cfg.case)
    problem, result, elapsed = _solve(cfg, net, [], f"{net.name}-opf")
    _log(cfg, f"opf {net.name}: {result.status} obj={result.objective:.6f} iters={result.inner_iterations}")
    _write(cfg.out, json.dumps(solution_json(cfg, net, problem, result, elapsed), indent=2))
    return _status_code(result)


def _base_solve(cfg, net):
    problem, result, _ = _solve(cfg, net, [], f"{net.name}-base")
    if result.status != "optimal":
        raise RuntimeError(f"base-case OPF did not converge ({result.status})")
    return problem, result


def _choose_contingencies(cfg, net, K):
    if cfg.contingencies:
        conts = load_contingencies(cfg.contingencies)
        for c in conts:
            c.validate(net)
        return conts[:K] if K is not None else conts
    if not K:
        return []
    problem, result = _base_solve(cfg, net)
    report = screen_all(net, base_controls(problem, result.w), all_branch_contingencies(net),
                        params=_params(cfg), alpha_rule=cfg.alpha_rule, jobs=cfg.jobs)
    if not cfg.verify_selection:
        return select_representative(report, K)

    def accept(c):
        try:
            return _solve(cfg, net, [c], f"{net.name}-verify-{c.kind}{c.id}")[1].status == "optimal"
        except IslandedTopology:
            return False

    chosen, rejected = select_verified(report, K, accept)
    if rejected:
        _log(cfg, "rejected after verification: " + ", ".join(f"{c.kind} {c.id}" for c in rejected))
    return chosen


def cmd_scopf(cfg: RunConfig):
    net = _load_network(cfg.case)
    K = cfg.K[0] if cfg.K else None
    conts = _choose_contingencies(cfg, net, K)
    try:
        problem, result, elapsed = _solve(cfg, net, conts, f"{net.name}-scopf")
    except IslandedTopology as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    doc = solution_json(cfg, net, problem, result, elapsed)
    doc["bench"] = dict(zip(BENCH_HEADER, bench_row(len(conts), problem, result, elapsed)))
    _write(cfg.out, json.dumps(doc, indent=2))
    if result.status == "infeasible":
        print(f"infeasible: objective {result.infeasibility:.6e}", file=sys.stderr)
    return _status_code(result)


def cmd_screen(cfg: RunConfig):
    net = _load_network(cfg.case)
    conts = load_contingencies(cfg.contingencies) if cfg.contingencies else all_branch_contingencies(net)
    for c in conts:
        c.validate(net)
    problem, result = _base_solve(cfg, net)
    u0 = base_controls(problem, result.w)
    params = _params(cfg)
    if cfg.jobs > 1:
        report = screen_all(net, u0, conts, params=params, alpha_rule=cfg.alpha_rule, jobs=cfg.jobs)
    else:
        alpha = participation_factors(net, cfg.alpha_rule)
        records = []
        try:
            for c in conts:
                records.append(screen_one(net, u0, c, params, alpha))
                _log(cfg, f"screen {c.label()}: {records[-1].objective:.3e} {records[-1].status}")
        except KeyboardInterrupt:
            _flush_screen(cfg, ScreeningReport(records, meta={"case": net.name, "partial": True}))
            return 130
        report = ScreeningReport(records, meta={"case": net.name, "n": len(records)})
    _flush_screen(cfg, report)
    return EXIT_OK


def _flush_screen(cfg, report):
    _write(cfg.out, report.to_csv())
    if cfg.out not in (None, "-"):
        Path(cfg.out).with_suffix(".json").write_text(report.to_json() + "\n")


def cmd_bench(cfg: RunConfig):
    net = _load_network(cfg.case)
    Ks = cfg.K or [1, 2, 4]
    if cfg.contingencies:
        pool = load_contingencies(cfg.contingencies)
        for c in pool:
            c.validate(net)
        if max(Ks) > len(pool):
            raise InputError(f"contingency list has {len(pool)} entries, K up to {max(Ks)} requested")
    else:
        pool = _choose_contingencies(cfg, net, max(Ks))
    rows = []
    code = EXIT_OK
    try:
        for K in Ks:
            try:
                problem, result, elapsed = _solve(cfg, net, pool[:K], f"{net.name}-bench-K{K}")
            except IslandedTopology as exc:
                print(f"K={K}: {exc}", file=sys.stderr)
                code = EXIT_INFEASIBLE
                continue
            rows.append(bench_row(K, problem, result, elapsed))
            _log(cfg, f"bench K={K}: {result.status} {rows[-1]}")
            if result.status != "optimal":
                code = max(code, _status_code(result))
    except KeyboardInterrupt:
        code = 130
    _flush_bench(cfg, rows)
    return code


def _flush_bench(cfg, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_HEADER)
    writer.writerows(rows)
    _write(cfg.out, buf.getvalue())


def _parse_K(text):
    try:
        return [int(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad K list: {text}") from exc


def build_parser():
    parser = argparse.ArgumentParser(prog="ncl-scopf", description="AC-SCOPF via NCL on MPCC formulations")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("opf", "solve the base-case OPF"), ("scopf", "solve the corrective SCOPF"),
                           ("screen", "rank contingencies by infeasibility"),
                           ("bench", "SCOPF sweep over K")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--case", required=True, help="MATPOWER .m file or bundled case name")
        p.add_argument("--contingencies", help="JSON list of {kind, id} (1-based ids)")
        p.add_argument("--K", type=_parse_K, default=[], help="number of contingencies (bench: comma list)")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--mu-min", type=float, default=1e-7)
        p.add_argument("--alpha-rule", choices=["uniform", "pmax"], default="pmax")
        p.add_argument("--out", help="output file (default stdout)")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", action="store_true")
        p.add_argument("--no-verify", dest="verify_selection", action="store_false",
                       help="take screened contingencies without a confirming SCOPF solve")
    return parser


COMMANDS = {"opf": cmd_opf, "scopf": cmd_scopf, "screen": cmd_screen, "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig(case=args.case, contingencies=args.contingencies, K=args.K, tol=args.tol,
                        mu_min=args.mu_min, alpha_rule=args.alpha_rule, out=args.out, jobs=args.jobs,
                        verbose=args.verbose, seed=args.seed, command=args.command,
                        verify_selection=args.verify_selection)
        return COMMANDS[args.command](cfg)
    except ParseError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ValidationError, DegenerateBranch, FileNotFoundError, json.JSONDecodeError,
            NotEnoughFeasible, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RegularizationExhausted, RuntimeError, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
