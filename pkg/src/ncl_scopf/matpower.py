"""MATPOWER case files: parsing, per-unit network model, branch two-ports."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "PowerNetwork",
    "Contingency",
    "ParseError",
    "ValidationError",
    "DegenerateBranch",
    "parse_case",
    "load_case",
    "bundled_case",
    "to_matpower",
    "to_json",
    "branch_admittances",
    "load_contingencies",
]

PQ, PV, REF = 1, 2, 3

_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 5}


class ParseError(ValueError):
    def __init__(self, line, reason):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")
        self.line = line
        self.reason = reason


class ValidationError(ValueError):
    pass


class DegenerateBranch(ValueError):
    pass


def _ro(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Network data in per-unit on ``base_mva``; angles in radians.

    Out-of-service elements are kept, with ``*_status`` set to False.
    Generator costs are ``c2 p^2 + c1 p + c0`` with ``p`` in per-unit.
    ``raw`` holds the source MATPOWER matrices for lossless serialization.
    """

    name: str
    base_mva: float
    bus_ids: np.ndarray
    bus_type: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    vm0: np.ndarray
    va0: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    rate_a: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    branch_status: np.ndarray
    gen_bus: np.ndarray
    pg0: np.ndarray
    qg0: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    vg: np.ndarray
    gen_status: np.ndarray
    c2: np.ndarray
    c1: np.ndarray
    c0: np.ndarray
    raw: dict

    @property
    def n_bus(self):
        return self.bus_ids.size

    @property
    def n_branch(self):
        return self.f_bus.size

    @property
    def n_gen(self):
        return self.gen_bus.size

    @property
    def ref_bus(self):
        return int(np.flatnonzero(self.bus_type == REF)[0])

    def __eq__(self, other):
        if not isinstance(other, PowerNetwork):
            return NotImplemented
        if self.name != other.name or self.base_mva != other.base_mva:
            return False
        for k in self.__dataclass_fields__:
            if k in ("name", "base_mva", "raw"):
                continue
            a, b = getattr(self, k), getattr(other, k)
            if a.shape != b.shape or not np.array_equal(a, b):
                return False
        return True

    __hash__ = None

    def with_status(self, branch_status=None, gen_status=None):
        raw = dict(self.raw)
        kw = {}
        if branch_status is not None:
            kw["branch_status"] = _ro(np.asarray(branch_status, dtype=bool))
            br = raw["branch"].copy()
            br[:, 10] = kw["branch_status"].astype(float)
            raw["branch"] = _ro(br)
        if gen_status is not None:
            kw["gen_status"] = _ro(np.asarray(gen_status, dtype=bool))
            g = raw["gen"].copy()
            g[:, 7] = kw["gen_status"].astype(float)
            raw["gen"] = _ro(g)
        return replace(self, raw=raw, **kw)


@dataclass(frozen=True)
class Contingency:
    """Outage of one element.  ``id`` is the 1-based row of the element in
    the case file (MATPOWER numbering)."""

    kind: str
    id: int

    def __post_init__(self):
        aliases = {"branch-outage": "branch", "line": "branch", "generator-outage": "gen", "generator": "gen"}
        kind = aliases.get(self.kind, self.kind)
        if kind not in ("branch", "gen"):
            raise ValueError(f"unknown contingency kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "id", int(self.id))

    @property
    def index(self):
        return self.id - 1

    def validate(self, net: PowerNetwork):
        if self.kind == "branch":
            if not 1 <= self.id <= net.n_branch or not net.branch_status[self.index]:
                raise ValidationError(f"branch {self.id} does not exist or is out of service")
        else:
            if not 1 <= self.id <= net.n_gen or not net.gen_status[self.index]:
                raise ValidationError(f"generator {self.id} does not exist or is out of service")

    def apply(self, net: PowerNetwork) -> PowerNetwork:
        self.validate(net)
        if self.kind == "branch":
            st = net.branch_status.copy()
            st[self.index] = False
            return net.with_status(branch_status=st)
        st = net.gen_status.copy()
        st[self.index] = False
        return net.with_status(gen_status=st)

    def label(self):
        return f"{self.kind}:{self.id}"


def load_contingencies(path_or_text):
    """Read a JSON array of ``{"kind": ..., "id": ...}`` records."""
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and not path_or_text.lstrip().startswith("[")):
        text = Path(path_or_text).read_text()
    return [Contingency(d["kind"], d["id"]) for d in json.loads(text)]


# ---------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line):
    out, in_str = [], False
    for ch in line:
        if ch == "'":
            in_str = not in_str
        elif ch == "%" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def _parse_row(text, lineno):
    toks = [t for t in re.split(r"[\s,]+", text.strip()) if t]
    try:
        return [float(t) for t in toks]
    except ValueError:
        bad = next(t for t in toks if not _is_number(t))
        raise ParseError(lineno, f"non-numeric entry {bad!r}") from None


def _is_number(t):
    try:
        float(t)
        return True
    except ValueError:
        return False


def _read_blocks(text):
    scalars, matrices, line_of = {}, {}, {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        body = _strip_comment(lines[i])
        i += 1
        m = _ASSIGN.match(body)
        if not m:
            continue
        key, rhs = m.group(1), m.group(2).strip()
        if not rhs.startswith("["):
            val = rhs.rstrip(";").strip()
            if val.startswith("'"):
                scalars[key] = val.strip("'")
            else:
                try:
                    scalars[key] = float(val)
                except ValueError:
                    raise ParseError(lineno, f"cannot read value of mpc.{key}") from None
            continue
        line_of[key] = lineno
        rows, seg, seg_line = [], rhs[1:], lineno
        while True:
            end = seg.find("]")
            for part in (seg if end < 0 else seg[:end]).split(";"):
                if part.strip():
                    rows.append((_parse_row(part, seg_line), seg_line))
            if end >= 0:
                break
            if i >= len(lines):
                raise ParseError(line_of[key], f"unterminated matrix mpc.{key}")
            seg, seg_line = _strip_comment(lines[i]), i + 1
            i += 1
        if rows:
            width = len(rows[0][0])
            for r, ln in rows:
                if len(r) != width:
                    raise ParseError(ln, f"row of mpc.{key} has {len(r)} columns, expected {width}")
            matrices[key] = np.array([r for r, _ in rows])
        else:
            matrices[key] = np.zeros((0, _MIN_COLS.get(key, 0)))
    return scalars, matrices, line_of


def parse_case(text, name="case") -> PowerNetwork:
    """Parse MATPOWER case text into a validated :class:`PowerNetwork`."""
    scalars, mats, line_of = _read_blocks(text)
    m = re.search(r"function\s+mpc\s*=\s*(\w+)", text)
    if m:
        name = m.group(1)
    if "baseMVA" not in scalars:
        raise ParseError(None, "missing mpc.baseMVA")
    for key in ("bus", "gen", "branch", "gencost"):
        if key not in mats:
            raise ParseError(None, f"missing mpc.{key}")
        if mats[key].shape[0] and mats[key].shape[1] < _MIN_COLS[key]:
            raise ParseError(line_of[key], f"mpc.{key} needs at least {_MIN_COLS[key]} columns")
    base = float(scalars["baseMVA"])
    bus, gen, branch, gencost = mats["bus"], mats["gen"], mats["branch"], mats["gencost"]

    ids = bus[:, 0].astype(np.int64)
    if len(set(ids.tolist())) != ids.size:
        raise ValidationError("duplicate bus ids")
    pos = {b: k for k, b in enumerate(ids.tolist())}
    btype = bus[:, 1].astype(np.int64)
    if np.sum(btype == REF) != 1:
        raise ValidationError(f"expected exactly one reference bus, found {int(np.sum(btype == REF))}")

    def idx(col, what):
        try:
            return np.array([pos[int(b)] for b in col], dtype=np.int64)
        except KeyError as e:
            raise ValidationError(f"{what} references unknown bus {e.args[0]}") from None

    f_bus = idx(branch[:, 0], "branch")
    t_bus = idx(branch[:, 1], "branch")
    gen_bus = idx(gen[:, 0], "generator")

    ng = gen.shape[0]
    if gencost.shape[0] < ng:
        raise ValidationError("mpc.gencost has fewer rows than mpc.gen")
    c2, c1, c0 = np.zeros(ng), np.zeros(ng), np.zeros(ng)
    for g in range(ng):
        row = gencost[g]
        model, ncoef = int(row[0]), int(row[3])
        if model != 2:
            raise ValidationError(f"generator {g + 1}: only polynomial costs (model 2) are supported")
        if ncoef > 3:
            raise ValidationError(f"generator {g + 1}: cost polynomial degree > 2 is not supported")
        coef = list(row[4 : 4 + ncoef])
        coef = [0.0] * (3 - ncoef) + coef
        # $/h with P in MW  ->  $/h with p in per-unit
        c2[g], c1[g], c0[g] = coef[0] * base**2, coef[1] * base, coef[2]

    tap = branch[:, 8].copy()
    tap[tap == 0] = 1.0
    br_status = branch[:, 10] > 0
    gen_status = gen[:, 7] > 0
    pmin, pmax = gen[:, 9] / base, gen[:, 8] / base
    qmin, qmax = gen[:, 4] / base, gen[:, 3] / base
    bad = gen_status & ((pmin > pmax) | (qmin > qmax))
    if np.any(bad):
        raise ValidationError(f"generator {int(np.flatnonzero(bad)[0]) + 1} has inverted limits")
    raw = {k: _ro(v) for k, v in (("bus", bus), ("gen", gen), ("branch", branch), ("gencost", gencost))}

    return PowerNetwork(
        name=name,
        base_mva=base,
        bus_ids=_ro(ids),
        bus_type=_ro(btype),
        pd=_ro(bus[:, 2] / base),
        qd=_ro(bus[:, 3] / base),
        gs=_ro(bus[:, 4] / base),
        bs=_ro(bus[:, 5] / base),
        vmin=_ro(bus[:, 12]),
        vmax=_ro(bus[:, 11]),
        vm0=_ro(bus[:, 7]),
        va0=_ro(np.deg2rad(bus[:, 8])),
        f_bus=_ro(f_bus),
        t_bus=_ro(t_bus),
        r=_ro(branch[:, 2]),
        x=_ro(branch[:, 3]),
        b=_ro(branch[:, 4]),
        rate_a=_ro(branch[:, 5] / base),
        tap=_ro(tap),
        shift=_ro(np.deg2rad(branch[:, 9])),
        branch_status=_ro(br_status),
        gen_bus=_ro(gen_bus),
        pg0=_ro(gen[:, 1] / base),
        qg0=_ro(gen[:, 2] / base),
        pmin=_ro(pmin),
        pmax=_ro(pmax),
        qmin=_ro(qmin),
        qmax=_ro(qmax),
        vg=_ro(gen[:, 5]),
        gen_status=_ro(gen_status),
        c2=_ro(c2),
        c1=_ro(c1),
        c0=_ro(c0),
        raw=raw,
    )


def load_case(path) -> PowerNetwork:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def bundled_case(name) -> PowerNetwork:
    """Load one of the cases shipped with the package (case9, case14, case30, case118)."""
    text = resources.files("ncl_scopf").joinpath("data", "cases", f"{name}.m").read_text()
    return parse_case(text, name=name)


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def to_matpower(net: PowerNetwork) -> str:
    lines = [f"function mpc = {net.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(net.base_mva)};"]
    for key in ("bus", "gen", "branch", "gencost"):
        lines.append(f"mpc.{key} = [")
        for row in net.raw[key]:
            lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
        lines.append("];")
    return "\n".join(lines) + "\n"


def to_json(net: PowerNetwork, indent=None) -> str:
    """Canonical JSON dump of the per-unit model (sorted keys)."""
    d = {"name": net.name, "base_mva": net.base_mva}
    for k in net.__dataclass_fields__:
        if k in ("name", "base_mva", "raw"):
            continue
        a = getattr(net, k)
        d[k] = a.tolist()
    return json.dumps(d, sort_keys=True, indent=indent)


def branch_admittances(net: PowerNetwork):
    """Two-port admittances ``(yff, yft, ytf, ytt)`` of every branch.

    Series admittance ``1/(r+jx)``, half of the line charging at each end,
    off-nominal tap ``tap * exp(j*shift)`` on the from side.
    """
    z = net.r + 1j * net.x
    if np.any(z == 0):
        raise DegenerateBranch(f"branch {int(np.flatnonzero(z == 0)[0]) + 1} has r = x = 0")
    ys = 1.0 / z
    a = net.tap * np.exp(1j * net.shift)
    ytt = ys + 0.5j * net.b
    yff = ytt / (a * np.conj(a))
    yft = -ys / np.conj(a)
    ytf = -ys / a
    return yff, yft, ytf, ytt
