"""Expression templates with exact first and second derivatives.

A model is a set of *families*: one expression template (written once, over
variable and parameter slots) instantiated for many index tuples.  Each
template is differentiated symbolically a single time; evaluation then runs
vectorized over all of its instances.  Constraint families add their values
into rows of ``c(w)``, so a row may collect terms from several families
(e.g. the branch flows entering a bus balance).

``min``/``max`` and other nonsmooth atoms are deliberately absent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .sparse import SparseSym

__all__ = [
    "Expr",
    "Template",
    "Family",
    "ModelFunctions",
    "DomainError",
    "sin",
    "cos",
    "fd_check",
    "FDReport",
]

DIV_EPS = 1e-14


class DomainError(ArithmeticError):
    def __init__(self, template, instance, reason):
        super().__init__(f"{reason} in template {template!r}, instance {instance}")
        self.template = template
        self.instance = instance


class Expr:
    """Node of an expression DAG.

    ``op`` is one of ``var``, ``par``, ``const``, ``add``, ``mul``, ``div``,
    ``pow``, ``neg``, ``sin``, ``cos``.  Nodes are built through operator
    overloading and light constant folding, so structurally zero
    derivatives come out as the literal constant 0.
    """

    __slots__ = ("op", "args", "value")
    __array_priority__ = 100

    def __init__(self, op, args=(), value=None):
        self.op = op
        self.args = args
        self.value = value

    def __repr__(self):
        if self.op == "var":
            return f"x{self.value}"
        if self.op == "par":
            return f"p{self.value}"
        if self.op == "const":
            return repr(self.value)
        if self.op == "pow":
            return f"({self.args[0]!r})**{self.value}"
        return f"{self.op}({', '.join(map(repr, self.args))})"

    def is_const(self, v=None):
        return self.op == "const" and (v is None or self.value == v)

    def __add__(self, other):
        return _add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other)))

    def __rsub__(self, other):
        return _add(_wrap(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, k):
        if isinstance(k, Expr):
            raise TypeError("only constant exponents are supported")
        return _pow(self, float(k))


def _wrap(x):
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Expr("const", value=float(x))
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


def _add(a, b):
    if a.is_const() and b.is_const():
        return _wrap(a.value + b.value)
    if a.is_const(0.0):
        return b
    if b.is_const(0.0):
        return a
    return Expr("add", (a, b))


def _neg(a):
    if a.is_const():
        return _wrap(-a.value)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def _mul(a, b):
    if a.is_const() and b.is_const():
        return _wrap(a.value * b.value)
    if a.is_const(0.0) or b.is_const(0.0):
        return _wrap(0.0)
    if a.is_const(1.0):
        return b
    if b.is_const(1.0):
        return a
    if a.is_const(-1.0):
        return _neg(b)
    if b.is_const(-1.0):
        return _neg(a)
    return Expr("mul", (a, b))


def _div(a, b):
    if b.is_const(0.0):
        raise ZeroDivisionError("division by the constant 0")
    if a.is_const(0.0):
        return a
    if b.is_const(1.0):
        return a
    if a.is_const() and b.is_const():
        return _wrap(a.value / b.value)
    return Expr("div", (a, b))


def _pow(a, k):
    if k == 0.0:
        return _wrap(1.0)
    if k == 1.0:
        return a
    if a.is_const():
        return _wrap(a.value**k)
    return Expr("pow", (a,), k)


def sin(a):
    a = _wrap(a)
    if a.is_const():
        return _wrap(math.sin(a.value))
    return Expr("sin", (a,))


def cos(a):
    a = _wrap(a)
    if a.is_const():
        return _wrap(math.cos(a.value))
    return Expr("cos", (a,))


def _diff(e, slot, memo):
    key = id(e)
    if key in memo:
        return memo[key]
    op = e.op
    if op == "var":
        d = _wrap(1.0 if e.value == slot else 0.0)
    elif op in ("par", "const"):
        d = _wrap(0.0)
    elif op == "add":
        d = _add(_diff(e.args[0], slot, memo), _diff(e.args[1], slot, memo))
    elif op == "neg":
        d = _neg(_diff(e.args[0], slot, memo))
    elif op == "mul":
        a, b = e.args
        d = _add(_mul(_diff(a, slot, memo), b), _mul(a, _diff(b, slot, memo)))
    elif op == "div":
        a, b = e.args
        da, db = _diff(a, slot, memo), _diff(b, slot, memo)
        d = _div(_add(_mul(da, b), _neg(_mul(a, db))), _pow(b, 2.0))
    elif op == "pow":
        (a,) = e.args
        d = _mul(_mul(_wrap(e.value), _pow(a, e.value - 1.0)), _diff(a, slot, memo))
    elif op == "sin":
        d = _mul(cos(e.args[0]), _diff(e.args[0], slot, memo))
    elif op == "cos":
        d = _neg(_mul(sin(e.args[0]), _diff(e.args[0], slot, memo)))
    else:  # pragma: no cover
        raise ValueError(op)
    memo[key] = d
    return d


def _evaluate(exprs, X, P, name):
    """Evaluate several expressions sharing one memo; returns list of arrays."""
    n_inst = X.shape[0]
    memo = {}

    def ev(e):
        key = id(e)
        if key in memo:
            return memo[key]
        op = e.op
        if op == "var":
            v = X[:, e.value]
        elif op == "par":
            v = P[:, e.value]
        elif op == "const":
            v = e.value
        elif op == "add":
            v = ev(e.args[0]) + ev(e.args[1])
        elif op == "neg":
            v = -ev(e.args[0])
        elif op == "mul":
            v = ev(e.args[0]) * ev(e.args[1])
        elif op == "div":
            den = ev(e.args[1])
            small = np.abs(den) < DIV_EPS
            if np.any(small):
                bad = int(np.argmax(np.broadcast_to(small, (n_inst,))))
                raise DomainError(name, bad, "division by ~0")
            v = ev(e.args[0]) / den
        elif op == "pow":
            base = ev(e.args[0])
            k = e.value
            if not float(k).is_integer():
                neg = np.asarray(base) < 0 if k > 0 else np.asarray(base) <= 0
                if np.any(neg):
                    bad = int(np.argmax(np.broadcast_to(neg, (n_inst,))))
                    raise DomainError(name, bad, "non-integer power of a nonpositive base")
            elif k < 0 and np.any(np.abs(base) < DIV_EPS):
                bad = int(np.argmax(np.broadcast_to(np.abs(base) < DIV_EPS, (n_inst,))))
                raise DomainError(name, bad, "negative power of ~0")
            v = base**k
        elif op == "sin":
            v = np.sin(ev(e.args[0]))
        elif op == "cos":
            v = np.cos(ev(e.args[0]))
        else:  # pragma: no cover
            raise ValueError(op)
        memo[key] = v
        return v

    return [np.broadcast_to(ev(e), (n_inst,)) for e in exprs]


class Template:
    """An expression over ``nvar`` variable slots and ``npar`` parameter slots.

    ``build`` receives the slot lists ``(x, p)`` and returns an :class:`Expr`
    (or a number).  Gradient and lower-triangle Hessian expressions are
    derived once, at construction.
    """

    def __init__(self, name, nvar, npar, build):
        self.name = name
        self.nvar = nvar
        self.npar = npar
        x = [Expr("var", value=i) for i in range(nvar)]
        p = [Expr("par", value=i) for i in range(npar)]
        self.expr = _wrap(build(x, p))
        self.grad = [_diff(self.expr, a, {}) for a in range(nvar)]
        self.grad_slots = [a for a in range(nvar) if not self.grad[a].is_const(0.0)]
        hess = {}
        for a in self.grad_slots:
            for b in range(a + 1):
                h = _diff(self.grad[a], b, {})
                if not h.is_const(0.0):
                    hess[(a, b)] = h
        self.hess = hess
        self.hess_slots = list(hess)

    def __repr__(self):
        return f"Template({self.name!r}, nvar={self.nvar}, npar={self.npar})"


@dataclass
class Family:
    """A template instantiated over ``I`` index tuples.

    ``vars`` is ``(I, nvar)`` global variable indices, ``params`` is
    ``(I, npar)``.  For constraint families ``rows`` gives the target row of
    each instance; objective families leave it ``None``.
    """

    template: Template
    vars: np.ndarray
    params: np.ndarray
    rows: np.ndarray | None = None

    def __post_init__(self):
        t = self.template
        params = np.asarray(self.params, dtype=float)
        vars = np.asarray(self.vars, dtype=np.int64)
        n_inst = vars.shape[0] if t.nvar else params.reshape(-1, t.npar).shape[0]
        self.vars = vars.reshape(n_inst, t.nvar)
        self.params = params.reshape(n_inst, t.npar)
        if self.rows is not None:
            self.rows = np.asarray(self.rows, dtype=np.int64).reshape(n_inst)

    @property
    def size(self):
        return self.vars.shape[0]

    def values(self, w):
        X = w[self.vars]
        return _evaluate([self.template.expr], X, self.params, self.template.name)[0]

    def gradients(self, w):
        t = self.template
        X = w[self.vars]
        return _evaluate([t.grad[a] for a in t.grad_slots], X, self.params, t.name)

    def hessians(self, w):
        t = self.template
        X = w[self.vars]
        return _evaluate([t.hess[k] for k in t.hess_slots], X, self.params, t.name)


@dataclass
class ModelFunctions:
    """Objective and constraint stack built from families.

    Jacobian and Hessian coordinate lists are fixed at construction; every
    evaluation returns values on exactly these patterns, summed in a fixed
    order.
    """

    n: int
    m: int
    objective: list = field(default_factory=list)
    constraints: list = field(default_factory=list)

    def __post_init__(self):
        for f in self.constraints:
            if f.rows is None:
                raise ValueError("constraint family without target rows")
            if f.size and (f.rows.max() >= self.m or f.rows.min() < 0):
                raise ValueError(f"row out of range in family {f.template.name}")
        for f in self.objective + self.constraints:
            if f.vars.size and (f.vars.max() >= self.n or f.vars.min() < 0):
                raise ValueError(f"variable out of range in family {f.template.name}")
        # Jacobian pattern
        jr, jc = [], []
        for f in self.constraints:
            for a in f.template.grad_slots:
                jr.append(f.rows)
                jc.append(f.vars[:, a])
        jr = np.concatenate(jr) if jr else np.zeros(0, np.int64)
        jc = np.concatenate(jc) if jc else np.zeros(0, np.int64)
        key = jr * self.n + jc
        uniq, self._jac_inv = np.unique(key, return_inverse=True)
        self.jac_rows = uniq // self.n
        self.jac_cols = uniq % self.n
        # Hessian pattern (lower triangle); constraint terms first, objective last
        hr, hc, hmult = [], [], []
        for f in self.constraints + self.objective:
            for a, b in f.template.hess_slots:
                va, vb = f.vars[:, a], f.vars[:, b]
                hr.append(np.maximum(va, vb))
                hc.append(np.minimum(va, vb))
                # an off-diagonal slot pair mapped onto one variable counts twice
                hmult.append(np.where((a != b) & (va == vb), 2.0, 1.0))
        hr = np.concatenate(hr) if hr else np.zeros(0, np.int64)
        hc = np.concatenate(hc) if hc else np.zeros(0, np.int64)
        self._hess_mult = np.concatenate(hmult) if hmult else np.zeros(0)
        key = hc * self.n + hr
        uniq, self._hess_inv = np.unique(key, return_inverse=True)
        self.hess_rows = uniq % self.n
        self.hess_cols = uniq // self.n

    @property
    def jac_nnz(self):
        return self.jac_rows.size

    @property
    def hess_nnz(self):
        return self.hess_rows.size

    def eval_objective(self, w):
        w = np.asarray(w, dtype=float)
        total = 0.0
        for f in self.objective:
            total += float(np.sum(f.values(w)))
        return total

    def gradient(self, w):
        w = np.asarray(w, dtype=float)
        g = np.zeros(self.n)
        for f in self.objective:
            for a, ga in zip(f.template.grad_slots, f.gradients(w)):
                g += np.bincount(f.vars[:, a], weights=ga, minlength=self.n)
        return g

    def eval_constraints(self, w):
        w = np.asarray(w, dtype=float)
        c = np.zeros(self.m)
        for f in self.constraints:
            c += np.bincount(f.rows, weights=f.values(w), minlength=self.m)
        return c

    def jacobian_values(self, w):
        w = np.asarray(w, dtype=float)
        parts = []
        for f in self.constraints:
            parts.extend(f.gradients(w))
        vals = np.concatenate(parts) if parts else np.zeros(0)
        return np.bincount(self._jac_inv, weights=vals, minlength=self.jac_nnz)

    def jacobian(self, w):
        return sp.csr_matrix(
            (self.jacobian_values(w), (self.jac_rows, self.jac_cols)), shape=(self.m, self.n)
        )

    def hessian_values(self, w, sigma, lam):
        w = np.asarray(w, dtype=float)
        lam = np.asarray(lam, dtype=float)
        parts = []
        for f in self.constraints:
            lr = lam[f.rows]
            parts.extend(h * lr for h in f.hessians(w))
        for f in self.objective:
            parts.extend(h * sigma for h in f.hessians(w))
        vals = np.concatenate(parts) if parts else np.zeros(0)
        return np.bincount(self._hess_inv, weights=vals * self._hess_mult, minlength=self.hess_nnz)

    def hessian_lag(self, w, sigma, lam):
        """Lower triangle of ``sigma * hess(phi) + sum_i lam_i * hess(c_i)``."""
        return SparseSym(
            self.n, self.hess_rows, self.hess_cols, self.hessian_values(w, sigma, lam), finalized=True
        )

    def lagrangian_gradient(self, w, sigma, lam):
        return sigma * self.gradient(w) + self.jacobian(w).T @ lam


@dataclass
class FDReport:
    gradient_error: float
    jacobian_error: float
    hessian_error: float
    tol: float

    @property
    def max_error(self):
        return max(self.gradient_error, self.jacobian_error, self.hessian_error)

    @property
    def passed(self):
        return self.max_error <= self.tol


def _rel(a, b):
    return float(np.max(np.abs(a - b), initial=0.0)) / max(1.0, float(np.max(np.abs(b), initial=0.0)))


def fd_check(model: ModelFunctions, w, seed=0, step=1e-6, tol=1e-6):
    """Compare exact derivatives against central differences at ``w``.

    The gradient is checked componentwise; the Jacobian and the Hessian of a
    random Lagrangian are checked through products with a random direction.
    """
    rng = np.random.default_rng(seed)
    w = np.asarray(w, dtype=float)
    # per-component steps: one huge slack must not coarsen the step for angles
    scale = np.maximum(1.0, np.abs(w))
    g = model.gradient(w)
    g_fd = np.empty(model.n)
    for i in range(model.n):
        e = np.zeros(model.n)
        e[i] = step * scale[i]
        g_fd[i] = (model.eval_objective(w + e) - model.eval_objective(w - e)) / (2 * e[i])
    v = rng.standard_normal(model.n)
    v *= scale / max(1.0, np.max(np.abs(v)))
    h = step
    jv = model.jacobian(w) @ v
    jv_fd = (model.eval_constraints(w + h * v) - model.eval_constraints(w - h * v)) / (2 * h)
    lam = rng.standard_normal(model.m)
    sigma = 1.0
    hv = model.hessian_lag(w, sigma, lam).matvec(v)
    hv_fd = (
        model.lagrangian_gradient(w + h * v, sigma, lam) - model.lagrangian_gradient(w - h * v, sigma, lam)
    ) / (2 * h)
    return FDReport(_rel(g, g_fd), _rel(jv, jv_fd), _rel(hv, hv_fd), tol)
