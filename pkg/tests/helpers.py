import numpy as np

from ncl_scopf.ipm import IpmState
from ncl_scopf.mpcc import from_expressions

# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES = []


def toy_problem(toy):
    lb, ub = toy.bounds()
    return from_expressions(toy.n0, toy.p, toy.f, toy.cons, lb, ub, toy.w_init, toy.name)


def random_interior_state(problem, rng, mu=0.05):
    """Interior primal-dual point with moderate magnitudes."""
    n, m, p = problem.n, problem.m, problem.p
    lb, ub = problem.lb, problem.ub
    fl, fu = np.isfinite(lb), np.isfinite(ub)
    w = rng.uniform(-1.0, 1.0, n)
    both = fl & fu
    w[both] = lb[both] + rng.uniform(0.1, 0.9, both.sum()) * (ub[both] - lb[both])
    lo = fl & ~fu
    w[lo] = lb[lo] + rng.uniform(0.1, 1.5, lo.sum())
    hi = fu & ~fl
    w[hi] = ub[hi] - rng.uniform(0.1, 1.5, hi.sum())
    return IpmState(
        w=w,
        r=rng.normal(size=m),
        t=rng.uniform(0.1, 1.0, p),
        s=rng.uniform(0.1, 1.0, p),
        lam=rng.normal(size=m),
        nu0=rng.uniform(0.1, 2.0, p),
        zl=np.where(fl, rng.uniform(0.1, 2.0, n), 0.0),
        zu=np.where(fu, rng.uniform(0.1, 2.0, n), 0.0),
        mu=mu,
    )


def random_nlp(rng, n0=4, p=3):
    """Small smooth MPCC with mixed bound types (n = n0 + 2p)."""
    from ncl_scopf.model import cos, sin

    n = n0 + 2 * p
    a = rng.uniform(0.5, 2.0, n)
    q = rng.normal(size=n)
    k = rng.normal(size=3)

    def f(x):
        return sum(0.5 * a[i] * x[i] * x[i] + q[i] * x[i] for i in range(n)) + x[0] * x[n0 + p] + sin(x[1]) * x[2]

    cons = [
        lambda x: x[0] * x[1] + x[n0] - k[0],
        lambda x: cos(x[2]) + x[n0 + 1] * x[3] - k[1],
        lambda x: x[0] + x[n0 + p + 1] * x[n0 + p + 1] + x[n - 1] - k[2],
    ]
    lb = np.r_[[-1.0, -np.inf, 0.0, -2.0][:n0], np.zeros(2 * p)]
    ub = np.r_[[2.0, np.inf, np.inf, 3.0][:n0], np.full(2 * p, np.inf)]
    return from_expressions(n0, p, f, cons, lb, ub, np.zeros(n))


def interior_point(problem, rng, spread=0.1):
    """Random point strictly inside the bounds, near the problem's start."""
    lb, ub = problem.lb, problem.ub
    w = problem.w_init + spread * rng.standard_normal(problem.n)
    both = np.isfinite(lb) & np.isfinite(ub)
    w[both] = lb[both] + rng.uniform(0.05, 0.95, both.sum()) * (ub[both] - lb[both])
    lo = np.isfinite(lb) & ~np.isfinite(ub)
    w[lo] = np.maximum(w[lo], lb[lo]) + rng.uniform(0.01, 0.5, lo.sum())
    hi = np.isfinite(ub) & ~np.isfinite(lb)
    w[hi] = np.minimum(w[hi], ub[hi]) - rng.uniform(0.01, 0.5, hi.sum())
    return w


TWO_BUS = """function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	345	1	1.1	0.9;
	2	1	{pd}	{qd}	0	0	1	1	0	345	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	{r}	{x}	{b}	{rate}	0	0	{tap}	{shift}	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.11	5	150;
];
"""


def two_bus(pd=100.0, qd=30.0, r=0.0, x=0.1, b=0.0, rate=0.0, tap=0.0, shift=0.0):
    return TWO_BUS.format(pd=pd, qd=qd, r=r, x=x, b=b, rate=rate, tap=tap, shift=shift)


TRIANGLE = """function mpc = triangle
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	345	1	1.1	0.9;
	2	1	{pd}	{qd}	0	0	1	1	0	345	1	1.1	0.9;
	3	1	{pd}	{qd}	0	0	1	1	0	345	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	{qmax}	{qmin}	1	100	1	250	{pmin}	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
	2	3	0.01	0.1	0	0	0	0	0	0	1	-360	360;
	1	3	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.11	5	150;
];
"""


def triangle(pd=50.0, qd=10.0, qmax=300.0, qmin=-300.0, pmin=10.0):
    return TRIANGLE.format(pd=pd, qd=qd, qmax=qmax, qmin=qmin, pmin=pmin)
