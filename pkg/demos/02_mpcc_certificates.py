"""Certify stationarity on two tiny complementarity problems.

``min (a-1)^2 + (b-1)^2  s.t. 0 <= a _|_ b >= 0`` has two strongly
stationary minimizers, (1, 0) and (0, 1).  ``min a + b`` has its only
solution at the origin, where both members vanish and the sign test on the
biactive multipliers decides the verdict.

Run: python3 demos/02_mpcc_certificates.py
"""
from ncl_scopf.mpcc import certify_result, from_expressions
from ncl_scopf.ncl import ncl_solve

problems = {
    "distance to (1,1)": from_expressions(0, 1, lambda x: (x[0] - 1) ** 2 + (x[1] - 1) ** 2, w_init=[0.6, 0.2]),
    "a + b": from_expressions(0, 1, lambda x: x[0] + x[1], w_init=[0.5, 0.5]),
}
for name, P in problems.items():
    res = ncl_solve(P)
    cert = certify_result(P, res)
    print(f"{name}: w = {res.w.round(6).tolist()}  status {res.status}")
    print(f"  verdict {cert.verdict}; mu1 = {cert.mu1.round(6).tolist()}, mu2 = {cert.mu2.round(6).tolist()}")
    print(f"  I+0 {cert.i_pos0.tolist()}  I0+ {cert.i_0pos.tolist()}  I00 {cert.i_00.tolist()}")
    print(f"  outer iterations {res.outer_iterations}, penalty trail {[r.rho for r in res.trace]}")
