"""
Shooting for the value function
===============================

Reference experiment: ``sigma = p = 1``, ``theta = alpha = 0.5`` and
``C(u) = exp(-5u)``. The slope ``W = Q'`` starts at ``-p`` with free initial
slope ``r``. Small ``r`` bends back down (a local maximum below zero), large
``r`` crosses zero, and the bounded value function sits exactly at the
boundary ``r*`` between the two.
"""

import logging

import numpy as np

from queuecontrol import (
    DcpParams,
    ShootingConfig,
    classify_sweep,
    make_exponential_cost,
    shoot_r_star,
    solve_zero_control,
)
from queuecontrol.hjb import locate_r_star

logging.basicConfig(level=logging.INFO, format="%(message)s")

params = DcpParams(sigma=1.0, theta=0.5, alpha=0.5, p=1.0, cost=make_exponential_cost(5.0))
cfg = ShootingConfig(h=1e-4)

###############################################################################
# Bracket ``r*`` first, then sweep a few ``r`` around it. Every trajectory ends
# at an event: a local maximum or a zero crossing.

lo, hi = locate_r_star(params, cfg)
print(f"r* in [{lo!r}, {hi!r}]")
for o in classify_sweep(params, cfg, [lo * f for f in (0.0, 0.5, 0.9, 0.99, 1.01, 1.1, 1.5)]):
    print(f"r = {o.r:8.5f}  {o.classification.value:9s} at x = {o.x_event:6.3f}  W there = {o.W[-1]: .4f}")

###############################################################################
# The full solve continues the bounded trajectory out to ``x_max = 20`` and
# integrates ``Q = K + int W``. The feedback control is ``u*(x) = F'(Q'(x))``.

sol = shoot_r_star(params, cfg)
print(f"\nQ(0) = {sol.Q[0]:.10f}, max HJB residual {sol.max_residual:.2e}, {len(sol.stages)} stages")
for x in (0.0, 0.5, 1.0, 2.0, 5.0, 10.0):
    i = int(round(x / sol.h))
    print(f"x = {x:5.1f}  Q = {sol.Q[i]:.6f}  Q' = {sol.Qp[i]: .6f}  u* = {sol.ustar[i]:.4f}")

###############################################################################
# Doing nothing costs ``C(0)/alpha + p U(x)`` where ``U`` solves the linear
# equation with ``U'(0) = -1``. It is an upper bound on ``Q``.

zero = solve_zero_control(params, cfg)
J0 = params.cost.cost_at_zero / params.alpha + params.p * zero.Q
print(f"\nzero-control cost at 0: {J0[0]:.6f} (vs Q(0) = {sol.Q[0]:.6f})")
print("zero control never beats the optimum:", bool(np.all(J0 >= sol.Q)))
