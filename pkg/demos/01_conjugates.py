"""
Convex conjugates of the control cost
=====================================

The HJB equation only sees the control cost through its conjugate
``F(y) = sup_{u >= 0} {u y - C(u)}``. This script tabulates ``F`` and the
maximizer ``F'(y)`` for the two built-in admissible costs and checks them
against a brute-force supremum over a grid of controls.
"""

import numpy as np

from queuecontrol import (
    conjugate_closed_form,
    grid_sup_conjugate,
    legendre_derivative,
    legendre_eval,
    make_exponential_cost,
    make_inverse_cost,
    make_reciprocal_cost,
)

###############################################################################
# Exponential cost ``C(u) = exp(-5u)``. Below ``C'(0) = -5`` the supremum sits
# at ``u = 0`` so ``F = -C(0) = -1``; above it the maximizer grows like a log.

exp5 = make_exponential_cost(5.0)
y = np.array([-7.0, -5.0, -2.0, -1.0, -0.5, -0.1, -0.01])
print(f"{'y':>8} {'F(y)':>12} {'u = F_prime(y)':>15} {'grid sup':>12}")
for yi, F, u, b in zip(y, legendre_eval(exp5, y), legendre_derivative(exp5, y), grid_sup_conjugate(exp5, y)):
    print(f"{yi:8.2f} {F:12.6f} {u:15.6f} {b:12.6f}")

###############################################################################
# Reciprocal cost ``C(u) = 1/(1+u)`` has ``F(y) = -y - 2 sqrt(-y)`` on
# ``(-1, 0)``. Its maximizer blows up like ``1/sqrt(-y)``, much faster than the
# exponential one, which is why the brute-force grid is log-spaced.

recip = make_reciprocal_cost()
y = np.array([-1.0, -0.25, -0.01, -1e-4])
print()
print("reciprocal:", legendre_eval(recip, y))
print("closed form:", conjugate_closed_form(recip, y))
print("maximizers:", legendre_derivative(recip, y))

###############################################################################
# ``C(u) = 1/u`` is not admissible (``C(0)`` is infinite) and the solver refuses
# it, but its conjugate ``-2 sqrt(-y)`` is still available for tables. Note the
# maximizer ``1/sqrt(-y)`` is positive, as it has to be.

inv = make_inverse_cost(allow_inadmissible=True)
print()
print("inverse cost F(-0.36) =", legendre_eval(inv, -0.36), " F'(-0.36) =", legendre_derivative(inv, -0.36))
