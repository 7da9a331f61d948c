"""Running control costs and their Legendre-Fenchel conjugates.

A control cost ``C`` maps a control level ``u >= 0`` to a cost rate. Admissible
costs are twice differentiable, non-increasing and convex with ``C(0)`` finite
and ``C(u) -> 0``. The solver never works with ``C`` directly; it needs the
conjugate

    F(y) = sup_{u >= 0} { u*y - C(u) },     y <= 0,

its derivative ``F'(y) = (C')^{-1}(y)`` (zero below ``C'(0)``), and a linear
extension ``F~`` past ``-delta`` that keeps trial trajectories well defined
when they cross zero.

Closed forms are used for the built-in families. Custom costs invert ``C'`` by
monotone bisection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from numba import njit
from scipy.optimize import bisect

logger = logging.getLogger(__name__)

ZERO_SNAP = 1e-12
INVERSE_TOL = 1e-12


class ParameterError(ValueError):
    """Invalid model or cost parameter."""


class DomainError(ValueError):
    """Argument outside the domain where the conjugate is finite."""


class CostKind(Enum):
    EXPONENTIAL = "exponential"
    RECIPROCAL = "reciprocal"
    INVERSE = "inverse"  # C(u) = 1/u, not admissible
    CUSTOM = "custom"


@dataclass(frozen=True)
class CostFunction:
    """A running control cost with its first two derivatives.

    ``slope_at_zero`` may be ``-inf`` (only for the inadmissible ``1/u`` cost).
    ``inverse_derivative`` is ``(C')^{-1}`` on ``(C'(0), 0)`` when a closed form
    is known; otherwise it is computed by bisection.
    """

    kind: CostKind
    evaluate: Callable[[float], float]
    derivative1: Callable[[float], float]
    derivative2: Callable[[float], float]
    cost_at_zero: float
    slope_at_zero: float
    params: tuple = ()
    inverse_derivative: Optional[Callable[[float], float]] = None
    admissible: bool = True
    _kernels: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __call__(self, u):
        return self.evaluate(u)

    @property
    def name(self) -> str:
        if self.kind is CostKind.EXPONENTIAL:
            return f"exponential(beta={self.params[0]:g})"
        return self.kind.value

    def kernels(self):
        """Compiled ``(F, F', prm)`` for the shooting kernel, or ``None``.

        ``F`` and ``F'`` take ``(y, prm)`` and assume ``y < 0``.
        """
        return self._kernels


# -- built-in families -------------------------------------------------------


@njit(cache=True)
def _exp_F(y, prm):
    beta = prm[0]
    if y >= 0.0:
        return 0.0
    if y <= -beta:
        return -1.0
    return y / beta * (1.0 - math.log(-y / beta))


@njit(cache=True)
def _exp_Fp(y, prm):
    beta = prm[0]
    if y <= -beta:
        return 0.0
    return -math.log(-y / beta) / beta


@njit(cache=True)
def _recip_F(y, prm):
    if y >= 0.0:
        return 0.0
    if y <= -1.0:
        return -1.0
    return -y - 2.0 * math.sqrt(-y)


@njit(cache=True)
def _recip_Fp(y, prm):
    if y <= -1.0:
        return 0.0
    return 1.0 / math.sqrt(-y) - 1.0


@njit(cache=True)
def _zero_F(y, prm):
    return 0.0


@njit(cache=True)
def _zero_Fp(y, prm):
    return 0.0


ZERO_KERNELS = (_zero_F, _zero_Fp, np.zeros(1))


def make_exponential_cost(beta: float) -> CostFunction:
    """``C(u) = exp(-beta*u)``, so ``C(0) = 1`` and ``C'(0) = -beta``."""
    beta = float(beta)
    if not beta > 0.0 or not math.isfinite(beta):
        raise ParameterError(f"beta must be a positive finite number, got {beta!r}")
    return CostFunction(
        kind=CostKind.EXPONENTIAL,
        evaluate=lambda u: np.exp(-beta * np.asarray(u, dtype=float)),
        derivative1=lambda u: -beta * np.exp(-beta * np.asarray(u, dtype=float)),
        derivative2=lambda u: beta * beta * np.exp(-beta * np.asarray(u, dtype=float)),
        cost_at_zero=1.0,
        slope_at_zero=-beta,
        params=(beta,),
        inverse_derivative=lambda y: -np.log(-np.asarray(y, dtype=float) / beta) / beta,
        _kernels=(_exp_F, _exp_Fp, np.array([beta])),
    )


def make_reciprocal_cost() -> CostFunction:
    """``C(u) = 1/(u+1)``, so ``C(0) = 1`` and ``C'(0) = -1``."""
    return CostFunction(
        kind=CostKind.RECIPROCAL,
        evaluate=lambda u: 1.0 / (np.asarray(u, dtype=float) + 1.0),
        derivative1=lambda u: -1.0 / (np.asarray(u, dtype=float) + 1.0) ** 2,
        derivative2=lambda u: 2.0 / (np.asarray(u, dtype=float) + 1.0) ** 3,
        cost_at_zero=1.0,
        slope_at_zero=-1.0,
        inverse_derivative=lambda y: 1.0 / np.sqrt(-np.asarray(y, dtype=float)) - 1.0,
        _kernels=(_recip_F, _recip_Fp, np.zeros(1)),
    )


def make_inverse_cost(allow_inadmissible: bool = False) -> CostFunction:
    """``C(u) = 1/u``: unbounded at zero, so it is never accepted by the solver.

    Only useful for conjugate tables; pass ``allow_inadmissible=True``.
    """
    if not allow_inadmissible:
        raise ParameterError("C(u) = 1/u has C(0) = inf; pass allow_inadmissible=True")
    with np.errstate(divide="ignore"):
        return CostFunction(
            kind=CostKind.INVERSE,
            evaluate=lambda u: 1.0 / np.asarray(u, dtype=float),
            derivative1=lambda u: -1.0 / np.asarray(u, dtype=float) ** 2,
            derivative2=lambda u: 2.0 / np.asarray(u, dtype=float) ** 3,
            cost_at_zero=math.inf,
            slope_at_zero=-math.inf,
            inverse_derivative=lambda y: 1.0 / np.sqrt(-np.asarray(y, dtype=float)),
            admissible=False,
        )


def make_custom_cost(
    evaluate: Callable[[float], float],
    derivative1: Callable[[float], float],
    derivative2: Callable[[float], float],
    *,
    jit: bool = True,
) -> CostFunction:
    """Wrap user-supplied scalar callables as a cost.

    With ``jit=True`` the callables are compiled with numba so the shooting
    solver runs at full speed; if compilation fails the solver falls back to an
    interpreted (much slower) march.
    """
    c0 = float(evaluate(0.0))
    s0 = float(derivative1(0.0))
    if not (math.isfinite(c0) and c0 > 0.0):
        raise ParameterError(f"C(0) must be finite and positive, got {c0!r}")
    if not (s0 < 0.0):
        raise ParameterError(f"C'(0) must be negative, got {s0!r}")
    kernels = _custom_kernels(evaluate, derivative1, c0, s0) if jit else None
    return CostFunction(
        kind=CostKind.CUSTOM,
        evaluate=np.vectorize(evaluate, otypes=[float]),
        derivative1=np.vectorize(derivative1, otypes=[float]),
        derivative2=np.vectorize(derivative2, otypes=[float]),
        cost_at_zero=c0,
        slope_at_zero=s0,
        _kernels=kernels,
    )


def _custom_kernels(evaluate, derivative1, c0, s0):
    try:
        c_jit = njit(evaluate)
        dc_jit = njit(derivative1)

        @njit
        def inv(y):
            lo, hi = 0.0, 1.0
            while dc_jit(hi) < y:
                lo = hi
                hi *= 2.0
                if hi > 1e300:
                    return hi
            while hi - lo > 1e-12 * max(1.0, hi):
                mid = 0.5 * (lo + hi)
                if dc_jit(mid) < y:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)

        @njit
        def F(y, prm):
            if y >= 0.0:
                return 0.0
            if y <= s0:
                return -c0
            u = inv(y)
            return y * u - c_jit(u)

        @njit
        def Fp(y, prm):
            if y <= s0:
                return 0.0
            return inv(y)

        F(0.5 * s0, np.zeros(1))
        Fp(0.5 * s0, np.zeros(1))
    except Exception as exc:  # numba typing errors are not a stable class
        logger.warning("custom cost could not be compiled (%s); using interpreted solver", exc)
        return None
    return (F, Fp, np.zeros(1))


# -- conjugate ---------------------------------------------------------------


def _inverse_derivative(cost: CostFunction, y: np.ndarray) -> np.ndarray:
    if cost.inverse_derivative is not None:
        return np.asarray(cost.inverse_derivative(y), dtype=float)

    def solve(yi):
        hi = 1.0
        while float(cost.derivative1(hi)) < yi:
            hi *= 2.0
        return bisect(lambda u: float(cost.derivative1(u)) - yi, 0.0, hi, xtol=INVERSE_TOL)

    return np.array([solve(float(yi)) for yi in np.ravel(y)], dtype=float).reshape(np.shape(y))


def _scalar_or_array(y_in, out):
    return float(out) if np.ndim(y_in) == 0 else out


def legendre_eval(cost: CostFunction, y):
    """Conjugate ``F(y)`` for ``y <= 0``.

    Values with ``|y| <= 1e-12`` are snapped to zero. Positive ``y`` raises
    :class:`DomainError`; use :func:`legendre_extended` there.
    """
    ya = np.asarray(y, dtype=float)
    if np.any(ya > ZERO_SNAP) or np.any(np.isnan(ya)):
        raise DomainError("F(y) is +inf for y > 0; use legendre_extended")
    ya = np.where(np.abs(ya) <= ZERO_SNAP, 0.0, ya)
    out = np.zeros_like(ya)
    floor = ya <= cost.slope_at_zero
    out[floor] = -cost.cost_at_zero
    mid = (~floor) & (ya < 0.0)
    if np.any(mid):
        ym = ya[mid]
        u = _inverse_derivative(cost, ym)
        out[mid] = ym * u - np.asarray(cost.evaluate(u), dtype=float)
    return _scalar_or_array(y, out)


def legendre_derivative(cost: CostFunction, y):
    """``F'(y) = (C')^{-1}(y)`` on ``(C'(0), 0)`` and ``0`` below ``C'(0)``.

    Undefined at ``y >= 0`` where it diverges.
    """
    ya = np.asarray(y, dtype=float)
    if np.any(ya >= 0.0) or np.any(np.isnan(ya)):
        raise DomainError("F'(y) is only finite for y < 0")
    out = np.zeros_like(ya)
    mid = ya > cost.slope_at_zero
    if np.any(mid):
        out[mid] = _inverse_derivative(cost, ya[mid])
    return _scalar_or_array(y, out)


def conjugate_closed_form(cost: CostFunction, y):
    """Textbook formula for ``F(y)``, ``y < 0``, for the built-in families.

    :func:`legendre_eval` goes through ``(C')^{-1}`` instead, so the two are
    independent routes to the same number (used for the Young identity check).
    """
    ya = np.asarray(y, dtype=float)
    if np.any(ya >= 0.0):
        raise DomainError("closed forms are tabulated for y < 0 only")
    with np.errstate(invalid="ignore", divide="ignore"):
        if cost.kind is CostKind.EXPONENTIAL:
            b = cost.params[0]
            out = np.where(ya <= -b, -1.0, ya / b * (1.0 - np.log(-ya / b)))
        elif cost.kind is CostKind.RECIPROCAL:
            out = np.where(ya <= -1.0, -1.0, -ya - 2.0 * np.sqrt(-ya))
        elif cost.kind is CostKind.INVERSE:
            out = -2.0 * np.sqrt(-ya)
        else:
            raise ParameterError("no closed form for a custom cost")
    return _scalar_or_array(y, out)


def legendre_extended(cost: CostFunction, delta: float, y):
    """Linear extension ``F~`` of the conjugate past ``-delta``; total on the real line."""
    if not delta > 0.0:
        raise ParameterError(f"delta must be positive, got {delta!r}")
    ya = np.asarray(y, dtype=float)
    f_d = legendre_eval(cost, -delta)
    fp_d = legendre_derivative(cost, -delta)
    out = fp_d * (ya + delta) + f_d
    low = ya <= -delta
    if np.any(low):
        out = np.where(low, 0.0, out)
        out[low] = legendre_eval(cost, ya[low])
    return _scalar_or_array(y, out)


def grid_sup_conjugate(cost: CostFunction, y, u_max: Optional[float] = None, n_grid: int = 100_001):
    """Brute-force ``max_u {u*y - C(u)}`` over ``n_grid`` points on ``[0, u_max]``.

    ``u_max`` defaults to the first power of two where ``C`` falls below
    ``1e-8``. The points are ``0`` plus a geometric sequence, so heavy-tailed
    costs (whose ``u_max`` is huge) are still resolved near their maximizers.
    """
    if u_max is None:
        u_max = 1.0
        while float(cost.evaluate(u_max)) >= 1e-8:
            u_max *= 2.0
    u = np.concatenate(([0.0], np.geomspace(u_max * 1e-12, u_max, n_grid - 1)))
    with np.errstate(divide="ignore"):
        cu = np.asarray(cost.evaluate(u), dtype=float)
    ya = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.array([np.max(u * yi - cu) for yi in ya])
    return float(out[0]) if np.ndim(y) == 0 else out
