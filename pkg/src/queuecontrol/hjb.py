"""Free-boundary HJB solver by shooting on the slope equation.

The value function ``Q`` of the drift-control problem solves

    sigma^2/2 Q'' - F(Q') - theta x Q' - alpha Q = 0,   Q'(0) = -p,

with ``Q`` bounded. Writing ``W = Q'`` and integrating once gives a
one-parameter family of initial value problems

    sigma^2/2 W' = F~(W) + theta x W + alpha * int_0^x W + alpha K_r,
    W(0) = -p,     alpha K_r = sigma^2/2 r - F(-p).

For small ``r`` the trajectory turns back down while still negative (a local
maximum); for large ``r`` it crosses zero. The boundary ``r*`` between the two
regimes gives the bounded solution, ``Q = K_{r*} + int_0^x W``.

Near ``r*`` the two regimes separate exponentially fast in ``x``, so a single
forward march in floating point only follows the bounded solution up to a
few units of ``x``. Beyond that the solver restarts the shooting from the last
trusted grid point, perturbing the running integral by the smallest offset
that keeps the trajectory between the two regimes. The offsets stay at the
level of rounding error (their sum is reported in the stage diagnostics).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .costs import (
    ZERO_KERNELS,
    CostFunction,
    ParameterError,
    legendre_derivative,
    legendre_eval,
)

logger = logging.getLogger(__name__)

DEGENERATE_THRESHOLD = 1e-6
R_CAP = 2.0 ** 20
SEPARATION_TOL = 1e-10
OVERFLOW_LIMIT = 1e12
CONVEXITY_TOL = 1e-8
MAX_STAGES = 10_000


class SolverError(RuntimeError):
    """The shooting procedure failed or produced a candidate violating a check."""


class Classification(Enum):
    LOCAL_MAX = "LocalMax"
    HIT_ZERO = "HitZero"
    CONVERGED = "Converged"
    EXHAUSTED = "Exhausted"


_CODES = {
    0: Classification.CONVERGED,
    1: Classification.LOCAL_MAX,
    2: Classification.HIT_ZERO,
    3: Classification.EXHAUSTED,
}


@dataclass(frozen=True)
class DcpParams:
    """Diffusion control problem data: ``dX = sigma dW - u dt - theta X dt + dL``."""

    sigma: float
    theta: float
    alpha: float
    p: float
    cost: CostFunction

    def __post_init__(self):
        for name in ("sigma", "theta", "alpha", "p"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise ParameterError(f"{name} must be a finite number, got {v!r}")
            if v <= DEGENERATE_THRESHOLD:
                raise ParameterError(f"{name} must be strictly positive (> {DEGENERATE_THRESHOLD}), got {v!r}")
        if not self.cost.admissible or not math.isfinite(self.cost.cost_at_zero):
            raise ParameterError(f"cost {self.cost.name} is not admissible (C(0) must be finite)")

    @property
    def half_var(self) -> float:
        return 0.5 * self.sigma ** 2


@dataclass(frozen=True)
class ShootingConfig:
    """Discretization and tolerance knobs of the shooting solver.

    ``x_max=None`` means ``10 * max(1, sigma^2/theta)``, resolved by
    :meth:`resolved_x_max`.
    """

    h: float = 1e-4
    x_max: Optional[float] = None
    r_tolerance: float = 1e-9
    w_zero_tolerance: float = 1e-6
    delta: float = 1e-8
    max_bisection_iters: int = 200
    separation_tolerance: float = SEPARATION_TOL
    r_cap: float = R_CAP
    residual_tol: float = 1e-6

    def __post_init__(self):
        if not self.h > 0:
            raise ParameterError(f"h must be positive, got {self.h!r}")
        if not self.r_tolerance > 0:
            raise ParameterError(f"r_tolerance must be positive, got {self.r_tolerance!r}")
        if not self.delta > 0:
            raise ParameterError(f"delta must be positive, got {self.delta!r}")
        if not self.w_zero_tolerance > 0:
            raise ParameterError("w_zero_tolerance must be positive")
        if self.max_bisection_iters < 1:
            raise ParameterError("max_bisection_iters must be at least 1")

    def min_x_max(self, params: DcpParams) -> float:
        return 10.0 * max(1.0, params.sigma ** 2 / params.theta)

    def resolved_x_max(self, params: DcpParams) -> float:
        lower = self.min_x_max(params)
        if self.x_max is None:
            return lower
        if self.x_max < lower * (1 - 1e-12):
            raise ParameterError(f"x_max={self.x_max} is below the minimum {lower} for these parameters")
        return float(self.x_max)

    def n_steps(self, params: DcpParams) -> int:
        return int(round(self.resolved_x_max(params) / self.h))


@dataclass
class TrajectoryOutcome:
    """Result of one forward march of the slope equation at a fixed ``r``."""

    r: float
    classification: Classification
    x_event: float
    x: np.ndarray
    W: np.ndarray
    Wp: np.ndarray
    I: np.ndarray
    crossing_slope: float = math.nan
    Y: Optional[np.ndarray] = None  # K_r + int_0^x W


@dataclass
class Stage:
    x_start: float
    x_end: float
    offset: float


@dataclass
class ValueFunctionSolution:
    """Grid representation of the bounded HJB solution and its feedback policy."""

    params: DcpParams
    config: ShootingConfig
    r_star: float
    r_bracket: tuple
    x: np.ndarray
    Q: np.ndarray
    Qp: np.ndarray
    K_r_star: float
    ustar: np.ndarray
    residual: np.ndarray
    stages: list = field(default_factory=list)
    zero_control: bool = False
    elapsed: float = 0.0

    @property
    def x_max(self) -> float:
        return float(self.x[-1])

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual))) if self.residual.size else 0.0

    @property
    def offset_total(self) -> float:
        return float(sum(abs(s.offset) for s in self.stages))

    def value(self, x):
        """``Q`` by linear interpolation; constant beyond ``x_max``."""
        return np.interp(x, self.x, self.Q)

    def u_star(self, x):
        return evaluate_policy(self, x)

    def control_cost_table(self) -> np.ndarray:
        """``C(u*(x_i))`` on the grid (zero for the zero-control solution)."""
        if self.zero_control:
            return np.zeros_like(self.ustar)
        return np.asarray(self.params.cost.evaluate(self.ustar), dtype=float)

    def to_records(self) -> dict:
        return {"x": self.x, "W": self.Qp, "Q": self.Q, "Qp": self.Qp, "ustar": self.ustar}


# -- march kernel -------------------------------------------------------------


@njit
def _march(Fk, Fpk, prm, half_var, theta, alpha, aK, h, j0, n, delta, use_ext,
           W0, I0, off, wz_tol, Wout, Iout, Gout):
    """Heun step for ``W`` with trapezoid running integral ``I``.

    Returns ``(code, index, crossing_slope)`` with codes 0 reached end,
    1 local maximum, 2 hit zero, 3 overflow.
    """
    fd = Fk(-delta, prm)
    fpd = Fpk(-delta, prm)
    inv = 1.0 / half_var
    w = W0
    I = I0 + off
    Wout[j0] = w
    Iout[j0] = I
    # rhs at the start point
    if use_ext and w > -delta:
        f = fpd * (w + delta) + fd
    else:
        f = Fk(w, prm) if w < 0.0 else 0.0
    g0 = inv * (f + theta * (j0 * h) * w + alpha * I + aK)
    Gout[j0] = g0
    if g0 <= 0.0 and w < -wz_tol:
        return 1, j0, math.nan
    for i in range(j0, n):
        x = i * h
        wp = w + h * g0
        Ip = I + 0.5 * h * (w + wp)
        if use_ext and wp > -delta:
            f = fpd * (wp + delta) + fd
        else:
            f = Fk(wp, prm) if wp < 0.0 else 0.0
        g1 = inv * (f + theta * (x + h) * wp + alpha * Ip + aK)
        wn = w + 0.5 * h * (g0 + g1)
        In = I + 0.5 * h * (w + wn)
        if use_ext and wn > -delta:
            f = fpd * (wn + delta) + fd
        else:
            f = Fk(wn, prm) if wn < 0.0 else 0.0
        gn = inv * (f + theta * (x + h) * wn + alpha * In + aK)
        Wout[i + 1] = wn
        Iout[i + 1] = In
        Gout[i + 1] = gn
        if not (abs(wn) < 1e12 and abs(In) < 1e12):
            return 3, i + 1, math.nan
        if wn >= 0.0:
            return 2, i + 1, (wn - w) / h
        if gn <= 0.0 and wn < -wz_tol:
            return 1, i + 1, math.nan
        w = wn
        I = In
        g0 = gn
    return 0, n, math.nan


def _kernels_for(params: DcpParams, zero_control: bool):
    if zero_control:
        return ZERO_KERNELS, _march
    k = params.cost.kernels()
    if k is None:
        return _interpreted_kernels(params.cost), _march.py_func
    return k, _march


def _interpreted_kernels(cost: CostFunction):
    logger.info("running the interpreted march for %s; expect it to be slow", cost.name)

    def F(y, prm):
        return float(legendre_eval(cost, min(y, 0.0)))

    def Fp(y, prm):
        return float(legendre_derivative(cost, min(y, -1e-300)))

    return (F, Fp, np.zeros(1))


class _Marcher:
    """Holds the buffers and constants for repeated marches at one parameter set."""

    def __init__(self, params: DcpParams, cfg: ShootingConfig, zero_control: bool = False):
        self.params = params
        self.cfg = cfg
        self.zero_control = zero_control
        (self.F, self.Fp, self.prm), self.kernel = _kernels_for(params, zero_control)
        self.n = cfg.n_steps(params)
        self.h = cfg.resolved_x_max(params) / self.n
        self.w0 = -1.0 if zero_control else -params.p
        self.f_w0 = 0.0 if zero_control else float(legendre_eval(params.cost, -params.p))
        # the continuation marches past x_max so every trial ends in a decisive event
        self.n_ext = self.n + max(self.n // 4, 16)
        self.bufs = [np.empty(self.n_ext + 1) for _ in range(6)]

    def aK(self, r: float) -> float:
        return self.params.half_var * r - self.f_w0

    def run(self, r, j0=0, W0=None, I0=0.0, off=0.0, use_ext=True, slot=0, extended=False):
        W, I, G = self.bufs[3 * slot: 3 * slot + 3]
        p = self.params
        code, idx, slope = self.kernel(
            self.F, self.Fp, self.prm, p.half_var, p.theta, p.alpha, self.aK(r), self.h,
            j0, self.n_ext if extended else self.n, self.cfg.delta, use_ext, self.w0 if W0 is None else W0, I0, off,
            self.cfg.w_zero_tolerance, W, I, G,
        )
        return int(code), int(idx), float(slope)

    def outcome(self, r, use_ext=True) -> TrajectoryOutcome:
        code, idx, slope = self.run(r, use_ext=use_ext)
        W, I, G = (b[: idx + 1].copy() for b in self.bufs[:3])
        x = np.arange(idx + 1) * self.h
        cls = _CODES[code]
        x_event = idx * self.h
        if cls is Classification.HIT_ZERO:
            # crossing by linear interpolation between the last two nodes
            w_prev = W[-2] if idx > 0 else W[-1]
            frac = -w_prev / (W[-1] - w_prev) if W[-1] != w_prev else 1.0
            x_event = (idx - 1 + frac) * self.h
        elif cls is Classification.CONVERGED:
            # reached x_max without an event: only a genuine approach to 0- counts
            if not (W[-1] < 0.0 and G[-1] >= 0.0):
                cls = Classification.EXHAUSTED
        out = TrajectoryOutcome(r=float(r), classification=cls, x_event=float(x_event),
                                x=x, W=W, Wp=G, I=I, crossing_slope=slope)
        out.Y = self.aK(r) / self.params.alpha + I
        return out


# -- public operations --------------------------------------------------------


def integrate_W(params: DcpParams, cfg: ShootingConfig, r: float, use_extension: bool = True,
                zero_control: bool = False) -> TrajectoryOutcome:
    """March the slope equation at a single ``r`` until the first event or ``x_max``."""
    if not (r >= 0.0 and math.isfinite(r)):
        raise ParameterError(f"r must be a finite non-negative number, got {r!r}")
    return _Marcher(params, cfg, zero_control).outcome(r, use_ext=use_extension)


def classify_sweep(params: DcpParams, cfg: ShootingConfig, r_grid: Sequence[float],
                   use_extension: bool = True, zero_control: bool = False) -> list:
    """One :class:`TrajectoryOutcome` per entry of an ascending ``r_grid``."""
    r_grid = np.asarray(r_grid, dtype=float)
    if r_grid.size == 0:
        raise ParameterError("r_grid must not be empty")
    if np.any(np.diff(r_grid) < 0):
        raise ParameterError("r_grid must be sorted ascending")
    m = _Marcher(params, cfg, zero_control)
    return [m.outcome(float(r), use_ext=use_extension) for r in r_grid]


def sweep_is_ordered(outcomes: Sequence[TrajectoryOutcome]) -> bool:
    """True when no LocalMax follows a HitZero along the sweep."""
    seen_hit = False
    for o in outcomes:
        if o.classification is Classification.HIT_ZERO:
            seen_hit = True
        elif o.classification is Classification.LOCAL_MAX and seen_hit:
            return False
    return True


def shoot_r_star(params: DcpParams, cfg: ShootingConfig = ShootingConfig()) -> ValueFunctionSolution:
    """Locate ``r*`` and assemble the bounded value function on ``[0, x_max]``."""
    return _solve(params, cfg, zero_control=False)


def solve_zero_control(params: DcpParams, cfg: ShootingConfig = ShootingConfig()) -> ValueFunctionSolution:
    """Bounded solution ``U`` of ``sigma^2/2 U'' - theta x U' - alpha U = 0``, ``U'(0) = -1``.

    The zero-control cost from the origin is ``C(0)/alpha + p U(x)``.
    """
    return _solve(params, cfg, zero_control=True)


def _bracket(m: _Marcher, cfg: ShootingConfig):
    lo = 0.0
    code, _, _ = m.run(lo)
    if code != 1:
        raise SolverError(f"r=0 did not produce a local maximum (code {code})")
    hi = 1.0
    tried = []
    while True:
        code, idx, _ = m.run(hi)
        tried.append((hi, _CODES[code].value))
        if code == 2:
            break
        if code == 1:
            lo = hi
        hi *= 2.0
        if hi > cfg.r_cap:
            raise SolverError(f"no HitZero trajectory below r_cap={cfg.r_cap}; sweep: {tried}")
    return lo, hi


def _bisect(classify, lo, hi, max_iter):
    """Bisect a LocalMax/HitZero boundary down to adjacent floats.

    ``classify(mid)`` returns a kernel code. Returns ``(lo, hi, exact)`` where
    ``exact`` is set when a trial reached the end of the grid without an event.
    """
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        code = classify(mid)
        if code == 0:
            return mid, mid, True
        if code == 1:
            lo = mid
        elif code == 2:
            hi = mid
        else:
            raise SolverError(f"trajectory overflowed at bisection point {mid!r}")
    return lo, hi, False


def _locate(m: _Marcher, cfg: ShootingConfig):
    lo, hi = _bracket(m, cfg)
    lo, hi, _ = _bisect(lambda r: m.run(r)[0], lo, hi, cfg.max_bisection_iters)
    if hi - lo >= cfg.r_tolerance:
        raise SolverError(f"bisection stopped with width {hi - lo:.3e} >= r_tolerance")
    return lo, hi


def locate_r_star(params: DcpParams, cfg: ShootingConfig = ShootingConfig(),
                  zero_control: bool = False) -> tuple:
    """Bracket ``(r_lo, r_hi)`` of ``r*`` (LocalMax below, HitZero above) without assembling ``Q``.

    Bisection runs until the endpoints are adjacent floating-point numbers,
    which is well inside ``r_tolerance``.
    """
    return _locate(_Marcher(params, cfg, zero_control), cfg)


def _solve(params: DcpParams, cfg: ShootingConfig, zero_control: bool) -> ValueFunctionSolution:
    t0 = time.perf_counter()
    m = _Marcher(params, cfg, zero_control)
    n, h = m.n, m.h
    lo, hi = _locate(m, cfg)
    r_star = lo
    logger.debug("r* bracket [%r, %r]", lo, hi)

    W = np.empty(n + 1)
    I = np.empty(n + 1)
    W[0], I[0] = m.w0, 0.0
    A, AI = m.bufs[0], m.bufs[1]
    B, BI = m.bufs[3], m.bufs[4]
    stages = []
    j = 0
    while j < n:
        if len(stages) >= MAX_STAGES:
            raise SolverError("continuation did not reach x_max")
        Wj, Ij = W[j], I[j]

        def run(off, slot):
            return m.run(r_star, j, Wj, Ij, off, slot=slot, extended=True)

        b = 1e-14
        while True:
            cl = run(-b, 0)[0]
            ch = run(b, 1)[0]
            if cl != 2 and ch != 1:
                break
            b *= 2.0
            if b > 1.0:
                raise SolverError(f"continuation lost the bounded solution at x={j * h:.4f}")
        olo, ohi, exact = _bisect(lambda o: run(o, 0)[0], -b, b, 2000)
        # an offset with no event even past x_max says nothing about how far the march
        # can be trusted, so measure separation on the +-b pair in that case
        plo, phi = (-b, b) if exact else (olo, ohi)
        ca, ea, _ = run(plo, 0)
        cb, eb, _ = run(phi, 1)
        end = min(ea if ca else m.n_ext, eb if cb else m.n_ext)
        sep = np.abs(A[j:end + 1] - B[j:end + 1]) > cfg.separation_tolerance
        if exact:
            run(olo, 0)
        k = int(np.argmax(sep)) if sep.any() else end - j
        jn = min(j + max(k // 2, 1), n)
        W[j:jn + 1] = A[j:jn + 1]
        I[j:jn + 1] = AI[j:jn + 1]
        stages.append(Stage(j * h, jn * h, olo))
        j = jn

    x = np.arange(n + 1) * h
    K = m.aK(r_star) / params.alpha
    Q = K + np.concatenate(([0.0], np.cumsum(0.5 * h * (W[1:] + W[:-1]))))
    if zero_control:
        ustar = np.zeros_like(W)
        F_W = np.zeros(n - 1)
    else:
        ustar = np.asarray(legendre_derivative(params.cost, np.minimum(W, -cfg.w_zero_tolerance)))
        F_W = np.asarray(legendre_eval(params.cost, W[1:-1]))
    Qpp = (Q[2:] - 2.0 * Q[1:-1] + Q[:-2]) / h ** 2
    residual = params.half_var * Qpp - F_W - params.theta * x[1:-1] * W[1:-1] - params.alpha * Q[1:-1]

    sol = ValueFunctionSolution(
        params=params, config=cfg, r_star=float(r_star), r_bracket=(float(lo), float(hi)),
        x=x, Q=Q, Qp=W.copy(), K_r_star=float(K), ustar=ustar, residual=residual,
        stages=stages, zero_control=zero_control, elapsed=time.perf_counter() - t0,
    )
    check_solution(sol)
    logger.info("r*=%.12g Q(0)=%.10g stages=%d max residual=%.2e (%.2fs)",
                sol.r_star, sol.Q[0], len(stages), sol.max_residual, sol.elapsed)
    return sol


def check_solution(sol: ValueFunctionSolution) -> None:
    """Raise :class:`SolverError` naming the first violated property of ``Q``."""
    p = 1.0 if sol.zero_control else sol.params.p
    Q, Qp = sol.Q, sol.Qp
    if Qp[0] != -p:
        raise SolverError(f"boundary slope Q'(0)={Qp[0]!r} != {-p!r}")
    if not np.all(Qp < 0.0):
        raise SolverError(f"Q' not negative: max {Qp.max():.3e}")
    if not np.all(Qp >= -p):
        raise SolverError(f"Q' below -p: min {Qp.min():.6g}")
    if not np.all(Q > 0.0):
        raise SolverError("Q not positive")
    if not np.all(np.diff(Q) < 0.0):
        raise SolverError("Q not strictly decreasing")
    d2 = Q[2:] - 2.0 * Q[1:-1] + Q[:-2]
    if d2.min() < -CONVEXITY_TOL:
        raise SolverError(f"Q not convex: min second difference {d2.min():.3e}")
    if sol.max_residual > sol.config.residual_tol:
        raise SolverError(f"HJB residual {sol.max_residual:.3e} exceeds {sol.config.residual_tol:.1e}")


def evaluate_policy(sol: ValueFunctionSolution, x):
    """Feedback ``u*(x) = F'(Q'(x))`` with ``Q'`` interpolated on the grid.

    Points past ``x_max`` use the value at ``x_max``. ``Q'`` is clipped to at
    most ``-w_zero_tolerance`` before applying ``F'``.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0):
        raise ParameterError("policy is defined for x >= 0 only")
    if sol.zero_control:
        out = np.zeros_like(xa)
    else:
        qp = np.interp(np.minimum(xa, sol.x_max), sol.x, sol.Qp)
        qp = np.minimum(qp, -sol.config.w_zero_tolerance)
        out = np.asarray(legendre_derivative(sol.params.cost, qp), dtype=float)
    return float(out) if np.ndim(x) == 0 else out


def policy_clip_point(sol: ValueFunctionSolution) -> float:
    """Right edge beyond which the feedback is held constant."""
    return sol.x_max


def comparison_violation(outcomes: Sequence[TrajectoryOutcome]) -> float:
    """Largest breach of the ordering ``W, W', Y`` non-decreasing in ``r`` over all pairs.

    Pairs are compared on their common grid. Zero or negative means the
    ordering holds everywhere.
    """
    worst = -math.inf
    outs = sorted(outcomes, key=lambda o: o.r)
    for i, lo in enumerate(outs):
        for hi in outs[i + 1:]:
            if hi.r == lo.r:
                continue
            m = min(len(lo.W), len(hi.W))
            for a, b in ((lo.W, hi.W), (lo.Wp, hi.Wp), (lo.Y, hi.Y)):
                worst = max(worst, float(np.max(a[:m] - b[:m])))
    return worst


def trichotomy_ok(outcome: TrajectoryOutcome) -> bool:
    """No positive local maximum and no negative local minimum along the samples."""
    W, G = outcome.W, outcome.Wp
    if len(W) < 2:
        return True
    down = (G[:-1] > 0) & (G[1:] <= 0)  # local maximum between samples
    up = (G[:-1] < 0) & (G[1:] >= 0)  # local minimum
    return not (np.any(down & (W[1:] > 0)) or np.any(up & (W[1:] < 0)))
