"""Monte Carlo simulation of the controlled reflected diffusion.

The state ``dX = sigma dW - u(X) dt - theta X dt + dL`` is stepped with an
Euler step of the drift and one of two reflection rules:

``projection``
    ``X_{k+1} = max(0, proposal)``, ``dL_k = max(0, -proposal)``. Grid points
    satisfy ``X_{k+1} dL_k = 0`` exactly, but excursions below zero between
    grid points are missed, so local time is undercounted by ``O(sqrt(dt))``.
``bridge``
    The step's Brownian path is treated as a bridge between its endpoints and
    its minimum ``m`` is sampled exactly; ``dL_k = max(0, -m)`` and
    ``X_{k+1} = proposal + dL_k``. This is the Skorokhod map of the frozen-drift
    step and removes the ``O(sqrt(dt))`` local-time bias.

Each path draws its normals (then, for the bridge rule, its uniforms) from
``numpy.random.default_rng(base_seed + i)``, so results do not depend on how
paths are split across workers, and both rules see the same normals.

Several policies can be driven by the same noise (common random numbers),
which is how :func:`dominance_report` compares them.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .hjb import DcpParams, ValueFunctionSolution
from .montecarlo import CostEstimate, SimulationError, tail_bound

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3
DEFAULT_T = 40.0
SCHEMES = ("bridge", "projection")
DEFAULT_SCHEME = "bridge"

# per-path output columns
CONTROL, LT_DIRECT, LT_REWRITTEN, L_T, X_T, X_MAX, CLIPS, REFLECTS, COMPLEMENTARITY, BAD_STEP = range(10)
N_OUT = 10


# -- policies -----------------------------------------------------------------


class ControlPolicy:
    """A state-feedback control tabulated on a uniform grid.

    ``table(params)`` returns ``(grid_step, u_values, cost_values)``; a single
    entry means a constant control. States beyond the table use its last entry.
    """

    name = "policy"

    def table(self, params: DcpParams):
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroControl(ControlPolicy):
    name = "zero"

    def table(self, params):
        return 1.0, np.zeros(1), np.array([params.cost.cost_at_zero])


@dataclass(frozen=True)
class ConstantControl(ControlPolicy):
    level: float

    def __post_init__(self):
        if not self.level >= 0:
            raise ValueError(f"control level must be non-negative, got {self.level!r}")

    @property
    def name(self):
        return f"constant({self.level:g})"

    def table(self, params):
        return 1.0, np.array([float(self.level)]), np.array([float(params.cost.evaluate(self.level))])


class FeedbackFromSolution(ControlPolicy):
    """``u*(x) = F'(Q'(x))`` on the solver grid, held constant past ``x_max``."""

    name = "feedback"

    def __init__(self, sol: ValueFunctionSolution):
        self.sol = sol

    def table(self, params):
        return self.sol.h, self.sol.ustar.copy(), self.sol.control_cost_table()

    @property
    def clip_point(self) -> float:
        return self.sol.x_max


def _pack(params: DcpParams, policies: Sequence[ControlPolicy]):
    hs, us, cs, starts, sizes = [], [], [], [], []
    pos = 0
    for pol in policies:
        h, u, c = pol.table(params)
        hs.append(h)
        us.append(np.asarray(u, dtype=float))
        cs.append(np.asarray(c, dtype=float))
        starts.append(pos)
        sizes.append(len(u))
        pos += len(u)
    return (np.array(hs), np.concatenate(us), np.concatenate(cs),
            np.array(starts, dtype=np.int64), np.array(sizes, dtype=np.int64))


# -- kernel -------------------------------------------------------------------


@njit(cache=True)
def _lookup(x, h, tab, start, size):
    if size == 1:
        return tab[start], False
    q = x / h
    last = size - 1
    if q >= last:
        return tab[start + last], True
    i = int(q)
    f = q - i
    return tab[start + i] * (1.0 - f) + tab[start + i + 1] * f, False


@njit(cache=True)
def _path_kernel(x0, Z, Vu, bridge, sdt, dt, theta, disc, cweight, hs, utab, ctab, starts, sizes,
                 out, rec_X, rec_L, record):
    """Advance every policy over the same noise ``Z``; fills ``out[policy, column]``.

    With ``bridge`` set, ``Vu`` holds uniforms on ``(0, 1]`` used to sample the
    minimum of the Brownian bridge between the step's endpoints.
    """
    var = sdt * sdt
    npol = hs.shape[0]
    nt = Z.shape[0]
    for k in range(npol):
        x = x0
        L = 0.0
        cc = 0.0
        ltd = 0.0
        ltr = 0.0
        xmax = x0
        clips = 0
        refl = 0
        comp = 0.0
        bad = -1
        if record:
            rec_X[k, 0] = x
            rec_L[k, 0] = 0.0
        for j in range(nt):
            u, clipped = _lookup(x, hs[k], utab, starts[k], sizes[k])
            c, _ = _lookup(x, hs[k], ctab, starts[k], sizes[k])
            if clipped:
                clips += 1
            cc += c * disc[j] * cweight
            prop = x - (u + theta * x) * dt + sdt * Z[j]
            if not math.isfinite(prop):
                bad = j
                break
            if bridge:
                low = 0.5 * (x + prop - math.sqrt((x - prop) ** 2 - 2.0 * var * math.log(Vu[j])))
            else:
                low = prop
            if low < 0.0:
                dl = -low
                x = prop + dl
                L += dl
                ltd += dl * disc[j]
                refl += 1
            else:
                dl = 0.0
                x = prop
            comp += x * dl
            ltr += L * (disc[j] - disc[j + 1])
            if x > xmax:
                xmax = x
            if record:
                rec_X[k, j + 1] = x
                rec_L[k, j + 1] = L
        out[k, CONTROL] = cc
        out[k, LT_DIRECT] = ltd
        # Fubini form: alpha int e^{-at} L dt over [0, T] plus the boundary term at T
        out[k, LT_REWRITTEN] = ltr + disc[nt] * L
        out[k, L_T] = L
        out[k, X_T] = x
        out[k, X_MAX] = xmax
        out[k, CLIPS] = clips
        out[k, REFLECTS] = refl
        out[k, COMPLEMENTARITY] = comp
        out[k, BAD_STEP] = bad


def _grid(params: DcpParams, dt: float, T: float):
    if not dt > 0 or not T > 0:
        raise ValueError("dt and T must be positive")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    t = np.arange(n + 1) * dt
    disc = np.exp(-params.alpha * t)
    cweight = -math.expm1(-params.alpha * dt) / params.alpha
    return n, t, disc, cweight


def _check_bad(out, seed):
    bad = out[:, BAD_STEP]
    if np.any(bad >= 0):
        k = int(np.argmax(bad >= 0))
        raise SimulationError(f"non-finite state for policy #{k} at step {int(bad[k])} (seed {seed})")


# -- single path --------------------------------------------------------------


@dataclass
class PathRealization:
    seed: int
    dt: float
    T: float
    policy: str
    control_cost: float
    local_time_cost: float  # p * int e^{-at} dL
    local_time_cost_rewritten: float
    L_T: float
    X_T: float
    max_state: float
    clip_count: int
    reflect_steps: int
    complementarity: float  # sum_k X_{k+1} dL_k
    t: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None

    @property
    def total_cost(self) -> float:
        return self.control_cost + self.local_time_cost


def _noise(seed, n, bridge):
    """Normals, then (for the bridge scheme) uniforms on (0, 1], from one stream per path."""
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal(n)
    Vu = 1.0 - rng.random(n) if bridge else _ONE
    return Z, Vu


_ONE = np.ones(1)


def _scheme_flag(scheme: str) -> bool:
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    return scheme == "bridge"


def simulate_reflected_path(params: DcpParams, policy: ControlPolicy, x0: float = 0.0,
                            dt: float = DEFAULT_DT, T: float = DEFAULT_T, seed: int = 0,
                            record: bool = True, noise: bool = True,
                            scheme: str = DEFAULT_SCHEME) -> PathRealization:
    """Simulate one path; ``noise=False`` replaces the Brownian increments by zero."""
    if x0 < 0:
        raise ValueError("x0 must be non-negative")
    bridge = _scheme_flag(scheme)
    n, t, disc, cw = _grid(params, dt, T)
    if noise:
        Z, Vu = _noise(seed, n, bridge)
    else:
        Z, Vu = np.zeros(n), np.ones(n)
    hs, ut, ct, st, sz = _pack(params, [policy])
    out = np.zeros((1, N_OUT))
    rx = np.empty((1, n + 1)) if record else np.empty((1, 1))
    rl = np.empty((1, n + 1)) if record else np.empty((1, 1))
    _path_kernel(float(x0), Z, Vu, bridge, params.sigma * math.sqrt(dt), dt, params.theta, disc, cw,
                 hs, ut, ct, st, sz, out, rx, rl, record)
    _check_bad(out, seed)
    o = out[0]
    return PathRealization(
        seed=seed, dt=dt, T=T, policy=policy.name,
        control_cost=float(o[CONTROL]), local_time_cost=float(params.p * o[LT_DIRECT]),
        local_time_cost_rewritten=float(params.p * o[LT_REWRITTEN]),
        L_T=float(o[L_T]), X_T=float(o[X_T]), max_state=float(o[X_MAX]),
        clip_count=int(o[CLIPS]), reflect_steps=int(o[REFLECTS]), complementarity=float(o[COMPLEMENTARITY]),
        t=t if record else None, X=rx[0] if record else None, L=rl[0] if record else None,
    )


# -- batches ------------------------------------------------------------------


def _run_chunk(args):
    (x0, sigma, theta, alpha, dt, T, packed, seeds, bridge) = args
    n = int(round(T / dt))
    t = np.arange(n + 1) * dt
    disc = np.exp(-alpha * t)
    cw = -math.expm1(-alpha * dt) / alpha
    hs, ut, ct, st, sz = packed
    npol = hs.shape[0]
    res = np.empty((len(seeds), npol, N_OUT))
    dummy = np.empty((1, 1))
    sdt = sigma * math.sqrt(dt)
    for i, s in enumerate(seeds):
        Z, Vu = _noise(int(s), n, bridge)
        _path_kernel(x0, Z, Vu, bridge, sdt, dt, theta, disc, cw, hs, ut, ct, st, sz, res[i], dummy, dummy, False)
    return res


def simulate_batch(params: DcpParams, policies: Sequence[ControlPolicy], x0: float = 0.0,
                   dt: float = DEFAULT_DT, T: float = DEFAULT_T, n_paths: int = 1000,
                   base_seed: int = 0, workers: int = 1, chunk: int = 2000,
                   scheme: str = DEFAULT_SCHEME) -> np.ndarray:
    """Per-path outputs, shape ``(n_paths, n_policies, N_OUT)``, all policies on common noise."""
    bridge = _scheme_flag(scheme)
    _grid(params, dt, T)
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    packed = _pack(params, policies)
    seeds = np.arange(base_seed, base_seed + n_paths, dtype=np.int64)
    jobs = [(float(x0), params.sigma, params.theta, params.alpha, dt, T, packed, seeds[i:i + chunk], bridge)
            for i in range(0, n_paths, chunk)]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    res = np.concatenate(parts, axis=0)
    bad = res[:, :, BAD_STEP] >= 0
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise SimulationError(f"{int(bad.sum())} path(s) became non-finite; first: seed {seeds[i]}, "
                              f"policy {policies[k].name}, step {int(res[i, k, BAD_STEP])}")
    logger.info("simulated %d paths x %d policies in %.1fs", n_paths, len(policies), time.perf_counter() - t0)
    return res


def _estimate_from(params, res_k, T, dt, scheme) -> CostEstimate:
    tb = tail_bound(params.alpha, T, params.cost.cost_at_zero, params.p)
    steps = round(T / dt)
    extras = {
        "dt": dt, "T": T, "scheme": scheme,
        "mean_L_T": float(res_k[:, L_T].mean()),
        "mean_L_T_sq": float((res_k[:, L_T] ** 2).mean()),
        "max_state": float(res_k[:, X_MAX].max()),
        "clip_rate": float(res_k[:, CLIPS].sum() / (steps * len(res_k))),
        "reflect_rate": float(res_k[:, REFLECTS].sum() / (steps * len(res_k))),
        "max_complementarity": float(np.abs(res_k[:, COMPLEMENTARITY]).max()),
    }
    return CostEstimate.from_samples(res_k[:, CONTROL], res_k[:, LT_DIRECT], res_k[:, LT_REWRITTEN],
                                     params.p, tb, extras)


def estimate_cost(params: DcpParams, policy: ControlPolicy, x0: float = 0.0, dt: float = DEFAULT_DT,
                  T: float = DEFAULT_T, n_paths: int = 10_000, base_seed: int = 0,
                  workers: int = 1, scheme: str = DEFAULT_SCHEME) -> CostEstimate:
    """Monte Carlo estimate of ``J(x0, u)`` with seeds ``base_seed .. base_seed + n_paths - 1``."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    res = simulate_batch(params, [policy], x0, dt, T, n_paths, base_seed, workers, scheme=scheme)
    return _estimate_from(params, res[:, 0], T, dt, scheme)


def estimate_costs(params: DcpParams, policies: Sequence[ControlPolicy], x0: float = 0.0,
                   dt: float = DEFAULT_DT, T: float = DEFAULT_T, n_paths: int = 10_000,
                   base_seed: int = 0, workers: int = 1, scheme: str = DEFAULT_SCHEME) -> dict:
    """Estimates for several policies driven by common random numbers, keyed by policy name."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    res = simulate_batch(params, policies, x0, dt, T, n_paths, base_seed, workers, scheme=scheme)
    return {pol.name: _estimate_from(params, res[:, k], T, dt, scheme) for k, pol in enumerate(policies)}


@dataclass
class DominanceRow:
    policy: str
    estimate: CostEstimate
    reference: float
    budget: float
    is_feedback: bool

    @property
    def passed(self) -> bool:
        e = self.estimate
        if self.is_feedback:
            return abs(e.mean - self.reference) <= 3.0 * e.se + self.budget
        return e.mean + 3.0 * e.se >= self.reference - e.tail_bound

    def to_record(self) -> dict:
        e = self.estimate
        return {"policy": self.policy, "mean": e.mean, "se": e.se, "ci_half_width": e.ci_half_width,
                "tail_bound": e.tail_bound, "n_paths": e.n_paths, "dt": e.extras.get("dt"),
                "T": e.extras.get("T"), "reference": self.reference, "pass": self.passed}


def dominance_report(params: DcpParams, sol: ValueFunctionSolution, x0: float = 0.0,
                     policies: Optional[Sequence[ControlPolicy]] = None, dt: float = DEFAULT_DT,
                     T: float = DEFAULT_T, n_paths: int = 10_000, base_seed: int = 0,
                     workers: int = 1, budget: float = 0.02, scheme: str = DEFAULT_SCHEME) -> list:
    """Compare the feedback policy against alternatives at ``x0``.

    The feedback estimate must be within ``3 SE + budget`` of ``Q(x0)`` and every
    alternative must not beat ``Q(x0)`` by more than ``3 SE``. Failures are
    reported in the rows, not raised.
    """
    if policies is None:
        policies = [FeedbackFromSolution(sol), ZeroControl(), ConstantControl(0.25),
                    ConstantControl(1.0), ConstantControl(4.0)]
    if not any(isinstance(p, FeedbackFromSolution) for p in policies) or len(policies) < 3:
        raise ValueError("policies must include the feedback policy and at least two alternatives")
    ref = float(sol.value(x0))
    est = estimate_costs(params, policies, x0, dt, T, n_paths, base_seed, workers, scheme)
    rows = [DominanceRow(p.name, est[p.name], ref, budget, isinstance(p, FeedbackFromSolution))
            for p in policies]
    for r in rows:
        if not r.passed:
            logger.warning("dominance check failed for %s: %.5f +- %.5f vs Q=%.5f",
                           r.policy, r.estimate.mean, r.estimate.se, ref)
    return rows


# -- Skorokhod map ------------------------------------------------------------


def skorokhod_map(z: np.ndarray):
    """Reflect a free path at zero: ``x = z + max(0, running max of -z)``.

    Returns ``(x, L)`` with ``L`` the regulator (local time) path.
    """
    z = np.asarray(z, dtype=float)
    L = np.maximum.accumulate(np.maximum(-z, 0.0))
    return z + L, L
