"""Discrete-event simulation of the n-th single-server queue with abandonment.

The state is the offered waiting time ``V`` (the wait an infinitely patient
arrival would face). It drains at unit rate while positive. Potential
arrivals come from a rate-``n`` Poisson stream thinned with acceptance
probability

    lambda_n(V) = clamp(1 - u(sqrt(n) V) / sqrt(n), epsilon0, 1),

so the admitted stream has intensity ``n lambda_n(V(t-))`` and the induced
control is ``u_n = sqrt(n) (1 - lambda_n)``. An admitted customer with
patience ``d`` joins (adding ``v/n`` work) only if ``V(t-) < d``. The scaled
processes are ``Vhat = sqrt(n) V`` and ``Lhat = sqrt(n) * (idle time)``.

Patience is uniform on ``[0, scale/theta]`` so that
``sqrt(n) F(y / sqrt(n)) = min(theta y / scale, sqrt(n))``, giving the linear
abandonment drift ``theta y`` of the diffusion limit when ``scale = 1``.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .diffusion import ControlPolicy, ZeroControl
from .hjb import DcpParams
from .montecarlo import CostEstimate, tail_bound

logger = logging.getLogger(__name__)

DEFAULT_EPSILON0 = 0.1
DEFAULT_T = 40.0
SMALL_X = 1e-3

# Gauss-Legendre nodes and weights on [0, 1]
_GL_NODES = np.array([0.5 - 0.5 * math.sqrt(0.6), 0.5, 0.5 + 0.5 * math.sqrt(0.6)])
_GL_WEIGHTS = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])

# float state slots
S_T, S_V, S_LHAT, S_CC, S_IDLE_D, S_IDLE_R, S_IDLE_TIME = range(7)
# integer counter slots
C_CAND, C_ACCEPT, C_JOIN, C_ABANDON, C_CLAMP, C_DONE = range(6)

EV_REJECT, EV_JOIN, EV_ABANDON = 0, 1, 2


@dataclass(frozen=True)
class ServiceSpec:
    """Service requirement with mean 1: deterministic or Gamma with the given variance."""

    family: str = "deterministic"
    variance: float = 0.0

    def __post_init__(self):
        if self.family not in ("deterministic", "gamma"):
            raise ValueError(f"unknown service family {self.family!r}")
        if self.family == "deterministic" and self.variance != 0.0:
            raise ValueError("deterministic service has zero variance")
        if self.family == "gamma" and not self.variance > 0:
            raise ValueError("gamma service needs a positive variance")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.family == "deterministic":
            return np.ones(size)
        return rng.standard_gamma(1.0 / self.variance, size) * self.variance


@dataclass(frozen=True)
class PatienceSpec:
    """Patience ``d ~ Uniform(0, scale/theta)``; CDF ``min(theta y / scale, 1)``."""

    theta: float
    scale: float = 1.0

    def __post_init__(self):
        if not (self.theta > 0 and self.scale > 0):
            raise ValueError("patience theta and scale must be positive")

    def cdf(self, y):
        return np.clip(self.theta * np.asarray(y, dtype=float) / self.scale, 0.0, 1.0)

    def scaled_cdf(self, y, n: int):
        """``sqrt(n) F(y / sqrt(n))``, which tends to ``H(y) = theta y / scale``."""
        rn = math.sqrt(n)
        return rn * self.cdf(np.asarray(y, dtype=float) / rn)


@dataclass
class QueueParams:
    n: int
    dcp: DcpParams
    policy: ControlPolicy = field(default_factory=ZeroControl)
    x0_hat: float = 0.0
    service: ServiceSpec = field(default_factory=ServiceSpec)
    patience: Optional[PatienceSpec] = None
    epsilon0: float = DEFAULT_EPSILON0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        self.n = int(self.n)
        if self.x0_hat < 0:
            raise ValueError("x0_hat must be non-negative")
        if not 0.0 < self.epsilon0 < 1.0:
            raise ValueError("epsilon0 must lie in (0, 1)")
        if self.patience is None:
            self.patience = PatienceSpec(self.dcp.theta)

    @property
    def sigma_squared(self) -> float:
        """Limiting diffusion variance ``1 + service variance``."""
        return 1.0 + self.service.variance

    def tables(self):
        """``(h, u, C(u_n))`` with ``u_n = min(u, sqrt(n) (1 - epsilon0))``."""
        h, u, _ = self.policy.table(self.dcp)
        u = np.asarray(u, dtype=float)
        u_eff = np.minimum(u, math.sqrt(self.n) * (1.0 - self.epsilon0))
        c = np.asarray(self.dcp.cost.evaluate(u_eff), dtype=float)
        return float(h), u, np.atleast_1d(c)


def control_to_intensity(u_map, n: int, vhat: float, epsilon0: float = DEFAULT_EPSILON0) -> float:
    """``lambda_n = clamp(1 - u(vhat)/sqrt(n), epsilon0, 1)``."""
    u = float(u_map(vhat))
    if u < 0:
        raise ValueError("control must be non-negative")
    return min(1.0, max(epsilon0, 1.0 - u / math.sqrt(n)))


def induced_control(lam: float, n: int) -> float:
    return math.sqrt(n) * (1.0 - lam)


# -- kernel -------------------------------------------------------------------


@njit(cache=True)
def _lookup(x, h, tab):
    size = tab.shape[0]
    if size == 1:
        return tab[0]
    q = x / h
    last = size - 1
    if q >= last:
        return tab[last]
    i = int(q)
    f = q - i
    return tab[i] * (1.0 - f) + tab[i + 1] * f


@njit(cache=True)
def _one_minus_exp_poly(x):
    """``1 - e^{-x}(1 + x)`` without cancellation."""
    if x < SMALL_X:
        return x * x * (0.5 - x * (1.0 / 3.0 - x * (0.125 - x / 30.0)))
    return -math.expm1(-x) - x * math.exp(-x)


@njit(cache=True)
def _advance(st, a, b, rn, alpha, h, ctab, const_cost, gl_x, gl_w):
    """Drain from time ``a`` to ``b`` with no arrival, accruing costs."""
    V = st[S_V]
    ell = st[S_LHAT]
    busy = min(V, b - a)
    ea = math.exp(-alpha * a)
    eb = math.exp(-alpha * b)
    if busy > 0.0:
        em = math.exp(-alpha * (a + busy))
        if not const_cost:
            acc = 0.0
            for q in range(3):
                s = busy * gl_x[q]
                acc += gl_w[q] * math.exp(-alpha * (a + s)) * _lookup(rn * (V - s), h, ctab)
            st[S_CC] += busy * acc
        st[S_IDLE_R] += ell * (ea - em)
    else:
        em = ea
    idle = (b - a) - busy
    if idle > 0.0:
        if not const_cost:
            st[S_CC] += ctab[0] * (em - eb) / alpha
        st[S_IDLE_D] += rn * (em - eb) / alpha
        st[S_IDLE_R] += ell * (em - eb) + rn * em * _one_minus_exp_poly(alpha * idle) / alpha
        st[S_LHAT] = ell + rn * idle
        st[S_IDLE_TIME] += idle
    st[S_V] = max(V - (b - a), 0.0)
    st[S_T] = b


@njit(cache=True)
def _queue_kernel(st, cnt, E, U, D, S, n, T, alpha, eps0, theta_over_scale, h, utab, ctab, const_cost,
                  gl_x, gl_w, record, ev_t, ev_type, ev_v, ev_va):
    """Consume one block of variates. Returns the number of candidates used."""
    rn = math.sqrt(n)
    m = E.shape[0]
    for i in range(m):
        t = st[S_T]
        tn = t + E[i] / n
        if tn >= T:
            _advance(st, t, T, rn, alpha, h, ctab, const_cost, gl_x, gl_w)
            cnt[C_DONE] = 1
            return i
        _advance(st, t, tn, rn, alpha, h, ctab, const_cost, gl_x, gl_w)
        V = st[S_V]
        u = _lookup(rn * V, h, utab)
        lam = 1.0 - u / rn
        if lam < eps0:
            lam = eps0
            cnt[C_CLAMP] += 1
        elif lam > 1.0:
            lam = 1.0
        cnt[C_CAND] += 1
        kind = EV_REJECT
        if U[i] < lam:
            cnt[C_ACCEPT] += 1
            d = D[i] / theta_over_scale
            if V < d:
                st[S_V] = V + S[i] / n
                cnt[C_JOIN] += 1
                kind = EV_JOIN
            else:
                cnt[C_ABANDON] += 1
                kind = EV_ABANDON
        if record:
            ev_t[i] = tn
            ev_type[i] = kind
            ev_v[i] = V
            ev_va[i] = st[S_V]
    return m


def _block_size(n, T):
    mean = n * T
    return int(mean + 6.0 * math.sqrt(mean) + 64)


@dataclass(frozen=True)
class _PathSpec:
    """The picklable part of :class:`QueueParams` needed by the kernel (costs hold closures)."""

    n: int
    x0_hat: float
    alpha: float
    epsilon0: float
    patience_rate: float  # theta / scale
    service: ServiceSpec
    tabs: tuple

    @classmethod
    def of(cls, qp: QueueParams) -> "_PathSpec":
        return cls(qp.n, qp.x0_hat, qp.dcp.alpha, qp.epsilon0, qp.patience.theta / qp.patience.scale,
                   qp.service, qp.tables())


def _run_path(qp: _PathSpec, T: float, seed: int, record: bool = False):
    h, utab, ctab = qp.tabs
    const_cost = ctab.shape[0] == 1
    rng = np.random.default_rng(seed)
    st = np.zeros(7)
    st[S_V] = qp.x0_hat / math.sqrt(qp.n)
    cnt = np.zeros(6, dtype=np.int64)
    a, sc = qp.alpha, qp.patience_rate
    logs = []
    while not cnt[C_DONE]:
        m = _block_size(qp.n, T - st[S_T])
        E = rng.standard_exponential(m)
        U = rng.random(m)
        D = rng.random(m)
        S = qp.service.draw(rng, m)
        if record:
            ev = (np.empty(m), np.empty(m, dtype=np.int8), np.empty(m), np.empty(m))
        else:
            ev = (np.empty(1), np.empty(1, dtype=np.int8), np.empty(1), np.empty(1))
        used = _queue_kernel(st, cnt, E, U, D, S, qp.n, T, a, qp.epsilon0, sc, h, utab, ctab,
                             const_cost, _GL_NODES, _GL_WEIGHTS, record, *ev)
        if record:
            logs.append(tuple(x[:used] for x in ev))
    if const_cost:
        st[S_CC] = ctab[0] * (-math.expm1(-a * T)) / a
    st[S_IDLE_R] += math.exp(-a * T) * st[S_LHAT]
    return st, cnt, logs


# -- single path --------------------------------------------------------------


@dataclass
class QueueTrajectory:
    n: int
    seed: int
    T: float
    control_cost: float
    idle_cost: float  # p * int e^{-at} dLhat
    idle_cost_rewritten: float
    Lhat_T: float
    Vhat_T: float
    idle_time: float
    candidates: int
    admitted: int
    joined: int
    abandoned: int
    clamps: int
    event_times: np.ndarray
    event_types: np.ndarray  # 0 thinned out, 1 joined, 2 abandoned
    v_before: np.ndarray  # V(t-) at each candidate
    v_after: np.ndarray
    x0_hat: float = 0.0

    @property
    def total_cost(self) -> float:
        return self.control_cost + self.idle_cost

    @property
    def jump_sizes(self) -> np.ndarray:
        j = self.event_types == EV_JOIN
        return self.v_after[j] - self.v_before[j]

    def idle_intervals(self) -> list:
        """Maximal intervals on which ``V = 0``, reconstructed from the event log."""
        out = []
        t_prev, v_prev = 0.0, self.x0_hat / math.sqrt(self.n)
        times = np.append(self.event_times, self.T)
        v_after = np.append(self.v_after, np.nan)
        for tk, vk in zip(times, v_after):
            empty_at = t_prev + v_prev
            if empty_at < tk:
                if out and abs(out[-1][1] - max(empty_at, t_prev)) < 1e-15 and v_prev == 0.0:
                    out[-1] = (out[-1][0], tk)
                else:
                    out.append((empty_at, tk))
            t_prev, v_prev = tk, vk
        return out

    def V_at(self, t):
        """``V(t)`` from the event log (right-continuous)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        times = np.concatenate(([0.0], self.event_times))
        vals = np.concatenate(([self.x0_hat / math.sqrt(self.n)], self.v_after))
        k = np.searchsorted(times, t, side="right") - 1
        return np.maximum(vals[k] - (t - times[k]), 0.0)


def simulate_queue_path(params: QueueParams, T: float = DEFAULT_T, seed: int = 0) -> QueueTrajectory:
    if not T > 0:
        raise ValueError("T must be positive")
    st, cnt, logs = _run_path(_PathSpec.of(params), T, seed, record=True)
    et, ty, vb, va = (np.concatenate([l[k] for l in logs]) for k in range(4))
    p = params.dcp.p
    return QueueTrajectory(
        n=params.n, seed=seed, T=T, control_cost=float(st[S_CC]), idle_cost=float(p * st[S_IDLE_D]),
        idle_cost_rewritten=float(p * st[S_IDLE_R]), Lhat_T=float(st[S_LHAT]),
        Vhat_T=float(math.sqrt(params.n) * st[S_V]), idle_time=float(st[S_IDLE_TIME]),
        candidates=int(cnt[C_CAND]), admitted=int(cnt[C_ACCEPT]), joined=int(cnt[C_JOIN]),
        abandoned=int(cnt[C_ABANDON]), clamps=int(cnt[C_CLAMP]),
        event_times=et, event_types=ty, v_before=vb, v_after=va, x0_hat=params.x0_hat,
    )


# -- batches ------------------------------------------------------------------


Q_CONTROL, Q_IDLE_D, Q_IDLE_R, Q_LHAT, Q_VHAT, Q_CAND, Q_CLAMP, Q_JOIN, Q_ABANDON, Q_IDLE_TIME = range(10)
Q_OUT = 10


def _queue_chunk(args):
    qp, T, seeds = args
    res = np.empty((len(seeds), Q_OUT))
    rn = math.sqrt(qp.n)
    for i, s in enumerate(seeds):
        st, cnt, _ = _run_path(qp, T, int(s))
        res[i] = (st[S_CC], st[S_IDLE_D], st[S_IDLE_R], st[S_LHAT], rn * st[S_V],
                  cnt[C_CAND], cnt[C_CLAMP], cnt[C_JOIN], cnt[C_ABANDON], st[S_IDLE_TIME])
    return res


def simulate_queue_batch(params: QueueParams, T: float = DEFAULT_T, n_paths: int = 1000,
                         base_seed: int = 0, workers: int = 1, chunk: int = 1000) -> np.ndarray:
    """Per-path outputs, shape ``(n_paths, Q_OUT)``; path ``i`` uses seed ``base_seed + i``."""
    if not T > 0:
        raise ValueError("T must be positive")
    seeds = np.arange(base_seed, base_seed + n_paths, dtype=np.int64)
    spec = _PathSpec.of(params)
    jobs = [(spec, T, seeds[i:i + chunk]) for i in range(0, n_paths, chunk)]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_queue_chunk, jobs))
    else:
        parts = [_queue_chunk(j) for j in jobs]
    logger.info("queue n=%d: %d paths in %.1fs", params.n, n_paths, time.perf_counter() - t0)
    return np.concatenate(parts, axis=0)


def estimate_queue_cost(params: QueueParams, T: float = DEFAULT_T, n_paths: int = 10_000,
                        base_seed: int = 0, workers: int = 1) -> CostEstimate:
    """Monte Carlo estimate of the queue cost with both idle-cost forms and ``E[Lhat(T)^2]``."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    res = simulate_queue_batch(params, T, n_paths, base_seed, workers)
    dcp = params.dcp
    tb = tail_bound(dcp.alpha, T, dcp.cost.cost_at_zero, dcp.p)
    L2 = res[:, Q_LHAT] ** 2
    est = CostEstimate.from_samples(res[:, Q_CONTROL], res[:, Q_IDLE_D], res[:, Q_IDLE_R], dcp.p, tb)
    cand = res[:, Q_CAND].sum()
    est.extras.update({
        "n": params.n, "T": T,
        "mean_Lhat_T_sq": float(L2.mean()),
        "se_Lhat_T_sq": float(L2.std(ddof=1) / math.sqrt(n_paths)),
        "mean_Lhat_T": float(res[:, Q_LHAT].mean()),
        "mean_Vhat_T": float(res[:, Q_VHAT].mean()),
        "se_Vhat_T": float(res[:, Q_VHAT].std(ddof=1) / math.sqrt(n_paths)),
        "idle_cost_share": float(est.boundary_cost_mean / est.mean) if est.mean > 0 else 0.0,
        "clamp_rate": float(res[:, Q_CLAMP].sum() / cand) if cand else 0.0,
        "mean_joined": float(res[:, Q_JOIN].mean()),
        "mean_abandoned": float(res[:, Q_ABANDON].mean()),
    })
    return est
