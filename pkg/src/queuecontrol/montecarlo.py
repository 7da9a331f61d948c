"""Monte Carlo summaries shared by the diffusion and queue simulators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

Z95 = 1.96
DEFAULT_LOCAL_TIME_RATE_BOUND = 10.0


class SimulationError(RuntimeError):
    """A simulated path became non-finite or otherwise illegal."""


def tail_bound(alpha: float, T: float, cost_at_zero: float, p: float,
               rate_bound: float = DEFAULT_LOCAL_TIME_RATE_BOUND) -> float:
    """Bound on the cost discarded by truncating the horizon at ``T``.

    ``rate_bound`` caps the discounted local-time accrual after ``T``.
    """
    return math.exp(-alpha * T) * (cost_at_zero / alpha + p * rate_bound)


@dataclass
class CostEstimate:
    """Mean, standard error and diagnostics of a discounted cost functional."""

    n_paths: int
    mean: float
    se: float
    tail_bound: float
    mean_rewritten: float
    se_rewritten: float
    control_cost_mean: float
    boundary_cost_mean: float
    extras: dict = field(default_factory=dict)

    @property
    def ci_half_width(self) -> float:
        return Z95 * self.se

    @property
    def ci(self) -> tuple:
        return (self.mean - self.ci_half_width, self.mean + self.ci_half_width)

    @property
    def joint_se(self) -> float:
        """SE used to compare the direct and rewritten boundary-cost forms."""
        return math.hypot(self.se, self.se_rewritten)

    @property
    def fubini_gap(self) -> float:
        return abs(self.mean - self.mean_rewritten)

    def fubini_ok(self, k: float = 2.0) -> bool:
        # a gap at rounding level passes even when both SEs vanish
        return self.fubini_gap <= k * self.joint_se + 1e-12 * max(1.0, abs(self.mean))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci_half_width"] = self.ci_half_width
        return d

    @classmethod
    def from_samples(cls, control, boundary_direct, boundary_rewritten, p, tail, extras=None):
        """Build an estimate from per-path control and boundary (local-time) costs.

        The boundary arrays hold undiscounted-by-``p`` integrals; ``p`` is applied here.
        """
        control = np.asarray(control, dtype=float)
        n = control.size
        if n < 2:
            raise ValueError("at least two paths are needed for a standard error")
        direct = control + p * np.asarray(boundary_direct, dtype=float)
        rewritten = control + p * np.asarray(boundary_rewritten, dtype=float)
        root_n = math.sqrt(n)
        return cls(
            n_paths=n,
            mean=float(direct.mean()),
            se=float(direct.std(ddof=1) / root_n),
            tail_bound=float(tail),
            mean_rewritten=float(rewritten.mean()),
            se_rewritten=float(rewritten.std(ddof=1) / root_n),
            control_cost_mean=float(control.mean()),
            boundary_cost_mean=float(p * np.mean(boundary_direct)),
            extras=dict(extras or {}),
        )
