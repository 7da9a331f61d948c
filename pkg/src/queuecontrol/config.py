"""Experiment configuration: JSON files with one block per concern.

Every block has defaults matching the reference experiment (exponential cost
with ``beta = 5``, ``p = sigma = 1``, ``theta = alpha = 0.5``), so a config file
only needs the ``kind`` and whatever it overrides. Unknown keys are rejected
with their dotted path.
"""

from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from .costs import CostFunction, ParameterError, make_exponential_cost, make_reciprocal_cost
from .hjb import DcpParams, ShootingConfig

KINDS = ("sweep_wr", "solve", "verify_dcp", "converge_qcp", "conjugate_table")
COST_FAMILIES = ("exponential", "reciprocal")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass
class CostBlock:
    family: str = "exponential"
    beta: float = 5.0

    def build(self) -> CostFunction:
        if self.family == "exponential":
            return make_exponential_cost(self.beta)
        if self.family == "reciprocal":
            return make_reciprocal_cost()
        raise ParameterError(f"unknown cost family {self.family!r}; expected one of {COST_FAMILIES}")


@dataclass
class DcpBlock:
    sigma: float = 1.0
    theta: float = 0.5
    alpha: float = 0.5
    p: float = 1.0
    cost: CostBlock = field(default_factory=CostBlock)

    def build(self) -> DcpParams:
        return DcpParams(self.sigma, self.theta, self.alpha, self.p, self.cost.build())


@dataclass
class ShootingBlock:
    h: float = 1e-4
    x_max: Optional[float] = None
    r_tolerance: float = 1e-9
    w_zero_tolerance: float = 1e-6
    delta: float = 1e-8
    max_bisection_iters: int = 200

    def build(self) -> ShootingConfig:
        return ShootingConfig(**asdict(self))


@dataclass
class MonteCarloBlock:
    x0: float = 0.0
    dt: float = 1e-3
    T: float = 40.0
    n_paths: int = 100_000
    seed: int = 0
    workers: int = 1
    constant_levels: list = field(default_factory=lambda: [0.25, 1.0, 4.0])
    scheme: str = "bridge"


@dataclass
class QueueBlock:
    n_list: list = field(default_factory=lambda: [25, 100, 400, 1600])
    n_paths: int = 20_000
    T: float = 40.0
    x0_hat: float = 0.0
    epsilon0: float = 0.1
    service_family: str = "deterministic"
    service_variance: float = 0.0
    patience_scale: float = 1.0
    zero_control_check: bool = True


@dataclass
class SweepBlock:
    r_list: Optional[list] = None  # None: spread around the located r*
    stride: int = 100
    check_refinement: bool = True


@dataclass
class ConjugateBlock:
    families: list = field(default_factory=lambda: ["exponential", "reciprocal", "inverse"])
    beta: float = 5.0
    n_points: int = 200
    grid_points: int = 100_001


@dataclass
class BudgetBlock:
    se_multiplier: float = 3.0
    mc_absolute: float = 0.02
    qcp_absolute: float = 0.05
    fubini_se_multiplier: float = 2.0
    conjugate_tol: float = 1e-5
    young_tol: float = 1e-8
    residual_tol: float = 1e-6
    comparison_tol: float = 1e-9
    second_moment_ratio: float = 3.0


@dataclass
class OutputBlock:
    dir: Optional[str] = None
    csv_stride: int = 100


@dataclass
class ExperimentConfig:
    kind: str = "solve"
    dcp: DcpBlock = field(default_factory=DcpBlock)
    shooting: ShootingBlock = field(default_factory=ShootingBlock)
    monte_carlo: MonteCarloBlock = field(default_factory=MonteCarloBlock)
    queue: QueueBlock = field(default_factory=QueueBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    conjugate: ConjugateBlock = field(default_factory=ConjugateBlock)
    budgets: BudgetBlock = field(default_factory=BudgetBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind: must be one of {KINDS}, got {self.kind!r}")
        _positive(self, "dcp", ("sigma", "theta", "alpha", "p"))
        if self.dcp.cost.family not in COST_FAMILIES:
            raise ConfigError(f"dcp.cost.family: must be one of {COST_FAMILIES}, got {self.dcp.cost.family!r}")
        if self.dcp.cost.family == "exponential":
            _positive(self, "dcp.cost", ("beta",))
        _positive(self, "shooting", ("h", "r_tolerance", "w_zero_tolerance", "delta"))
        _positive(self, "monte_carlo", ("dt", "T"))
        mc = self.monte_carlo
        if mc.n_paths < 2:
            raise ConfigError("monte_carlo.n_paths: must be at least 2")
        if mc.workers < 1:
            raise ConfigError("monte_carlo.workers: must be at least 1")
        if mc.x0 < 0:
            raise ConfigError("monte_carlo.x0: must be non-negative")
        if mc.seed < 0:
            raise ConfigError("monte_carlo.seed: must be non-negative")
        if mc.scheme not in ("bridge", "projection"):
            raise ConfigError(f"monte_carlo.scheme: must be 'bridge' or 'projection', got {mc.scheme!r}")
        if any(c < 0 for c in mc.constant_levels):
            raise ConfigError("monte_carlo.constant_levels: levels must be non-negative")
        q = self.queue
        if any(int(n) != n or n < 1 for n in q.n_list):
            raise ConfigError("queue.n_list: entries must be positive integers")
        if list(q.n_list) != sorted(q.n_list):
            raise ConfigError("queue.n_list: must be ascending")
        if self.kind == "converge_qcp" and len(q.n_list) < 3:
            raise ConfigError("queue.n_list: needs at least 3 entries for a convergence study")
        if not 0 < q.epsilon0 < 1:
            raise ConfigError("queue.epsilon0: must lie in (0, 1)")
        if q.n_paths < 2:
            raise ConfigError("queue.n_paths: must be at least 2")
        _positive(self, "queue", ("T", "patience_scale"))
        if self.sweep.r_list is not None:
            r = self.sweep.r_list
            if not r or any(x < 0 for x in r) or list(r) != sorted(r):
                raise ConfigError("sweep.r_list: must be a non-empty ascending list of non-negative numbers")
        for fam in self.conjugate.families:
            if fam not in ("exponential", "reciprocal", "inverse"):
                raise ConfigError(f"conjugate.families: unknown family {fam!r}")
        if self.output.csv_stride < 1 or self.sweep.stride < 1:
            raise ConfigError("output.csv_stride: strides must be at least 1")

    # -- serialization --

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>: expected a JSON object")
        return _build(cls, data, "")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _positive(cfg, dotted, names):
    obj = cfg
    for part in dotted.split("."):
        obj = getattr(obj, part)
    for name in names:
        v = getattr(obj, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ConfigError(f"{dotted}.{name}: must be a positive number, got {v!r}")


def _build(cls, data: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        path = f"{prefix}{sorted(unknown)[0]}"
        raise ConfigError(f"{path}: unknown field")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{name}: expected an object")
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            if isinstance(value, (dict,)):
                raise ConfigError(f"{prefix}{name}: expected a scalar or list")
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: {exc}") from exc
