import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.config import config


class ExperimentKind(str, Enum):
    WEIGHTS = "weights"
    OPERATORS = "operators"
    NS_RUN = "ns_run"
    AD_RUN = "ad_run"
    DSS_FIXPOINT = "dss_fixpoint"
    SCHEDULE = "schedule"


class AdvectionMode(str, Enum):
    SELF = "self"
    FROZEN = "frozen"
    MOLLIFIED_SELF = "mollified_self"


class ForcingKind(str, Enum):
    ZERO = "zero"
    SELF_SIMILAR = "self_similar"
    DSS = "dss"
    EXPLICIT = "explicit"


class InitialDataKind(str, Enum):
    ZERO = "zero"
    TAYLOR_GREEN = "taylor_green"
    GAUSSIAN = "gaussian"
    RANDOM = "random"
    DSS = "dss"
    SELF_SIMILAR = "self_similar"


class FieldRank(int, Enum):
    SCALAR = 0
    VECTOR = 1
    TENSOR = 2


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(StrictModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n: int = Field(default_factory=lambda: config.numerics.grid_n)
    half_width: float = Field(default_factory=lambda: config.numerics.half_width)

    @field_validator("n")
    @classmethod
    def _check_n(cls, value: int) -> int:
        if value < 8 or value & (value - 1):
            raise ValueError("grid.n must be a power of two and at least 8")
        return value

    @field_validator("half_width")
    @classmethod
    def _check_half_width(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("grid.half_width must be positive")
        return value

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.n


class WeightSpec(StrictModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    delta: float = Field(default_factory=lambda: config.weight.gamma)
    eps: float = Field(default_factory=lambda: config.weight.eps)

    @field_validator("delta")
    @classmethod
    def _check_delta(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("weight.delta must be positive")
        return value

    @field_validator("eps")
    @classmethod
    def _check_eps(cls, value: float) -> float:
        if value < 0:
            raise ValueError("weight.eps must be non-negative")
        return value

    def require_muckenhoupt(self) -> None:
        if not self.delta < 3:
            raise ValueError(f"weight.delta={self.delta} lies outside the A_p range (0,3)")

    def require_energy_range(self) -> None:
        if not 0 < self.delta <= 2:
            raise ValueError(f"gamma must be in (0,2] for energy-controlled runs, got {self.delta}")


class QuadratureReport(StrictModel):
    value: float
    grid: GridSpec
    weight: WeightSpec


class MollifierSpec(StrictModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eps: float
    time_dependent: bool = False

    @field_validator("eps")
    @classmethod
    def _check_eps(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("mollifier eps must be positive")
        return value

    def scale(self, t: Optional[float] = None) -> float:
        """Effective mollification length at time t."""
        if not self.time_dependent:
            return self.eps
        if t is None or t <= 0:
            raise ValueError("mollifier undefined at t<=0")
        return self.eps * math.sqrt(t)


class ForcingSpec(StrictModel):
    kind: ForcingKind = ForcingKind.ZERO
    amplitude: float = 0.0
    width: float = 1.0
    # Sampled F0 (self_similar) or static F (dss / explicit), shape (3, 3, n, n, n)
    profile: Optional[Any] = Field(default=None, exclude=True)


class DSSSpec(StrictModel):
    lam: float = Field(default_factory=lambda: config.dss.lam)
    gamma: float = 2.0
    profile_seed: Optional[int] = None
    profile_amplitude: float = 1.0
    profile_modes: int = Field(default_factory=lambda: config.dss.profile_modes)
    profile_path: Optional[str] = None

    @field_validator("lam")
    @classmethod
    def _check_lam(cls, value: float) -> float:
        if not value > 1:
            raise ValueError("dss.lam must be greater than 1")
        return value

    @field_validator("gamma")
    @classmethod
    def _check_gamma(cls, value: float) -> float:
        if not 1 < value <= 2:
            raise ValueError("dss.gamma must be in (1,2]")
        return value


class SolverConfig(StrictModel):
    dt: float = Field(default_factory=lambda: config.solver.dt)
    T: float = Field(default_factory=lambda: config.solver.horizon)
    eps: float = Field(default_factory=lambda: config.solver.mollifier_eps)
    mollifier_time_dependent: bool = False
    forcing: ForcingSpec = Field(default_factory=ForcingSpec)
    advection: AdvectionMode = AdvectionMode.MOLLIFIED_SELF
    cfl: float = Field(default_factory=lambda: config.numerics.cfl_number)

    @field_validator("dt", "T")
    @classmethod
    def _check_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("solver.dt and solver.T must be positive")
        return value

    @field_validator("eps")
    @classmethod
    def _check_eps(cls, value: float) -> float:
        if value < 0:
            raise ValueError("solver.eps must be non-negative")
        return value

    @property
    def steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    def mollifier(self) -> Optional[MollifierSpec]:
        if self.eps <= 0 or self.advection == AdvectionMode.SELF:
            return None
        return MollifierSpec(eps=self.eps, time_dependent=self.mollifier_time_dependent)


class FlowState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    t: float
    u: np.ndarray
    p: np.ndarray
    b: Optional[np.ndarray] = None
    step: int = 0


class Trajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    grid: GridSpec
    dt: float
    states: List[FlowState] = Field(default_factory=list)
    forcing: Optional[ForcingSpec] = None

    def __len__(self) -> int:
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return np.array([state.t for state in self.states])

    def velocities(self) -> List[np.ndarray]:
        return [state.u for state in self.states]


class EnergyLedgerEntry(StrictModel):
    t: float
    lhs_energy: float
    dissipation_cum: float
    term_weight_flux: float
    term_transport: float
    term_pressure: float
    term_forcing_a: float
    term_forcing_b: float
    slack_A: float
    slack_B: float
    tol_disc: float


class EpsilonSweepEntry(StrictModel):
    eps: float
    distance: float
    sup_energy: float


class BoundComparison(StrictModel):
    name: str
    measured: float
    bound: float

    @property
    def ratio(self) -> float:
        return self.measured / self.bound if self.bound > 0 else math.inf


class UniquenessReport(StrictModel):
    ratio: float
    bound: float
    within_bound: bool


class EnergyResidual(StrictModel):
    t: float
    center: Tuple[float, float, float]
    scale: float
    value: float


class GronwallInput(StrictModel):
    A: float
    B: float
    T: float = math.inf
    T0: float = 1.0

    @model_validator(mode="after")
    def _check(self) -> "GronwallInput":
        if self.A < 0 or self.B < 0:
            raise ValueError("Gronwall constants A and B must be non-negative")
        if not self.T0 > 0 or not self.T > 0:
            raise ValueError("Gronwall horizons T and T0 must be positive")
        return self


class GronwallResult(StrictModel):
    T1: float
    bound: float


class PassiveBound(StrictModel):
    sup_bound: float
    grad_bound: float


class ActiveBound(StrictModel):
    T0_max: float
    sup_bound: float
    grad_bound: float


class ScheduleEntry(StrictModel):
    n: int
    norm_sq: float
    norm_sq_change_of_variables: float
    forcing_energy: float
    T_n: float
    horizon: float


class ExtensionSchedule(StrictModel):
    entries: List[ScheduleEntry]
    horizon_increasing: bool


class DSSNormReport(StrictModel):
    full: float
    shell: float
    ratio: float
    lower: float
    upper: float
    flagged: bool
    within_bounds: bool


class XNormReport(StrictModel):
    full_norm: float
    cell_norm: float
    ratio: float
    reconstructed_norm: float
    equivalence_valid: bool
    series_partial_sums: List[float]
    ratio_lower: float = 0.0
    ratio_upper: float = math.inf
    within_series_bounds: bool = False


class FixedPointIterate(StrictModel):
    k: int
    residual: float
    x_norm: float


class FixedPointTrace(StrictModel):
    iterates: List[FixedPointIterate]
    converged: bool
    relaxation: float
    ns_residual: Optional[float] = None
    apriori_radius: Optional[float] = None
    within_ball: Optional[bool] = None


class InitialDataSettings(StrictModel):
    kind: InitialDataKind = InitialDataKind.TAYLOR_GREEN
    amplitude: float = 1.0
    width: float = 1.0


class WeightsSettings(StrictModel):
    deltas: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 2.9])
    p: float = 2.0
    radii: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    ball_tolerance: float = 0.02


class FixpointSettings(StrictModel):
    omega: float = Field(default_factory=lambda: config.dss.omega)
    max_iter: int = 20
    tol: float = 1e-8
    ns_tolerance: float = 0.05


class ScheduleSettings(StrictModel):
    n_max: int = 5


class ExperimentConfig(StrictModel):
    experiment: ExperimentKind
    grid: GridSpec = Field(default_factory=GridSpec)
    weight: WeightSpec = Field(default_factory=WeightSpec)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    dss: Optional[DSSSpec] = None
    initial_data: InitialDataSettings = Field(default_factory=InitialDataSettings)
    weights: WeightsSettings = Field(default_factory=WeightsSettings)
    fixpoint: FixpointSettings = Field(default_factory=FixpointSettings)
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    output_dir: Optional[str] = None
    seed: Optional[int] = None
    snapshot_every: int = 0
    eps_sweep: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_invariants(self) -> "ExperimentConfig":
        if self.experiment in (ExperimentKind.NS_RUN, ExperimentKind.AD_RUN):
            self.weight.require_energy_range()
        if self.experiment == ExperimentKind.DSS_FIXPOINT:
            if not 4.0 / 3.0 < self.weight.delta <= 2:
                raise ValueError("gamma must be in (4/3,2] for dss_fixpoint runs")
            if not 0 < self.fixpoint.omega <= 1:
                raise ValueError("fixpoint.omega must be in (0,1]")
        if self.seed is None and self.needs_seed():
            raise ValueError("seed is required for randomized initial data")
        if any(eps <= 0 for eps in self.eps_sweep):
            raise ValueError("eps_sweep values must be positive")
        return self

    def needs_seed(self) -> bool:
        """Whether any requested construction is randomized."""
        if self.initial_data.kind in (InitialDataKind.RANDOM, InitialDataKind.DSS):
            return True
        if self.experiment in (ExperimentKind.AD_RUN, ExperimentKind.OPERATORS):
            return True
        return self.experiment == ExperimentKind.DSS_FIXPOINT


class SnapshotHeader(StrictModel):
    magic: str
    version: int
    shape: Tuple[int, int, int]
    half_width: float
    rank: FieldRank
    time: float


class CheckResult(StrictModel):
    name: str
    passed: bool
    detail: str = ""


class ExperimentReport(StrictModel):
    experiment: ExperimentKind
    output_dir: str
    files: List[str] = Field(default_factory=list)
    checks: List[CheckResult] = Field(default_factory=list)
    measured: Dict[str, float] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 0 if all(check.passed for check in self.checks) else 1


class LedgerVerification(StrictModel):
    path: str
    rows: int
    failures: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


class ErrorResponse(BaseModel):
    status: str = "error"
    message: str
    detail: Optional[str] = None
