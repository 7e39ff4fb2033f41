import os

from pydantic import BaseModel, Field


class NumericsConfig(BaseModel):
    grid_n: int = Field(default_factory=lambda: int(os.environ.get("WLRY_GRID_N", "32")))
    half_width: float = Field(default_factory=lambda: float(os.environ.get("WLRY_HALF_WIDTH", "8.0")))
    dealias_fraction: float = Field(
        default_factory=lambda: float(os.environ.get("WLRY_DEALIAS_FRACTION", str(2.0 / 3.0))))
    cfl_number: float = Field(default_factory=lambda: float(os.environ.get("WLRY_CFL_NUMBER", "0.5")))
    divergence_tol: float = Field(default_factory=lambda: float(os.environ.get("WLRY_DIVERGENCE_TOL", "1e-8")))


class WeightConfig(BaseModel):
    gamma: float = Field(default_factory=lambda: float(os.environ.get("WLRY_GAMMA", "2.0")))
    eps: float = Field(default_factory=lambda: float(os.environ.get("WLRY_WEIGHT_EPS", "0.0")))
    monte_carlo_seed: int = Field(
        default_factory=lambda: int(os.environ.get("WLRY_MONTE_CARLO_SEED", str(0x5EED))))
    monte_carlo_samples: int = Field(
        default_factory=lambda: int(os.environ.get("WLRY_MONTE_CARLO_SAMPLES", "1000000")))


class SolverDefaults(BaseModel):
    dt: float = Field(default_factory=lambda: float(os.environ.get("WLRY_DT", "0.01")))
    horizon: float = Field(default_factory=lambda: float(os.environ.get("WLRY_HORIZON", "0.1")))
    mollifier_eps: float = Field(default_factory=lambda: float(os.environ.get("WLRY_MOLLIFIER_EPS", "0.1")))
    max_cfl_restarts: int = Field(default_factory=lambda: int(os.environ.get("WLRY_MAX_CFL_RESTARTS", "6")))


class LedgerConfig(BaseModel):
    c_gamma: float = Field(default_factory=lambda: float(os.environ.get("WLRY_C_GAMMA", "16.0")))
    tol_factor: float = Field(default_factory=lambda: float(os.environ.get("WLRY_TOL_FACTOR", "10.0")))
    safety_factor: float = Field(default_factory=lambda: float(os.environ.get("WLRY_SAFETY_FACTOR", "2.0")))
    control_constant: float = Field(
        default_factory=lambda: float(os.environ.get("WLRY_CONTROL_CONSTANT", "1.0")))


class DSSConfig(BaseModel):
    lam: float = Field(default_factory=lambda: float(os.environ.get("WLRY_LAMBDA", "2.0")))
    profile_seed: int = Field(default_factory=lambda: int(os.environ.get("WLRY_PROFILE_SEED", str(0xD55))))
    profile_modes: int = Field(default_factory=lambda: int(os.environ.get("WLRY_PROFILE_MODES", "6")))
    core_cells: int = Field(default_factory=lambda: int(os.environ.get("WLRY_CORE_CELLS", "4")))
    seam_blend: float = Field(default_factory=lambda: float(os.environ.get("WLRY_SEAM_BLEND", "0.1")))
    omega: float = Field(default_factory=lambda: float(os.environ.get("WLRY_OMEGA", "0.5")))
    resymmetrize_every: int = Field(
        default_factory=lambda: int(os.environ.get("WLRY_RESYMMETRIZE_EVERY", "5")))


class HarnessConfig(BaseModel):
    output_root: str = Field(default_factory=lambda: os.environ.get("WLRY_OUTPUT_ROOT", "./runs"))
    csv_digits: int = Field(default_factory=lambda: int(os.environ.get("WLRY_CSV_DIGITS", "17")))
    snapshot_version: int = Field(default_factory=lambda: int(os.environ.get("WLRY_SNAPSHOT_VERSION", "1")))
    jobs: int = Field(default_factory=lambda: int(os.environ.get("WLRY_JOBS", "1")))
    log_level: str = Field(default_factory=lambda: os.environ.get("LOG_LEVEL", "info"))


class ApiConfig(BaseModel):
    port: int = Field(default_factory=lambda: int(os.environ.get("PORT", "8000")))


class AppConfig(BaseModel):
    numerics: NumericsConfig = Field(default_factory=NumericsConfig)
    weight: WeightConfig = Field(default_factory=WeightConfig)
    solver: SolverDefaults = Field(default_factory=SolverDefaults)
    ledger: LedgerConfig = Field(default_factory=LedgerConfig)
    dss: DSSConfig = Field(default_factory=DSSConfig)
    harness: HarnessConfig = Field(default_factory=HarnessConfig)
    api: ApiConfig = Field(default_factory=ApiConfig)


# Singleton config instance
config = AppConfig()
