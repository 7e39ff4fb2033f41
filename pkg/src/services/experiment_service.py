import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from src.config import config
from src.models import BoundComparison, CheckResult, DSSSpec, ExperimentConfig, ExperimentKind, ExperimentReport, \
    ForcingKind, ForcingSpec, GronwallInput, InitialDataKind, LedgerVerification, SnapshotHeader, Trajectory, WeightSpec
from src.services.dss_engine_service import DSSEngineService
from src.services.dynamics_service import DynamicsService
from src.services.energy_ledger_service import EnergyLedgerService
from src.services.field_service import FieldService
from src.services.grid_service import GridService
from src.services.snapshot_service import SnapshotService
from src.services.spectral_service import SpectralService
from src.services.weighted_space_service import WeightedSpaceService

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ConfigError(ValueError):
    """Experiment configuration that fails validation; the message names the offending key."""


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"])
        message = item["msg"].removeprefix("Value error, ")
        parts.append(f"{key}: {message}" if key else message)
    return "; ".join(parts)


class ExperimentService:
    def __init__(self, field_service: Optional[FieldService] = None,
                 weighted_space_service: Optional[WeightedSpaceService] = None,
                 dynamics_service: Optional[DynamicsService] = None,
                 ledger_service: Optional[EnergyLedgerService] = None,
                 dss_engine_service: Optional[DSSEngineService] = None,
                 snapshot_service: Optional[SnapshotService] = None):
        self.harness_config = config.harness
        self.field_service = field_service or FieldService()
        self.weighted_space_service = weighted_space_service or WeightedSpaceService()
        self.dynamics_service = dynamics_service or DynamicsService(self.field_service, self.weighted_space_service)
        self.ledger_service = ledger_service or EnergyLedgerService(self.weighted_space_service, self.field_service)
        self.dss_engine_service = dss_engine_service or DSSEngineService(
            self.dynamics_service, self.ledger_service, self.field_service)
        self.snapshot_service = snapshot_service or SnapshotService()
        self._runners: Dict[ExperimentKind, Callable[[ExperimentConfig, Path, ExperimentReport], None]] = {
            ExperimentKind.WEIGHTS: self._run_weights,
            ExperimentKind.OPERATORS: self._run_operators,
            ExperimentKind.NS_RUN: self._run_flow,
            ExperimentKind.AD_RUN: self._run_flow,
            ExperimentKind.DSS_FIXPOINT: self._run_fixpoint,
            ExperimentKind.SCHEDULE: self._run_schedule,
        }

    # Configuration

    @staticmethod
    def parse_config(payload: Union[str, dict]) -> ExperimentConfig:
        try:
            if isinstance(payload, str):
                return ExperimentConfig.model_validate_json(payload)
            return ExperimentConfig.model_validate(payload)
        except ValidationError as e:
            raise ConfigError(_describe(e)) from e

    def load_config(self, path: PathLike) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise RuntimeError(f"Failed to read config: {e}")
        try:
            json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        cfg = self.parse_config(text)
        logger.info(f"Loaded {cfg.experiment.value} config from {path}")
        return cfg

    @staticmethod
    def emit_config(cfg: ExperimentConfig) -> str:
        return cfg.model_dump_json(indent=2)

    # Shared builders

    def build_forcing(self, cfg: ExperimentConfig) -> Optional[ForcingSpec]:
        spec = cfg.solver.forcing
        if spec.kind == ForcingKind.ZERO or spec.amplitude == 0:
            return None
        if spec.profile is not None:
            return spec
        profile = self.field_service.gaussian_forcing_profile(cfg.grid, spec.amplitude, spec.width)
        return spec.model_copy(update={"profile": profile})

    def build_initial_data(self, cfg: ExperimentConfig) -> np.ndarray:
        dss = cfg.dss or (DSSSpec(gamma=cfg.weight.delta) if 1 < cfg.weight.delta <= 2 else DSSSpec())
        if dss.profile_seed is None:
            dss = dss.model_copy(update={"profile_seed": cfg.seed})
        if dss.profile_path and cfg.initial_data.kind == InitialDataKind.DSS:
            header, field = self.snapshot_service.read_snapshot(dss.profile_path)
            u0 = self.field_service.make_dss_field(dss, cfg.grid, field, self.snapshot_service.grid_of(header))
            return cfg.initial_data.amplitude * u0
        return self.field_service.initial_data(cfg.initial_data, cfg.grid, cfg.seed, dss)

    def _output_dir(self, cfg: ExperimentConfig) -> Path:
        if cfg.output_dir:
            return Path(cfg.output_dir)
        return Path(self.harness_config.output_root) / cfg.experiment.value

    # Runner

    def run_experiment(self, cfg: ExperimentConfig) -> ExperimentReport:
        """Run one experiment, write its files and return the report with every declared check."""
        output = self._output_dir(cfg)
        output.mkdir(parents=True, exist_ok=True)
        report = ExperimentReport(experiment=cfg.experiment, output_dir=str(output),
                                  config=cfg.model_dump(mode="json"))
        logger.info(f"Running {cfg.experiment.value} experiment into {output}")
        self._runners[cfg.experiment](cfg, output, report)

        report.files.append(self.snapshot_service.write_json(output / "report.json", report.model_dump(mode="json")))
        failed = [check.name for check in report.checks if not check.passed]
        if failed:
            logger.warning(f"{cfg.experiment.value} failed checks: {', '.join(failed)}")
        else:
            logger.info(f"{cfg.experiment.value} passed {len(report.checks)} checks")
        return report

    def run_many(self, configs: Sequence[ExperimentConfig], jobs: Optional[int] = None) -> List[ExperimentReport]:
        jobs = jobs or self.harness_config.jobs
        if jobs <= 1 or len(configs) <= 1:
            return [self.run_experiment(cfg) for cfg in configs]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(self.run_experiment, configs))

    @staticmethod
    def _check(report: ExperimentReport, name: str, passed: bool, detail: str = "") -> None:
        report.checks.append(CheckResult(name=name, passed=bool(passed), detail=detail))

    # Experiments

    def _run_weights(self, cfg: ExperimentConfig, output: Path, report: ExperimentReport) -> None:
        settings = cfg.weights
        rows = []
        for delta in settings.deltas:
            w = WeightSpec(delta=delta)
            certificates = []
            for radius in settings.radii:
                balls = [((0.0, 0.0, 0.0), radius), ((radius, 0.0, 0.0), 0.5 * radius)]
                value = self.weighted_space_service.muckenhoupt_certificate(w, settings.p, balls)
                certificates.append(value)
                rows.append([delta, radius, value])
            finite = all(math.isfinite(value) for value in certificates)
            self._check(report, f"certificate_finite[delta={delta:g}]", finite)
            if delta < 3:
                change = abs(certificates[-1] - certificates[-2]) / certificates[-2] if len(certificates) > 1 else 0.0
                report.measured[f"certificate_change[delta={delta:g}]"] = change
                if delta <= 2:
                    self._check(report, f"certificate_plateau[delta={delta:g}]", change <= 0.05, f"change={change:.3g}")
            else:
                growing = all(b > a for a, b in zip(certificates, certificates[1:]))
                self._check(report, f"certificate_growth[delta={delta:g}]", growing)
            report.measured[f"certificate[delta={delta:g}]"] = certificates[-1]

        grid = GridService.for_grid(cfg.grid)
        ball = (grid.radius <= 1.0).astype(float)
        golden = self.weighted_space_service.weighted_norm(ball, 2, WeightSpec(delta=2.0), cfg.grid) ** 2
        exact = 4.0 * math.pi * (1.5 - 2.0 * math.log(2.0))
        gap = abs(golden - exact) / exact
        report.measured.update({"ball_norm_sq": golden, "ball_norm_sq_exact": exact, "ball_norm_gap": gap})
        self._check(report, "ball_norm", gap <= settings.ball_tolerance, f"relative gap {gap:.3e}")
        report.files.append(self.snapshot_service.write_table(output / "certificates.csv",
                                                              ["delta", "radius", "certificate"], rows))

    def _run_operators(self, cfg: ExperimentConfig, output: Path, report: ExperimentReport) -> None:
        g = cfg.grid
        spectral = SpectralService.for_grid(g)
        grid = GridService.for_grid(g)
        worst = {"riesz_sum": 0.0, "projection_idempotent": 0.0, "gradients_annihilated": 0.0,
                 "projection_divergence_free": 0.0}
        for i in range(20):
            seed = cfg.seed + i
            f = self.field_service.random_scalar(g, seed)
            riesz_sum = sum(spectral.riesz_transform(spectral.riesz_transform(f, j), j) for j in range(3))
            target = -(f - grid.mean(f))
            worst["riesz_sum"] = max(worst["riesz_sum"], grid.l2_norm(riesz_sum - target) / grid.l2_norm(f))

            v = self.field_service.random_solenoidal(g, seed) + spectral.gradient(f)
            projected = spectral.leray_project(v)
            scale = grid.l2_norm(v)
            worst["projection_idempotent"] = max(worst["projection_idempotent"],
                                                 grid.l2_norm(spectral.leray_project(projected) - projected) / scale)
            gradient = spectral.gradient(f)
            worst["gradients_annihilated"] = max(worst["gradients_annihilated"],
                                                 grid.l2_norm(spectral.leray_project(gradient))
                                                 / grid.l2_norm(gradient))
            worst["projection_divergence_free"] = max(worst["projection_divergence_free"],
                                                      grid.l2_norm(spectral.divergence(projected)) / scale)
        for name, value in worst.items():
            report.measured[name] = value
            self._check(report, name, value < 1e-10, f"max relative error {value:.3e}")

    def _run_flow(self, cfg: ExperimentConfig, output: Path, report: ExperimentReport) -> None:
        g, w = cfg.grid, cfg.weight
        forcing = self.build_forcing(cfg)
        u0 = self.build_initial_data(cfg)
        if cfg.experiment == ExperimentKind.NS_RUN:
            trajectory = self.dynamics_service.run_ns(u0, cfg.solver, g, forcing)
            b_norm = 0.0
        else:
            b = self.field_service.random_solenoidal(g, cfg.seed)
            trajectory = self.dynamics_service.run_ad(b, u0, forcing, cfg.solver, g)
            b_norm = self.ledger_service.b_norm_cumulative(trajectory, w.delta)

        ledger = self.ledger_service.ledger_from_trajectory(trajectory, w)
        report.files.append(self.snapshot_service.write_ledger(output / "ledger.csv", ledger))
        self._write_snapshots(cfg, output, trajectory, report)

        tol = ledger[0].tol_disc
        min_a = min(entry.slack_A + entry.tol_disc for entry in ledger)
        min_b = min(entry.slack_B + entry.tol_disc for entry in ledger)
        monotone = all(b.dissipation_cum >= a.dissipation_cum for a, b in zip(ledger, ledger[1:]))
        spectral = SpectralService.for_grid(g)
        grid = GridService.for_grid(g)
        divergence = max(grid.l2_norm(spectral.divergence(s.u)) / max(grid.l2_norm(s.u), 1e-300)
                         for s in trajectory.states)
        report.measured.update({"tol_disc": tol, "min_slack_A": min_a - tol, "min_slack_B": min_b - tol,
                                "max_divergence": divergence, "dt": trajectory.dt})
        self._check(report, "slack_A", min_a >= 0, f"min slack_A + tol_disc = {min_a:.3e}")
        self._check(report, "slack_B", min_b >= 0, f"min slack_B + tol_disc = {min_b:.3e}")
        self._check(report, "dissipation_monotone", monotone)
        self._check(report, "divergence_free", divergence < config.numerics.divergence_tol, f"{divergence:.3e}")

        calibrated = self.ledger_service.calibrate_c_gamma([ledger])
        configured = self.ledger_service.ledger_config.c_gamma
        c_gamma = max(configured, calibrated)
        report.measured.update({"c_gamma_calibrated": calibrated, "c_gamma_used": c_gamma})
        self._check(report, "c_gamma_calibration", calibrated <= configured,
                    f"calibrated {calibrated:.6g} against configured {configured:.6g}")

        bounds: List[BoundComparison] = []
        u0_norm = math.sqrt(ledger[0].lhs_energy)
        if cfg.experiment == ExperimentKind.AD_RUN:
            F_cum = self.ledger_service.forcing_norm_cumulative(forcing, w.delta, cfg.solver.T, trajectory.dt, g)
            bound = self.ledger_service.passive_bound(u0_norm, math.sqrt(F_cum), b_norm, w.delta, cfg.solver.T,
                                                      c_gamma)
            measured = max(math.sqrt(entry.lhs_energy) for entry in ledger)
            report.measured.update({"sup_norm": measured, "passive_bound": bound.sup_bound})
            self._check(report, "passive_bound", measured <= bound.sup_bound)
            bounds.append(BoundComparison(name="passive_sup_norm", measured=measured, bound=bound.sup_bound))

            gap = self.dynamics_service.uniqueness_gap(b, u0, forcing, cfg.solver, g, 1e-3, w, cfg.seed + 1,
                                                       c_gamma=c_gamma)
            report.measured.update({"uniqueness_ratio": gap.ratio, "uniqueness_bound": gap.bound})
            self._check(report, "uniqueness_bound", gap.within_bound, f"{gap.ratio:.3e} <= {gap.bound:.3e}")
            bounds.append(BoundComparison(name="uniqueness_ratio", measured=gap.ratio, bound=gap.bound))
        else:
            control = self.ledger_service.ledger_config.control_constant
            bound, F_cum = self.ledger_service.active_bound_for_forcing(u0_norm, forcing, control, w.delta, c_gamma,
                                                                        trajectory.dt, g)
            measured = max(entry.lhs_energy for entry in ledger if entry.t <= bound.T0_max + 1e-12)
            report.measured.update({"sup_energy": measured, "active_bound": bound.sup_bound,
                                    "T0_max": bound.T0_max, "forcing_energy_T0": F_cum})
            self._check(report, "active_bound", measured <= bound.sup_bound)
            bounds.append(BoundComparison(name="active_sup_energy", measured=measured, bound=bound.sup_bound))
            self._check_local_energy(trajectory, w, tol, report)
            if cfg.eps_sweep:
                self._run_eps_sweep(cfg, u0, forcing, output, report)
        report.files.append(self.snapshot_service.write_bounds(output / "bounds.csv", bounds))

    def _check_local_energy(self, trajectory: Trajectory, w: WeightSpec, tol: float,
                            report: ExperimentReport) -> None:
        if len(trajectory) < 3:
            logger.warning("Skipping local energy check: fewer than 3 time samples")
            return
        residuals = self.dynamics_service.energy_balance_residual(trajectory, w)
        worst = min(residual.value for residual in residuals)
        report.measured["min_local_energy"] = worst
        self._check(report, "local_energy", worst >= -tol, f"min <mu, phi> = {worst:.3e} over {len(residuals)} tests")

    def _run_eps_sweep(self, cfg: ExperimentConfig, u0: np.ndarray, forcing: Optional[ForcingSpec], output: Path,
                       report: ExperimentReport) -> None:
        entries = self.dynamics_service.epsilon_sweep(u0, cfg.solver, cfg.grid, cfg.eps_sweep, forcing)
        rows = [[entry.eps, entry.distance, entry.sup_energy] for entry in entries]
        report.files.append(self.snapshot_service.write_table(output / "eps_sweep.csv",
                                                              ["eps", "distance", "sup_energy"], rows))
        distances = [entry.distance for entry in entries]
        converging = all(b <= a + 1e-12 for a, b in zip(distances, distances[1:]))
        report.measured["eps_sweep_max_distance"] = distances[0]
        self._check(report, "eps_convergence", converging, ", ".join(f"{d:.3e}" for d in distances))

    def _write_snapshots(self, cfg: ExperimentConfig, output: Path, trajectory: Trajectory,
                         report: ExperimentReport) -> None:
        if cfg.snapshot_every <= 0:
            return
        for state in trajectory.states[::cfg.snapshot_every]:
            path = output / f"u_{state.step:05d}.wlry"
            report.files.append(self.snapshot_service.write_snapshot(path, state.u, cfg.grid, state.t))

    def _run_fixpoint(self, cfg: ExperimentConfig, output: Path, report: ExperimentReport) -> None:
        g = cfg.grid
        dss = cfg.dss or DSSSpec(gamma=cfg.weight.delta, profile_seed=cfg.seed)
        if dss.profile_seed is None:
            dss = dss.model_copy(update={"profile_seed": cfg.seed})
        w = WeightSpec(delta=cfg.weight.delta)
        u0 = self.field_service.make_dss_field(dss, g)
        norm = self.weighted_space_service.weighted_norm(u0, 2, w, g)
        if norm > 0:
            u0 = u0 * (cfg.initial_data.amplitude / norm)
        forcing = self.build_forcing(cfg)
        settings, solver = cfg.fixpoint, cfg.solver

        trajectory, trace = self.dss_engine_service.fixed_point_iterate(
            u0, forcing, solver.eps, cfg.weight.delta, dss.lam, settings.omega, settings.max_iter, settings.tol,
            g, solver.T, solver.dt)
        report.files.append(self.snapshot_service.write_trace(output / "trace.csv", trace))
        self._write_snapshots(cfg, output, trajectory, report)

        report.measured.update({"iterations": float(len(trace.iterates)),
                                "final_residual": trace.iterates[-1].residual})
        try:
            report.measured["initial_drift"] = self.field_service.dss_drift(u0, dss.lam, g)
        except ValueError as e:
            logger.warning(f"Skipping DSS drift: {e}")
        self._check(report, "converged", trace.converged, f"final residual {trace.iterates[-1].residual:.3e}")
        if trace.converged:
            report.measured.update({"ns_residual": trace.ns_residual, "apriori_radius": trace.apriori_radius})
            self._check(report, "ns_residual", trace.ns_residual <= settings.ns_tolerance,
                        f"relative residual {trace.ns_residual:.3e}")
            self._check(report, "apriori_ball", bool(trace.within_ball))
            comparison = BoundComparison(name="apriori_x_norm", measured=trace.iterates[-1].x_norm,
                                         bound=trace.apriori_radius)
            report.files.append(self.snapshot_service.write_bounds(output / "bounds.csv", [comparison]))

    def _run_schedule(self, cfg: ExperimentConfig, output: Path, report: ExperimentReport) -> None:
        lam = cfg.dss.lam if cfg.dss else config.dss.lam
        u0 = self.build_initial_data(cfg)
        schedule = self.ledger_service.global_extension_schedule(
            u0, self.build_forcing(cfg), cfg.weight.delta, lam, cfg.schedule.n_max, cfg.grid)
        rows = [[e.n, e.norm_sq, e.norm_sq_change_of_variables, e.forcing_energy, e.T_n, e.horizon]
                for e in schedule.entries]
        report.files.append(self.snapshot_service.write_table(
            output / "schedule.csv", ["n", "norm_sq", "norm_sq_change_of_variables", "forcing_energy", "T_n",
                                      "horizon"], rows))
        agreement = max(abs(e.norm_sq - e.norm_sq_change_of_variables) / max(e.norm_sq_change_of_variables, 1e-300)
                        for e in schedule.entries)
        report.measured["norm_agreement"] = agreement
        self._check(report, "change_of_variables", agreement < 0.01, f"max relative gap {agreement:.3e}")
        self._check(report, "horizon_increasing", schedule.horizon_increasing)

        gronwall = self.ledger_service.gronwall_T1(GronwallInput(A=1.0, B=1.0, T0=1.0))
        report.measured.update({"gronwall_T1": gronwall.T1, "gronwall_bound": gronwall.bound})

    # Offline verification

    def verify_ledger(self, path: PathLike) -> LedgerVerification:
        """Re-check both slacks and dissipation monotonicity on a written ledger."""
        entries = self.snapshot_service.read_ledger(path)
        failures = []
        for index, entry in enumerate(entries):
            if entry.slack_A < -entry.tol_disc:
                failures.append(f"row {index} (t={entry.t:g}): slack_A={entry.slack_A:.3e} < -tol_disc")
            if entry.slack_B < -entry.tol_disc:
                failures.append(f"row {index} (t={entry.t:g}): slack_B={entry.slack_B:.3e} < -tol_disc")
            if index and entry.dissipation_cum < entries[index - 1].dissipation_cum:
                failures.append(f"row {index} (t={entry.t:g}): dissipation_cum decreased")
        return LedgerVerification(path=str(path), rows=len(entries), failures=failures)

    def snapshot_info(self, path: PathLike) -> SnapshotHeader:
        return self.snapshot_service.snapshot_info(path)
