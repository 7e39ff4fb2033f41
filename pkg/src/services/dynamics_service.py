import logging
import math
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from src.config import config
from src.models import AdvectionMode, EnergyResidual, EpsilonSweepEntry, FlowState, ForcingKind, ForcingSpec, \
    GridSpec, SolverConfig, Trajectory, UniquenessReport, WeightSpec
from src.services.energy_ledger_service import EnergyLedgerService
from src.services.field_service import FieldService
from src.services.grid_service import GridService
from src.services.spectral_service import SpectralService
from src.services.weighted_space_service import WeightedSpaceService

logger = logging.getLogger(__name__)

AdvectionSource = Union[None, np.ndarray, Sequence[np.ndarray], Trajectory, Callable[[float], np.ndarray]]


class CFLViolationError(RuntimeError):
    """Raised when a step would move the advecting field more than cfl*h."""

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class DynamicsService:
    def __init__(self, field_service: Optional[FieldService] = None,
                 weighted_space_service: Optional[WeightedSpaceService] = None,
                 ledger_service: Optional[EnergyLedgerService] = None):
        self.field_service = field_service or FieldService()
        self.weighted_space_service = weighted_space_service or WeightedSpaceService()
        self.ledger_service = ledger_service or EnergyLedgerService(self.weighted_space_service, self.field_service)
        self.max_restarts = config.solver.max_cfl_restarts

    # Field plumbing

    @staticmethod
    def _frozen_at(b: AdvectionSource, index: int, t: float) -> Optional[np.ndarray]:
        if b is None:
            return None
        if isinstance(b, Trajectory):
            return b.states[min(int(round(t / b.dt)), len(b) - 1)].u
        if isinstance(b, np.ndarray):
            return b
        if callable(b):
            return b(t)
        return b[min(index, len(b) - 1)]

    def forcing_field(self, forcing: Optional[ForcingSpec], t: float, cfg: SolverConfig,
                      g: GridSpec) -> Optional[np.ndarray]:
        # the self-similar law is singular at t=0; sample it half a step later
        if forcing is not None and forcing.kind in (ForcingKind.SELF_SIMILAR, ForcingKind.DSS):
            t = max(t, 0.5 * cfg.dt)
        return self.field_service.forcing_at(forcing, t, g)

    def advecting_field(self, u: np.ndarray, t: float, cfg: SolverConfig, g: GridSpec,
                        frozen: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
        """The field b~ transporting u: u or frozen b, mollified when the config asks for it."""
        base = frozen if cfg.advection == AdvectionMode.FROZEN else u
        if base is None:
            return None
        mollifier = cfg.mollifier()
        if mollifier is None:
            return base
        if mollifier.time_dependent and t <= 0:
            scale = mollifier.eps * math.sqrt(cfg.dt)
        else:
            scale = mollifier.scale(t)
        return SpectralService.for_grid(g).mollify_at_scale(base, scale)

    def make_state(self, u: np.ndarray, t: float, step: int, cfg: SolverConfig, g: GridSpec,
                   b: AdvectionSource = None, forcing: Optional[ForcingSpec] = None) -> FlowState:
        advecting = self.advecting_field(u, t, cfg, g, self._frozen_at(b, step, t))
        F = self.forcing_field(forcing, t, cfg, g)
        p = SpectralService.for_grid(g).pressure_solve(advecting, u, F)
        return FlowState(t=t, u=u, p=p, b=advecting, step=step)

    def suggest_dt(self, b: Optional[np.ndarray], cfg: SolverConfig, g: GridSpec) -> float:
        """Largest dt with dt*max|b| <= cfl*h."""
        if b is None:
            return cfg.dt
        speed = float(np.max(GridService.magnitude(b)))
        if speed == 0:
            return cfg.dt
        return cfg.cfl * g.h / speed

    # Time stepping

    def step(self, state: FlowState, cfg: SolverConfig, g: GridSpec, b: AdvectionSource = None,
             forcing: Optional[ForcingSpec] = None) -> FlowState:
        """One exponential-integrator step: u <- e^{dt Lap}(u + dt P(-div(b~ u) + div F))."""
        spectral = SpectralService.for_grid(g)
        dt = cfg.dt
        if state.b is not None:
            allowed = self.suggest_dt(state.b, cfg, g)
            if dt > allowed:
                raise CFLViolationError(f"CFL violated at t={state.t:.6g}: dt={dt} > {allowed:.6g}", allowed)

        rhs = -spectral.tensor_divergence(spectral.advection_tensor(state.b, state.u))
        F = self.forcing_field(forcing, state.t + 0.5 * dt, cfg, g)
        if F is not None:
            rhs = rhs + spectral.tensor_divergence(F)
        u_next = spectral.apply(state.u + dt * spectral.leray_project(rhs), spectral.heat_multiplier(dt))
        u_next = spectral.leray_project(u_next)
        return self.make_state(u_next, state.t + dt, state.step + 1, cfg, g, b, forcing)

    def _integrate(self, u0: np.ndarray, cfg: SolverConfig, g: GridSpec, b: AdvectionSource,
                   forcing: Optional[ForcingSpec]) -> Trajectory:
        u0 = SpectralService.for_grid(g).leray_project(u0)
        state = self.make_state(u0, 0.0, 0, cfg, g, b, forcing)
        trajectory = Trajectory(grid=g, dt=cfg.dt, states=[state], forcing=forcing)
        for _ in range(cfg.steps):
            state = self.step(state, cfg, g, b, forcing)
            trajectory.states.append(state)
            logger.debug(f"t={state.t:.6g} max|u|={np.max(np.abs(state.u)):.3e}")
        return trajectory

    def run(self, u0: np.ndarray, cfg: SolverConfig, g: GridSpec, b: AdvectionSource = None,
            forcing: Optional[ForcingSpec] = None) -> Trajectory:
        """Integrate to cfg.T, restarting with a smaller uniform dt on CFL violations."""
        GridService.for_grid(g).check_shape(u0)
        forcing = forcing if forcing is not None else cfg.forcing
        for attempt in range(self.max_restarts + 1):
            try:
                trajectory = self._integrate(u0, cfg, g, b, forcing)
                logger.info(f"Run finished: advection={cfg.advection.value}, steps={cfg.steps}, dt={cfg.dt}")
                return trajectory
            except CFLViolationError as e:
                dt = cfg.T / math.ceil(cfg.T / e.suggested_dt)
                logger.warning(f"{e}; restarting with dt={dt:.6g} (attempt {attempt + 1})")
                cfg = cfg.model_copy(update={"dt": dt})
        raise RuntimeError(f"Failed to satisfy CFL after {self.max_restarts} restarts")

    def run_ns(self, u0: np.ndarray, cfg: SolverConfig, g: GridSpec,
               forcing: Optional[ForcingSpec] = None) -> Trajectory:
        if cfg.advection == AdvectionMode.FROZEN:
            raise ValueError("run_ns needs self or mollified_self advection")
        return self.run(u0, cfg, g, forcing=forcing)

    def run_ad(self, b: AdvectionSource, u0: np.ndarray, forcing: Optional[ForcingSpec], cfg: SolverConfig,
               g: GridSpec) -> Trajectory:
        """Linear advection-diffusion with a prescribed (time-indexed) advecting field."""
        cfg = cfg.model_copy(update={"advection": AdvectionMode.FROZEN})
        return self.run(u0, cfg, g, b=b, forcing=forcing)

    def epsilon_sweep(self, u0: np.ndarray, cfg: SolverConfig, g: GridSpec, eps_values: Sequence[float],
                      forcing: Optional[ForcingSpec] = None) -> List[EpsilonSweepEntry]:
        """Mollified NS runs over eps, each measured against the run at the smallest eps.

        distance is sup_t ||u_eps - u_ref||_{L2} / sup_t ||u_ref||_{L2}; entries are sorted by decreasing eps.
        """
        if not eps_values or min(eps_values) <= 0:
            raise ValueError("epsilon_sweep needs positive eps values")
        grid = GridService.for_grid(g)
        ordered = sorted(set(eps_values), reverse=True)
        runs = {eps: self.run_ns(u0, cfg.model_copy(update={"eps": eps, "advection": AdvectionMode.MOLLIFIED_SELF}),
                                 g, forcing) for eps in ordered}
        reference = runs[ordered[-1]]
        scale = max(grid.l2_norm(state.u) for state in reference.states)
        entries = []
        for eps in ordered:
            trajectory = runs[eps]
            if trajectory.dt != reference.dt:
                raise RuntimeError(f"eps={eps} restarted with dt={trajectory.dt}; rerun the sweep with a smaller dt")
            gap = max(grid.l2_norm(a.u - b.u) for a, b in zip(trajectory.states, reference.states))
            sup_energy = max(grid.l2_norm(state.u) ** 2 for state in trajectory.states)
            entries.append(EpsilonSweepEntry(eps=eps, distance=gap / scale if scale > 0 else gap,
                                             sup_energy=sup_energy))
            logger.info(f"eps={eps}: distance to eps={ordered[-1]} is {entries[-1].distance:.3e}")
        return entries

    def uniqueness_gap(self, b: AdvectionSource, u0: np.ndarray, forcing: Optional[ForcingSpec],
                       cfg: SolverConfig, g: GridSpec, perturbation_scale: float, w: WeightSpec,
                       seed: int, c_gamma: Optional[float] = None) -> UniquenessReport:
        """sup_t ||u1 - u2||_{L2(w)} / delta for runs from u0 and u0 + delta * noise.

        The difference solves the same linear problem with data delta * noise and no forcing, so the
        ratio is held against the passive bound for that data.
        """
        c_gamma = config.ledger.c_gamma if c_gamma is None else c_gamma
        noise = self.field_service.random_solenoidal(g, seed)
        first = self.run_ad(b, u0, forcing, cfg, g)
        b_norm = 0.0 if b is None else self.ledger_service.b_norm_cumulative(first, w.delta)
        noise_norm = self.weighted_space_service.weighted_norm(noise, 2, w, g)
        bound = EnergyLedgerService.passive_bound(noise_norm, 0.0, b_norm, w.delta, first.times[-1],
                                                  c_gamma).sup_bound
        if perturbation_scale == 0:
            return UniquenessReport(ratio=0.0, bound=bound, within_bound=True)
        second = self.run_ad(b, u0 + perturbation_scale * noise, forcing, cfg, g)
        gaps = [
            self.weighted_space_service.weighted_norm(a.u - c.u, 2, w, g)
            for a, c in zip(first.states, second.states)
        ]
        ratio = max(gaps) / perturbation_scale
        if ratio > bound:
            logger.warning(f"Uniqueness gap {ratio:.6g} exceeds the passive bound {bound:.6g}")
        return UniquenessReport(ratio=ratio, bound=bound, within_bound=ratio <= bound)

    # Local energy balance

    @staticmethod
    def _bump(offsets: np.ndarray, scale: float) -> np.ndarray:
        rho_sq = np.sum(offsets ** 2, axis=0) / scale ** 2
        return np.where(rho_sq < 1.0, (1.0 - rho_sq) ** 4, 0.0)

    def _balance_density(self, trajectory: Trajectory, k: int, cfg: SolverConfig) -> np.ndarray:
        """Integrand of <mu, .> on (t_k, t_{k+1}) at the midpoint."""
        g = trajectory.grid
        spectral = SpectralService.for_grid(g)
        first, second = trajectory.states[k], trajectory.states[k + 1]
        energy = [0.5 * np.sum(s.u ** 2, axis=0) for s in (first, second)]
        d_energy = (energy[1] - energy[0]) / trajectory.dt

        def terms(state, e):
            total = -spectral.laplacian(e) + np.sum(spectral.gradient(state.u) ** 2, axis=(0, 1))
            if state.b is not None:
                total = total + spectral.divergence(e * state.b)
            total = total + spectral.divergence(state.p * state.u)
            F = self.forcing_field(trajectory.forcing, state.t, cfg, g)
            if F is not None:
                total = total - np.sum(state.u * spectral.tensor_divergence(F), axis=0)
            return total

        return -(d_energy + 0.5 * (terms(first, energy[0]) + terms(second, energy[1])))

    def energy_balance_residual(self, trajectory: Trajectory, w: WeightSpec,
                                test_scales: Optional[List[float]] = None) -> List[EnergyResidual]:
        """<mu, Phi> for hats in time times weighted polynomial bumps in space."""
        if len(trajectory) < 3:
            raise ValueError("energy_balance_residual needs at least 3 time samples")
        g = trajectory.grid
        grid = GridService.for_grid(g)
        cfg = SolverConfig(dt=trajectory.dt, T=trajectory.dt * (len(trajectory) - 1))
        test_scales = test_scales or [8 * g.h, 16 * g.h]
        weight = self.weighted_space_service.weight_field(w, g)

        steps = len(trajectory) - 1
        densities = [self._balance_density(trajectory, k, cfg) for k in range(steps)]
        half = 2 if steps >= 4 else 1
        midpoints = np.arange(steps) + 0.5

        residuals: List[EnergyResidual] = []
        for scale in test_scales:
            centers = np.arange(-0.5 * g.half_width, 0.5 * g.half_width + 1e-9, scale)
            for cx in centers:
                for cy in centers:
                    for cz in centers:
                        center = (float(cx), float(cy), float(cz))
                        spatial = self._bump(grid.offsets(center), scale) * weight
                        pairings = [grid.integrate(d * spatial) for d in densities]
                        for c in range(half, steps - half + 1, half):
                            hat = np.clip(1.0 - np.abs(midpoints - c) / half, 0.0, None)
                            value = trajectory.dt * float(np.dot(hat, pairings))
                            residuals.append(EnergyResidual(t=c * trajectory.dt, center=center, scale=scale,
                                                            value=value))
        return residuals
