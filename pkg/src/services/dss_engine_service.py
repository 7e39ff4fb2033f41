import logging
import math
from typing import List, Optional, Tuple

import numpy as np

from src.config import config
from src.models import AdvectionMode, FixedPointIterate, FixedPointTrace, FlowState, ForcingSpec, \
    GridSpec, SolverConfig, Trajectory, WeightSpec, XNormReport
from src.services.dynamics_service import AdvectionSource, DynamicsService
from src.services.energy_ledger_service import EnergyLedgerService, cumulative_trapezoid
from src.services.field_service import FieldService
from src.services.grid_service import GridService
from src.services.spectral_service import SpectralService

logger = logging.getLogger(__name__)

EQUIVALENCE_GAMMA = 4.0 / 3.0


class DSSEngineService:
    def __init__(self, dynamics_service: Optional[DynamicsService] = None,
                 ledger_service: Optional[EnergyLedgerService] = None,
                 field_service: Optional[FieldService] = None):
        self.dss_config = config.dss
        self.field_service = field_service or FieldService()
        self.dynamics_service = dynamics_service or DynamicsService(field_service=self.field_service)
        self.ledger_service = ledger_service or EnergyLedgerService(field_service=self.field_service)

    # Norms

    @staticmethod
    def _time_integral(densities: List[float], dt: float, horizon: float) -> float:
        cumulative = cumulative_trapezoid(densities, dt)
        times = dt * np.arange(len(densities))
        return float(np.interp(horizon, times, cumulative))

    def cell_norm(self, fields: List[np.ndarray], dt: float, lam: float, T: float, g: GridSpec) -> float:
        """||f|| in L3 of (0, T/lam^2) x {|x| < 1/lam}, unweighted."""
        grid = GridService.for_grid(g)
        cell = grid.radius < 1.0 / lam
        densities = [grid.integrate(GridService.magnitude(f) ** 3 * cell) for f in fields]
        return self._time_integral(densities, dt, T / lam ** 2) ** (1.0 / 3.0)

    def xnorm(self, trajectory: Trajectory, lam: float, gamma: float, T: Optional[float] = None,
              series_terms: int = 12) -> XNormReport:
        """Direct L3(w_{3 gamma/2}) norm, cell norm, and the shell-by-shell scaling reconstruction."""
        g = trajectory.grid
        grid = GridService.for_grid(g)
        T = trajectory.times[-1] if T is None else T
        dt = trajectory.dt
        weight = (1.0 + grid.radius) ** (-1.5 * gamma)
        top = math.floor(math.log(0.5 * g.half_width) / math.log(lam) + 1e-12)
        region = grid.radius <= lam ** top
        cubes = [GridService.magnitude(s.u) ** 3 for s in trajectory.states]

        full = self._time_integral([grid.integrate(c * weight * region) for c in cubes], dt, T)
        cell = self.cell_norm(trajectory.velocities(), dt, lam, T, g)

        # shells lam^(k-1) < |x| <= lam^k pulled back onto the unit annulus
        annulus = grid.ball_mask(1.0, 1.0 / lam)
        inner = grid.radius <= 1.0 / lam
        reconstructed = self._time_integral([grid.integrate(c * weight * inner) for c in cubes], dt, T)
        for k in range(top + 1):
            pulled = (1.0 + lam ** k * grid.radius) ** (-1.5 * gamma) * annulus
            densities = [grid.integrate(c * pulled) for c in cubes]
            reconstructed += lam ** (2 * k) * self._time_integral(densities, dt, T / lam ** (2 * k))

        exponent = 2.0 - 1.5 * gamma
        partial_sums = list(np.cumsum([lam ** (k * exponent) for k in range(series_terms)]))
        valid = gamma > EQUIVALENCE_GAMMA and cell > 0
        ratio = full ** (1.0 / 3.0) / cell if cell > 0 else float("nan")
        lower, upper = self.ratio_bounds(lam, gamma, top)
        within = valid and lower * (1 - 1e-9) <= ratio <= upper * (1 + 1e-9)
        return XNormReport(full_norm=full ** (1.0 / 3.0), cell_norm=cell, ratio=ratio,
                           reconstructed_norm=reconstructed ** (1.0 / 3.0), equivalence_valid=valid,
                           series_partial_sums=[float(s) for s in partial_sums],
                           ratio_lower=lower, ratio_upper=upper, within_series_bounds=within)

    @staticmethod
    def ratio_bounds(lam: float, gamma: float, shells: int) -> Tuple[float, float]:
        """Bounds on full_norm / cell_norm for a lam-DSS flow whose box holds `shells` shells past |x| = 1.

        The cell carries lam^-2 of the unit-ball integral; the weight is at least 2^(-3 gamma/2) on
        the ball and at most (1 + lam^(k-1))^(-3 gamma/2) on shell k, which scales by lam^(2k).
        """
        tail = sum(lam ** (2 * k) * (1.0 + lam ** (k - 1)) ** (-1.5 * gamma) for k in range(1, shells + 1))
        lower = (2.0 ** (-1.5 * gamma) * lam ** 2) ** (1.0 / 3.0)
        upper = (lam ** 2 * (1.0 + tail)) ** (1.0 / 3.0)
        return float(lower), float(upper)

    # Linear solution map

    def _solver(self, eps: float, T: float, dt: float, forcing: Optional[ForcingSpec]) -> SolverConfig:
        return SolverConfig(dt=dt, T=T, eps=eps, mollifier_time_dependent=True,
                            advection=AdvectionMode.FROZEN, forcing=forcing or ForcingSpec())

    def apply_L_eps(self, b: AdvectionSource, u0: np.ndarray, forcing: Optional[ForcingSpec], eps: float,
                    T: float, gamma: float, lam: float, g: GridSpec, dt: float) -> Trajectory:
        """Solve the linear problem transported by b * theta_{eps,t}."""
        if lam <= 1:
            raise ValueError(f"lambda must be greater than 1, got {lam}")
        cfg = self._solver(eps, T, dt, forcing)
        return self.dynamics_service.run_ad(b, u0, forcing, cfg, g)

    def heat_evolution(self, u0: np.ndarray, forcing: Optional[ForcingSpec], T: float, dt: float,
                       g: GridSpec) -> Trajectory:
        cfg = self._solver(0.0, T, dt, forcing)
        return self.dynamics_service.run_ad(None, u0, forcing, cfg, g)

    # Orbit symmetrization and rescaling

    @staticmethod
    def _state_at(trajectory: Trajectory, t: float) -> Optional[np.ndarray]:
        """Velocity at time t by linear interpolation between stored states."""
        position = t / trajectory.dt
        last = len(trajectory) - 1
        if position < -1e-9 or position > last + 1e-9:
            return None
        lower = min(int(math.floor(position + 1e-9)), last)
        fraction = position - lower
        if fraction < 1e-9 or lower == last:
            return trajectory.states[lower].u
        return (1.0 - fraction) * trajectory.states[lower].u + fraction * trajectory.states[lower + 1].u

    def symmetrize(self, trajectory: Trajectory, lam: float) -> Trajectory:
        """Average each state over lam^j u(lam^{2j} t, lam^j x), j in {-1, 0, 1}, where defined."""
        g = trajectory.grid
        grid = GridService.for_grid(g)
        spectral = SpectralService.for_grid(g)
        states = []
        for state in trajectory.states:
            total, count = state.u.copy(), np.ones(state.u.shape[1:])
            for j in (-1, 1):
                source = self._state_at(trajectory, lam ** (2 * j) * state.t)
                if source is None:
                    continue
                values, inside = grid.dilate(source, lam ** j)
                total += np.where(inside, lam ** j * values, 0.0)
                count += inside
            states.append(state.model_copy(update={"u": spectral.leray_project(total / count)}))
        return trajectory.model_copy(update={"states": states})

    def rescale_problem(self, u0: np.ndarray, forcing: Optional[ForcingSpec], lam: float, g: GridSpec,
                        trajectory: Optional[Trajectory] = None
                        ) -> Tuple[np.ndarray, GridSpec, Optional[ForcingSpec], Optional[Trajectory]]:
        """u_lam(t,x) = lam u(lam^2 t, lam x) and F_lam = lam^2 F(lam^2 t, lam x) on the box of half-width L/lam."""
        u0_scaled, scaled = self.field_service.rescale(u0, lam, g)
        forcing_scaled = self.field_service.rescale_forcing(forcing, lam, g)

        trajectory_scaled = None
        if trajectory is not None:
            states = []
            for state in trajectory.states:
                u, _ = self.field_service.rescale(state.u, lam, g)
                p, _ = self.field_service.rescale(state.p, lam, g, power=2.0)
                b = None if state.b is None else self.field_service.rescale(state.b, lam, g)[0]
                states.append(FlowState(t=state.t / lam ** 2, u=u, p=p, b=b, step=state.step))
            trajectory_scaled = Trajectory(grid=scaled, dt=trajectory.dt / lam ** 2, states=states,
                                           forcing=forcing_scaled)
        return u0_scaled, scaled, forcing_scaled, trajectory_scaled

    # Fixed point

    def _mix(self, previous: Trajectory, update: Trajectory, omega: float) -> Trajectory:
        states = [
            new.model_copy(update={"u": (1.0 - omega) * old.u + omega * new.u,
                                   "p": (1.0 - omega) * old.p + omega * new.p})
            for old, new in zip(previous.states, update.states)
        ]
        return update.model_copy(update={"states": states})

    def _pde_drift(self, u: np.ndarray, t: float, cfg: SolverConfig, g: GridSpec,
                   forcing: Optional[ForcingSpec]) -> np.ndarray:
        """-div(b~ u) - grad p + div F, with p from pressure_solve and b~ the mollified u."""
        spectral = SpectralService.for_grid(g)
        advecting = self.dynamics_service.advecting_field(u, t, cfg, g)
        F = self.dynamics_service.forcing_field(forcing, t, cfg, g)
        drift = -spectral.tensor_divergence(spectral.advection_tensor(advecting, u))
        if F is not None:
            drift = drift + spectral.tensor_divergence(F)
        return drift - spectral.gradient(spectral.pressure_solve(advecting, u, F))

    def ns_residual(self, trajectory: Trajectory, eps: float, forcing: Optional[ForcingSpec], lam: float) -> float:
        """Relative NS_eps residual on the cell, max over steps up to T/lam^2.

        Each step is checked against the Duhamel form of the equation with trapezoidal quadrature of
        the advection, pressure and forcing terms recomputed from the stored states at both ends.
        The result is scaled by the cell norm of the difference quotient of u.
        """
        g = trajectory.grid
        grid = GridService.for_grid(g)
        spectral = SpectralService.for_grid(g)
        cell = grid.radius < 1.0 / lam
        dt = trajectory.dt
        cfg = SolverConfig(dt=dt, T=trajectory.times[-1], eps=eps, mollifier_time_dependent=True,
                           advection=AdvectionMode.MOLLIFIED_SELF, forcing=forcing or ForcingSpec())
        heat = spectral.heat_multiplier(dt)

        def cell_l3(f: np.ndarray) -> float:
            return grid.integrate(GridService.magnitude(f) ** 3 * cell) ** (1.0 / 3.0)

        horizon = max(trajectory.times[-1] / lam ** 2, dt)
        drift = self._pde_drift(trajectory.states[0].u, 0.0, cfg, g, forcing)
        worst = 0.0
        for k in range(len(trajectory) - 1):
            current, following = trajectory.states[k], trajectory.states[k + 1]
            if following.t > horizon + 1e-12:
                break
            drift_next = self._pde_drift(following.u, following.t, cfg, g, forcing)
            quadrature = 0.5 * (spectral.apply(drift, heat) + drift_next)
            mismatch = (following.u - spectral.apply(current.u, heat)) / dt - quadrature
            scale = cell_l3((following.u - current.u) / dt)
            error = cell_l3(mismatch)
            worst = max(worst, error / scale if scale > 0 else error)
            drift = drift_next
        return worst

    def apriori_ball(self, u0_norm: float, F_norm_cum: float, gamma: float, T: float,
                     c_gamma: Optional[float] = None, lam: Optional[float] = None,
                     T0: Optional[float] = None) -> float:
        """X-norm radius on [0, T0], carried to T through the lam^2 time rescaling."""
        if not EQUIVALENCE_GAMMA < gamma <= 2:
            raise ValueError(f"gamma must be in (4/3,2] for the a priori ball, got {gamma}")
        c_gamma = self.ledger_service.ledger_config.c_gamma if c_gamma is None else c_gamma
        lam = self.dss_config.lam if lam is None else lam
        if T0 is None:
            control = self.ledger_service.ledger_config.control_constant
            active = self.ledger_service.active_bound(u0_norm, F_norm_cum, control, gamma, c_gamma)
            T0 = min(T, active.T0_max)
        size = 1.0 + u0_norm ** 2 + F_norm_cum
        periods = max(0, math.ceil(math.log(T / T0) / math.log(lam ** 2) - 1e-12)) if T > T0 else 0
        cube = c_gamma * T0 ** 0.25 * size ** 1.5 * lam ** (2 * periods)
        return cube ** (1.0 / 3.0)

    def fixed_point_iterate(self, u0: np.ndarray, forcing: Optional[ForcingSpec], eps: float, gamma: float,
                            lam: float, omega: float, max_iter: int, tol: float, g: GridSpec, T: float,
                            dt: float) -> Tuple[Trajectory, FixedPointTrace]:
        """Damped Picard iteration v_{k+1} = (1 - omega) v_k + omega L_eps(v_k) from the heat evolution of u0."""
        if not 0 < omega <= 1:
            raise ValueError(f"omega must be in (0,1], got {omega}")
        if not EQUIVALENCE_GAMMA < gamma <= 2:
            raise ValueError(f"gamma must be in (4/3,2] for the fixed point, got {gamma}")

        iterate = self.heat_evolution(u0, forcing, T, dt, g)
        iterates: List[FixedPointIterate] = []
        converged = False
        for k in range(max_iter):
            update = self.apply_L_eps(iterate, u0, forcing, eps, T, gamma, lam, g, iterate.dt)
            mixed = self._mix(iterate, update, omega)
            gaps = [new.u - old.u for old, new in zip(iterate.states, mixed.states)]
            residual = self.cell_norm(gaps, iterate.dt, lam, T, g)
            iterate = mixed
            iterates.append(FixedPointIterate(k=k, residual=residual,
                                              x_norm=self.xnorm(iterate, lam, gamma, T).full_norm))
            logger.debug(f"Fixed point iteration {k}: residual={residual:.3e}")
            if residual < tol:
                converged = True
                break
            if (k + 1) % self.dss_config.resymmetrize_every == 0:
                iterate = self.symmetrize(iterate, lam)

        trace = FixedPointTrace(iterates=iterates, converged=converged, relaxation=omega)
        if converged:
            w = WeightSpec(delta=gamma)
            u0_norm = self.ledger_service.weighted_space_service.weighted_norm(u0, 2, w, g)
            F_norm = self.ledger_service.forcing_norm_cumulative(forcing, gamma, T, dt, g)
            radius = self.apriori_ball(u0_norm, F_norm, gamma, T, lam=lam)
            trace.ns_residual = self.ns_residual(iterate, eps, forcing, lam)
            trace.apriori_radius = radius
            trace.within_ball = iterates[-1].x_norm <= radius
        logger.info(f"Fixed point {'converged' if converged else 'did not converge'} after {len(iterates)} "
                    f"iterations (omega={omega})")
        return iterate, trace
