import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from src.config import config
from src.models import ActiveBound, EnergyLedgerEntry, ExtensionSchedule, ForcingKind, ForcingSpec, GridSpec, \
    GronwallInput, GronwallResult, PassiveBound, ScheduleEntry, Trajectory, WeightSpec
from src.services.field_service import FieldService
from src.services.grid_service import GridService
from src.services.spectral_service import SpectralService
from src.services.weighted_space_service import WeightedSpaceService

logger = logging.getLogger(__name__)


def cumulative_trapezoid(values: Sequence[float], dt: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    if len(values) > 1:
        out[1:] = np.cumsum(0.5 * dt * (values[1:] + values[:-1]))
    return out


class EnergyLedgerService:
    def __init__(self, weighted_space_service: Optional[WeightedSpaceService] = None,
                 field_service: Optional[FieldService] = None):
        self.ledger_config = config.ledger
        self.weighted_space_service = weighted_space_service or WeightedSpaceService()
        self.field_service = field_service or FieldService()

    # Ledger

    def tol_disc(self, dt: float, h: float, initial_energy: float) -> float:
        return self.ledger_config.tol_factor * (dt + h ** 2) * initial_energy

    def _forcing(self, forcing: Optional[ForcingSpec], t: float, dt: float, g: GridSpec) -> Optional[np.ndarray]:
        if forcing is not None and forcing.kind in (ForcingKind.SELF_SIMILAR, ForcingKind.DSS):
            t = max(t, 0.5 * dt)
        return self.field_service.forcing_at(forcing, t, g)

    def ledger_from_trajectory(self, trajectory: Trajectory, w: WeightSpec,
                               c_gamma: Optional[float] = None) -> List[EnergyLedgerEntry]:
        """Both weighted energy controls, evaluated row by row along the trajectory."""
        g = trajectory.grid
        grid = GridService.for_grid(g)
        spectral = SpectralService.for_grid(g)
        c_gamma = self.ledger_config.c_gamma if c_gamma is None else c_gamma
        weight = self.weighted_space_service.weight_field(w, g)
        grad_weight = self.weighted_space_service.weight_gradient(w, g)
        b_weight = WeightSpec(delta=1.5 * w.delta, eps=w.eps)

        series = {key: [] for key in ("energy", "dissipation", "flux", "transport", "pressure",
                                      "forcing_a", "forcing_b", "forcing_sq", "gronwall")}
        for state in trajectory.states:
            grid.check_shape(state.u)
            grad_u = spectral.gradient(state.u)
            speed_sq = np.sum(state.u ** 2, axis=0)
            energy = grid.integrate(speed_sq * weight)
            grad_speed_sq = 2.0 * np.einsum("j...,ij...->i...", state.u, grad_u)

            series["energy"].append(energy)
            series["dissipation"].append(2.0 * grid.integrate(np.sum(grad_u ** 2, axis=(0, 1)) * weight))
            series["flux"].append(-grid.integrate(np.sum(grad_speed_sq * grad_weight, axis=0)))
            u_dot_grad_w = np.sum(state.u * grad_weight, axis=0)
            series["pressure"].append(2.0 * grid.integrate(state.p * u_dot_grad_w))

            b_norm_sq = 0.0
            if state.b is None:
                series["transport"].append(0.0)
            else:
                series["transport"].append(grid.integrate(speed_sq * np.sum(state.b * grad_weight, axis=0)))
                b_norm_sq = self.weighted_space_service.weighted_norm(state.b, 3, b_weight, g) ** 2

            F = self._forcing(trajectory.forcing, state.t, trajectory.dt, g)
            if F is None:
                series["forcing_a"].append(0.0)
                series["forcing_b"].append(0.0)
                series["forcing_sq"].append(0.0)
            else:
                series["forcing_a"].append(-2.0 * grid.integrate(np.sum(F * grad_u, axis=(0, 1)) * weight))
                u_grad_w = grad_weight[:, None] * state.u[None, :]
                series["forcing_b"].append(-2.0 * grid.integrate(np.sum(F * u_grad_w, axis=(0, 1))))
                series["forcing_sq"].append(grid.integrate(GridService.magnitude(F) ** 2 * weight))
            series["gronwall"].append((1.0 + b_norm_sq) * energy)

        dt = trajectory.dt
        cumulative = {key: cumulative_trapezoid(values, dt) for key, values in series.items() if key != "energy"}
        initial = series["energy"][0]
        tol = self.tol_disc(dt, g.h, initial)

        entries = []
        for k, state in enumerate(trajectory.states):
            terms = sum(cumulative[key][k] for key in ("flux", "transport", "pressure", "forcing_a", "forcing_b"))
            energy, dissipation = series["energy"][k], cumulative["dissipation"][k]
            slack_b = (initial + c_gamma * cumulative["forcing_sq"][k] + c_gamma * cumulative["gronwall"][k]
                       - (energy + 0.5 * dissipation))
            entries.append(EnergyLedgerEntry(
                t=state.t,
                lhs_energy=energy,
                dissipation_cum=dissipation,
                term_weight_flux=cumulative["flux"][k],
                term_transport=cumulative["transport"][k],
                term_pressure=cumulative["pressure"][k],
                term_forcing_a=cumulative["forcing_a"][k],
                term_forcing_b=cumulative["forcing_b"][k],
                slack_A=initial + terms - (energy + dissipation),
                slack_B=slack_b,
                tol_disc=tol,
            ))
        logger.debug(f"Ledger built: rows={len(entries)}, min slack_A={min(e.slack_A for e in entries):.3e}")
        return entries

    def calibrate_c_gamma(self, ledgers: Sequence[Sequence[EnergyLedgerEntry]],
                          c_used: Optional[float] = None) -> float:
        """Smallest constant keeping every slack_B row non-negative, times the safety factor."""
        c_used = self.ledger_config.c_gamma if c_used is None else c_used
        required = 0.0
        for ledger in ledgers:
            initial = ledger[0].lhs_energy
            for entry in ledger:
                deficit = entry.lhs_energy + 0.5 * entry.dissipation_cum - initial
                growth = (entry.slack_B + deficit) / c_used
                if deficit > 0:
                    required = max(required, deficit / growth if growth > 0 else math.inf)
        calibrated = required * self.ledger_config.safety_factor
        logger.info(f"Calibrated C_gamma={calibrated:.6g} from {len(ledgers)} ledgers")
        return calibrated

    # Closed-form bounds

    @staticmethod
    def gronwall_T1(inp: GronwallInput) -> GronwallResult:
        level = inp.A + inp.B * inp.T0
        blow_up = math.inf if inp.B == 0 or level == 0 else 1.0 / (4.0 * inp.B * level ** 2)
        return GronwallResult(T1=min(inp.T, inp.T0, blow_up), bound=math.sqrt(2.0) * level)

    def gronwall_oracle(self, inp: GronwallInput, alpha0: Optional[float] = None) -> float:
        """Max on [0, T1] of the solution of alpha' = B(alpha + alpha^3)."""
        result = self.gronwall_T1(inp)
        alpha0 = inp.A if alpha0 is None else alpha0
        if inp.B == 0:
            return alpha0
        horizon = result.T1 if math.isfinite(result.T1) else inp.T0
        solution = integrate.solve_ivp(lambda t, a: inp.B * (a + a ** 3), (0.0, horizon), [alpha0],
                                       method="DOP853", rtol=1e-12, atol=1e-14, max_step=horizon / 1000.0)
        if not solution.success:
            raise RuntimeError(f"Failed to integrate Gronwall comparison ODE: {solution.message}")
        return float(np.max(solution.y[0]))

    @staticmethod
    def passive_bound(u0_norm: float, F_norm_cum: float, b_norm_cum: float, gamma: float, T: float,
                      c_gamma: float) -> PassiveBound:
        """Bound on sup ||u|| and on ||grad u||_{L2 L2}; both share one expression."""
        value = (u0_norm + c_gamma * F_norm_cum) * math.exp(c_gamma * (T + T ** (1.0 / 3.0) * b_norm_cum ** 2))
        return PassiveBound(sup_bound=value, grad_bound=value)

    @staticmethod
    def active_bound(u0_norm: float, F_norm_cum: float, C0: float, gamma: float, c_gamma: float) -> ActiveBound:
        """T0_max and the bound on sup ||u||^2 and on int ||grad u||^2 over [0, T0_max]."""
        size = 1.0 + C0 ** 4 + u0_norm ** 2 + F_norm_cum
        T0_max = 1.0 / (c_gamma * (1.0 + C0 ** 4) * size ** 2)
        return ActiveBound(T0_max=T0_max, sup_bound=c_gamma * size, grad_bound=c_gamma * size)

    def active_bound_for_forcing(self, u0_norm: float, forcing: Optional[ForcingSpec], C0: float, gamma: float,
                                 c_gamma: float, dt: float, g: GridSpec) -> Tuple[ActiveBound, float]:
        """Active bound with the forcing energy taken over its own horizon T0_max.

        T0_max shrinks as the forcing energy grows, so the consistent horizon is the root of
        T = T0_max(int_0^T ||F||^2). Returns the bound and that forcing energy.
        """
        def energy(T: float) -> float:
            return self.forcing_norm_cumulative(forcing, gamma, T, dt, g)

        unforced = self.active_bound(u0_norm, 0.0, C0, gamma, c_gamma)
        if energy(unforced.T0_max) == 0.0:
            return unforced, 0.0

        def equation(T: float) -> float:
            return T - self.active_bound(u0_norm, energy(T), C0, gamma, c_gamma).T0_max

        root = optimize.brentq(equation, 0.0, unforced.T0_max, xtol=1e-14, rtol=1e-12)
        F_cum = energy(root)
        return self.active_bound(u0_norm, F_cum, C0, gamma, c_gamma), F_cum

    def b_norm_cumulative(self, trajectory: Trajectory, gamma: float, use_velocity: bool = False) -> float:
        """||b||_{L3((0,T), L3(w_{3 gamma/2}))} by trapezoid in time."""
        g = trajectory.grid
        w = WeightSpec(delta=1.5 * gamma)
        cubes = []
        for state in trajectory.states:
            field = state.u if use_velocity or state.b is None else state.b
            cubes.append(self.weighted_space_service.weighted_norm(field, 3, w, g) ** 3)
        return float(cumulative_trapezoid(cubes, trajectory.dt)[-1]) ** (1.0 / 3.0)

    def forcing_norm_cumulative(self, forcing: Optional[ForcingSpec], gamma: float, T: float, dt: float,
                                g: GridSpec) -> float:
        """int_0^T ||F||^2_{L2(w_gamma)} dt; closed form in time for the self-similar law."""
        if forcing is None or forcing.kind == ForcingKind.ZERO or forcing.profile is None:
            return 0.0
        if forcing.kind in (ForcingKind.SELF_SIMILAR, ForcingKind.DSS):
            return self.field_service.ss_forcing_cumulative(forcing.profile, gamma, T, g)
        density = self.weighted_space_service.weighted_norm(forcing.profile, 2, WeightSpec(delta=gamma), g) ** 2
        return density * T

    # Global extension

    def _change_of_variables_norm(self, u0: np.ndarray, gamma: float, lam: float, n: int, g: GridSpec) -> float:
        grid = GridService.for_grid(g)
        scale = lam ** n
        factor = scale ** (gamma - 1.0) * ((1.0 + grid.radius) / (scale + grid.radius)) ** gamma
        weight = (1.0 + grid.radius) ** (-gamma)
        return grid.integrate(np.sum(u0 ** 2, axis=0) * factor * weight)

    def _solve_horizon(self, norm_sq: float, forcing: Optional[ForcingSpec], gamma: float, c_gamma: float,
                       g: GridSpec) -> Tuple[float, float]:
        """Solve c (1 + ||v0||^2 + int_0^T ||F||^2)^2 T = 1 for T."""
        def equation(T: float) -> float:
            energy = self.forcing_norm_cumulative(forcing, gamma, T, T, g)
            return c_gamma * (1.0 + norm_sq + energy) ** 2 * T - 1.0

        upper = 1.0 / c_gamma
        if equation(upper) <= 0:
            return upper, self.forcing_norm_cumulative(forcing, gamma, upper, upper, g)
        root = optimize.brentq(equation, 0.0, upper, xtol=1e-14, rtol=1e-12)
        return root, self.forcing_norm_cumulative(forcing, gamma, root, root, g)

    def global_extension_schedule(self, u0: np.ndarray, forcing: Optional[ForcingSpec], gamma: float, lam: float,
                                  n_max: int, g: GridSpec, c_gamma: Optional[float] = None) -> ExtensionSchedule:
        """Horizons T_n for the rescaled problems v_{0,n} = lam^n u0(lam^n x)."""
        if n_max < 1:
            raise ValueError(f"n_max must be at least 1, got {n_max}")
        c_gamma = self.ledger_config.c_gamma if c_gamma is None else c_gamma
        w = WeightSpec(delta=gamma)
        entries: List[ScheduleEntry] = []
        for n in range(n_max + 1):
            rescaled, rescaled_grid = self.field_service.rescale(u0, lam ** n, g, power=1.0)
            norm_sq = self.weighted_space_service.weighted_norm(rescaled, 2, w, rescaled_grid) ** 2
            cov = self._change_of_variables_norm(u0, gamma, lam, n, g)
            rescaled_forcing = self.field_service.rescale_forcing(forcing, lam ** n, g)
            T_n, forcing_energy = self._solve_horizon(norm_sq, rescaled_forcing, gamma, c_gamma, rescaled_grid)
            entries.append(ScheduleEntry(n=n, norm_sq=norm_sq, norm_sq_change_of_variables=cov,
                                         forcing_energy=forcing_energy, T_n=T_n, horizon=lam ** (2 * n) * T_n))
        horizons = [entry.horizon for entry in entries]
        increasing = all(b > a for a, b in zip(horizons, horizons[1:]))
        logger.info(f"Extension schedule: n_max={n_max}, final horizon={horizons[-1]:.6g}, increasing={increasing}")
        return ExtensionSchedule(entries=entries, horizon_increasing=increasing)
