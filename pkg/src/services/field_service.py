import logging
import math
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import integrate

from src.config import config
from src.models import DSSNormReport, DSSSpec, ForcingKind, ForcingSpec, GridSpec, InitialDataKind, \
    InitialDataSettings
from src.services.grid_service import GridService
from src.services.spectral_service import SpectralService
from src.services.weighted_space_service import cutoff

logger = logging.getLogger(__name__)

SphereFunction = Callable[[np.ndarray], np.ndarray]


class RandomShellProfile:
    """Seeded degree-zero potential, exactly log-periodic in |y| with period lam.

    A(y) = sum_m a_m cos(kappa_m . sigma + 2 pi j_m log_lam|y| + phase_m), sigma = y/|y|. Every other
    mode also winds once per shell so the field is lam-DSS without being self-similar.
    """

    def __init__(self, seed: int, modes: int, amplitude: float = 1.0, lam: float = 2.0):
        if lam <= 1:
            raise ValueError(f"lambda must be greater than 1, got {lam}")
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal((modes, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        self.wavevectors = direction * rng.uniform(0.5, 2.0, size=(modes, 1))
        self.amplitudes = rng.standard_normal((modes, 3)) * (amplitude / np.sqrt(modes))
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=modes)
        self.windings = np.arange(modes) % 2
        self.log_lam = math.log(lam)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        radius = np.linalg.norm(points, axis=-1)
        safe = np.where(radius > 0, radius, 1.0)
        sigma = points / safe[..., None]
        log_period = (np.log(safe) / self.log_lam)[..., None]
        arguments = sigma @ self.wavevectors.T + 2.0 * np.pi * self.windings * log_period + self.phases
        return np.moveaxis(np.cos(arguments) @ self.amplitudes, -1, 0)


class SampledShellProfile:
    """Velocity on the fundamental shell 1<|y|<=lam given as a sampled field, evaluated by cubic interpolation."""

    def __init__(self, field: np.ndarray, grid: GridSpec, lam: float = 2.0):
        if grid.half_width < lam:
            raise ValueError(f"sampled shell profile must cover the annulus 1<|y|<={lam}, "
                             f"got half_width={grid.half_width}")
        self.field = field
        self.grid_service = GridService.for_grid(grid)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.grid_service.sample(self.field, points, order=3)


class FieldService:
    def __init__(self):
        self.dss_config = config.dss

    # Test data

    def random_solenoidal(self, g: GridSpec, seed: int, amplitude: float = 1.0,
                          k_max: Optional[float] = None) -> np.ndarray:
        """Seeded band-limited divergence-free field with zero mean and rms = amplitude."""
        spectral = SpectralService.for_grid(g)
        if k_max is None:
            k_max = config.numerics.dealias_fraction * np.pi / g.h / 2.0
        rng = np.random.default_rng(seed)
        noise_hat = spectral.forward(rng.standard_normal((3, g.n, g.n, g.n)))
        band = (spectral.k_sq <= k_max ** 2) & (spectral.k_sq > 0)
        field = spectral.leray_project(spectral.backward(noise_hat * band))
        rms = np.sqrt(np.mean(np.sum(field ** 2, axis=0)))
        return field * (amplitude / rms) if rms > 0 else field

    def random_scalar(self, g: GridSpec, seed: int, k_max: Optional[float] = None) -> np.ndarray:
        spectral = SpectralService.for_grid(g)
        if k_max is None:
            k_max = config.numerics.dealias_fraction * np.pi / g.h / 2.0
        rng = np.random.default_rng(seed)
        noise_hat = spectral.forward(rng.standard_normal((g.n, g.n, g.n)))
        field = spectral.backward(noise_hat * (spectral.k_sq <= k_max ** 2))
        return field / np.std(field)

    def taylor_green(self, g: GridSpec, amplitude: float = 1.0) -> np.ndarray:
        grid = GridService.for_grid(g)
        kappa = np.pi / g.half_width
        x, y, z = grid.coords * kappa
        return amplitude * np.stack([
            np.sin(x) * np.cos(y) * np.cos(z),
            -np.cos(x) * np.sin(y) * np.cos(z),
            np.zeros_like(x),
        ])

    def gaussian(self, g: GridSpec, width: float = 1.0) -> np.ndarray:
        grid = GridService.for_grid(g)
        return np.exp(-(grid.radius / width) ** 2)

    def gaussian_vortex(self, g: GridSpec, amplitude: float = 1.0, width: float = 1.0) -> np.ndarray:
        """Curl of a Gaussian vector potential: Gaussian decay, discretely divergence-free."""
        potential = np.stack([np.zeros((g.n,) * 3), np.zeros((g.n,) * 3), self.gaussian(g, width)])
        potential[0] = 0.5 * potential[2]
        return amplitude * SpectralService.for_grid(g).curl(potential)

    def initial_data(self, settings: InitialDataSettings, g: GridSpec, seed: Optional[int] = None,
                     dss: Optional[DSSSpec] = None) -> np.ndarray:
        kind = settings.kind
        if kind == InitialDataKind.ZERO:
            return np.zeros((3, g.n, g.n, g.n))
        if kind == InitialDataKind.TAYLOR_GREEN:
            return self.taylor_green(g, settings.amplitude)
        if kind == InitialDataKind.GAUSSIAN:
            return self.gaussian_vortex(g, settings.amplitude, settings.width)
        if kind == InitialDataKind.RANDOM:
            if seed is None:
                raise ValueError("seed is required for randomized initial data")
            return self.random_solenoidal(g, seed, settings.amplitude)
        if kind == InitialDataKind.SELF_SIMILAR:
            return settings.amplitude * self.make_self_similar_field(swirl, g)
        spec = dss or DSSSpec(profile_seed=seed)
        return settings.amplitude * self.make_dss_field(spec, g)

    # Truncation

    def truncate_data(self, u0: np.ndarray, R: float, g: GridSpec) -> np.ndarray:
        """u_{0,R} = P(phi_R u0)."""
        if R <= 0:
            raise ValueError(f"truncation radius must be positive, got {R}")
        phi = cutoff(GridService.for_grid(g).radius / R)
        return SpectralService.for_grid(g).leray_project(phi * u0)

    def truncate_forcing(self, F: np.ndarray, R: float, g: GridSpec) -> np.ndarray:
        if R <= 0:
            raise ValueError(f"truncation radius must be positive, got {R}")
        return cutoff(GridService.for_grid(g).radius / R) * F

    # Discretely self-similar data

    def core_radius(self, g: GridSpec) -> float:
        return self.dss_config.core_cells * g.h

    def core_taper(self, g: GridSpec) -> np.ndarray:
        """0 on |x| <= core radius, 1 from twice the core radius on."""
        return 1.0 - cutoff(GridService.for_grid(g).radius / self.core_radius(g))

    def edge_width(self, g: GridSpec) -> float:
        return max(0.125 * g.half_width, self.core_radius(g))

    def box_window(self, g: GridSpec) -> np.ndarray:
        """1 on |x| <= L - edge width, 0 on |x| >= L."""
        width = self.edge_width(g)
        return cutoff(1.0 + (GridService.for_grid(g).radius - g.half_width + width) / width)

    def drift_annulus(self, lam: float, g: GridSpec) -> Tuple[float, float]:
        """Radii where x and lam x both see taper and window equal to 1, half a core radius clear of the taper."""
        return 2.5 * self.core_radius(g), (g.half_width - self.edge_width(g)) / lam

    def shell_profile(self, spec: DSSSpec, profile_field: Optional[np.ndarray] = None,
                      profile_grid: Optional[GridSpec] = None):
        if profile_field is not None and profile_grid is not None:
            return SampledShellProfile(profile_field, profile_grid, spec.lam)
        seed = spec.profile_seed if spec.profile_seed is not None else self.dss_config.profile_seed
        return RandomShellProfile(seed, spec.profile_modes, spec.profile_amplitude, spec.lam)

    def extend_velocity(self, profile: SampledShellProfile, lam: float, g: GridSpec) -> np.ndarray:
        """u(x) = lam^-k V(x / lam^k) on shell k, blended into shell k+1 across the seam."""
        grid = GridService.for_grid(g)
        radius = np.where(grid.radius > 0, grid.radius, 1.0)
        log_radius = np.log(radius) / np.log(lam)
        shell = np.ceil(log_radius) - 1.0
        phase = log_radius - shell
        points = np.moveaxis(grid.coords / lam ** shell, 0, -1)

        blend = self.dss_config.seam_blend
        ramp = np.clip((phase - (1.0 - blend)) / blend, 0.0, 1.0)
        beta = 0.5 * (1.0 - np.cos(np.pi * ramp))
        values = (1.0 - beta) * profile(points) + beta * profile(points / lam) / lam
        return np.where(grid.radius > 0, values * lam ** -shell, 0.0)

    def make_dss_field(self, spec: DSSSpec, g: GridSpec, profile_field: Optional[np.ndarray] = None,
                       profile_grid: Optional[GridSpec] = None) -> np.ndarray:
        """lam-DSS velocity tapered at the core and the box edge, then Leray-projected.

        A sampled profile is the velocity on 1<|y|<=lam and is extended shell by shell; the seeded
        default is the curl of a log-periodic potential.
        """
        if spec.lam <= 1:
            raise ValueError(f"lambda must be greater than 1, got {spec.lam}")
        grid = GridService.for_grid(g)
        spectral = SpectralService.for_grid(g)
        profile = self.shell_profile(spec, profile_field, profile_grid)
        taper = self.core_taper(g) * self.box_window(g)
        if isinstance(profile, SampledShellProfile):
            field = spectral.leray_project(taper * self.extend_velocity(profile, spec.lam, g))
        else:
            potential = profile(np.moveaxis(grid.coords, 0, -1))
            field = spectral.leray_project(spectral.curl(taper * potential))
        logger.debug(f"Built DSS field: lambda={spec.lam}, n={g.n}, max|u|={np.max(np.abs(field)):.3e}")
        return field

    def make_self_similar_field(self, w0: SphereFunction, g: GridSpec, project: bool = True) -> np.ndarray:
        """u0 = w0(x/|x|)/|x| off the core, zero inside it."""
        grid = GridService.for_grid(g)
        radius = np.where(grid.radius > 0, grid.radius, 1.0)
        sigma = np.moveaxis(grid.coords / radius, 0, -1)
        values = np.moveaxis(np.asarray(w0(sigma), dtype=float), -1, 0) / radius
        field = np.where(grid.radius >= self.core_radius(g), values, 0.0)
        return SpectralService.for_grid(g).leray_project(field) if project else field

    def dss_drift(self, u: np.ndarray, lam: float, g: GridSpec, inner: Optional[float] = None,
                  outer: Optional[float] = None) -> float:
        """||u(x) - lam u(lam x)|| / ||u|| over inner <= |x| <= outer."""
        return self.pair_drift(u, u, lam, g, inner, outer)

    def pair_drift(self, early: np.ndarray, late: np.ndarray, lam: float, g: GridSpec,
                   inner: Optional[float] = None, outer: Optional[float] = None) -> float:
        """||early(x) - lam late(lam x)|| / ||early||; early at t, late at lam^2 t."""
        grid = GridService.for_grid(g)
        default_inner, default_outer = self.drift_annulus(lam, g)
        inner = default_inner if inner is None else inner
        outer = default_outer if outer is None else outer
        dilated, inside = grid.dilate(late, lam)
        mask = inside & (grid.radius >= inner) & (grid.radius <= outer)
        if not mask.any():
            raise ValueError(f"drift annulus {inner:g} <= |x| <= {outer:g} holds no grid points "
                             f"(n={g.n}, half_width={g.half_width}, lambda={lam})")
        reference = np.sqrt(np.sum(GridService.magnitude(early)[mask] ** 2))
        difference = np.sqrt(np.sum(GridService.magnitude(early - lam * dilated)[mask] ** 2))
        if reference == 0:
            return 0.0 if difference == 0 else math.inf
        return float(difference / reference)

    def rescale(self, u: np.ndarray, lam: float, g: GridSpec, power: float = 1.0) -> Tuple[np.ndarray, GridSpec]:
        """lam^power * u(lam x) sampled on the box of half-width L/lam."""
        scaled = GridSpec(n=g.n, half_width=g.half_width / lam)
        nodes = GridService.for_grid(scaled).coords * lam
        values = GridService.for_grid(g).sample(u, np.moveaxis(nodes, 0, -1))
        return lam ** power * values, scaled

    def rescale_forcing(self, forcing: Optional[ForcingSpec], lam: float, g: GridSpec) -> Optional[ForcingSpec]:
        """F_lam(t, x) = lam^2 F(lam^2 t, lam x) on the box of half-width L/lam."""
        if forcing is None or forcing.profile is None:
            return forcing
        if forcing.kind in (ForcingKind.SELF_SIMILAR, ForcingKind.DSS):
            # the self-similar law is invariant; only the sampling box changes
            scaled = GridSpec(n=g.n, half_width=g.half_width / lam)
            nodes = np.moveaxis(GridService.for_grid(scaled).coords, 0, -1)
            profile = GridService.for_grid(g).sample(forcing.profile, nodes)
        else:
            profile, _ = self.rescale(forcing.profile, lam, g, power=2.0)
        return forcing.model_copy(update={"profile": profile})

    def dss_norm_equivalence(self, u: np.ndarray, spec: DSSSpec, g: GridSpec, reference_shell: int = 0,
                             outer: Optional[float] = None) -> DSSNormReport:
        """Weighted norm against the annulus integral, with geometric-series bounds."""
        lam, gamma = spec.lam, spec.gamma
        grid = GridService.for_grid(g)
        energy = GridService.magnitude(u) ** 2
        outer = 0.5 * g.half_width if outer is None else outer
        top = math.floor(math.log(outer) / math.log(lam) + 1e-12)
        r_out = lam ** top

        weight = (1.0 + grid.radius) ** (-gamma)
        full = grid.integrate(energy * weight * (grid.radius <= r_out))
        low, high = lam ** reference_shell, lam ** (reference_shell + 1)
        shell = grid.integrate(energy * grid.ball_mask(high, low)) / lam ** reference_shell

        first_full = math.ceil(math.log(2.0 * self.core_radius(g)) / math.log(lam) - 1e-12)
        lower = sum(lam ** k * (1.0 + lam ** (k + 1)) ** (-gamma) for k in range(first_full, top))
        first = first_full - 1
        upper = lam ** first / (lam - 1.0) + sum(lam ** k * (1.0 + lam ** k) ** (-gamma) for k in range(first, top))

        if shell == 0:
            return DSSNormReport(full=full, shell=0.0, ratio=float("nan"), lower=lower, upper=upper,
                                 flagged=True, within_bounds=False)
        ratio = full / shell
        return DSSNormReport(full=full, shell=shell, ratio=ratio, lower=lower, upper=upper,
                             flagged=False, within_bounds=lower <= ratio <= upper)

    # Self-similar forcing

    def make_ss_forcing(self, F0: np.ndarray, t: float, g: GridSpec) -> np.ndarray:
        """(1/t) F0(x/sqrt(t)) by trilinear interpolation of F0."""
        if t <= 0:
            raise ValueError(f"self-similar forcing needs t > 0, got {t}")
        if t == 1.0:
            return F0.copy()
        grid = GridService.for_grid(g)
        points = np.moveaxis(grid.coords / math.sqrt(t), 0, -1)
        return grid.sample(F0, points) / t

    def forcing_at(self, forcing: Optional[ForcingSpec], t: float, g: GridSpec) -> Optional[np.ndarray]:
        if forcing is None or forcing.kind == ForcingKind.ZERO or forcing.profile is None:
            return None
        if forcing.kind in (ForcingKind.SELF_SIMILAR, ForcingKind.DSS):
            return self.make_ss_forcing(forcing.profile, max(t, 1e-12), g)
        return forcing.profile

    def gaussian_forcing_profile(self, g: GridSpec, amplitude: float = 1.0, width: float = 1.0) -> np.ndarray:
        """Symmetric traceless Gaussian tensor profile."""
        bump = amplitude * self.gaussian(g, width)
        F0 = np.zeros((3, 3, g.n, g.n, g.n))
        F0[0, 1] = F0[1, 0] = bump
        F0[0, 2] = F0[2, 0] = 0.5 * bump
        return F0

    @staticmethod
    def ss_forcing_constant(gamma: float) -> float:
        """C_gamma = int_0^inf (1+sqrt(theta))^(-gamma) theta^(-1/2) dtheta."""
        if gamma <= 1:
            raise ValueError(f"C_gamma diverges for gamma <= 1, got {gamma}")
        value, _ = integrate.quad(lambda s: 2.0 * (1.0 + s) ** (-gamma), 0.0, np.inf)
        return value

    def inverse_radius(self, g: GridSpec) -> np.ndarray:
        """1/|x| with the origin node replaced by its equal-volume ball average."""
        grid = GridService.for_grid(g)
        a = g.h * (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)
        safe = np.where(grid.radius > 0, grid.radius, 1.0)
        return np.where(grid.radius > 0, 1.0 / safe, 1.5 / a)

    def ss_forcing_profile_norm(self, F0: np.ndarray, gamma: float, g: GridSpec) -> float:
        """C_gamma * int |F0|^2/|x| dx."""
        grid = GridService.for_grid(g)
        density = GridService.magnitude(F0) ** 2 * self.inverse_radius(g)
        return self.ss_forcing_constant(gamma) * grid.integrate(density)

    def ss_forcing_cumulative(self, F0: np.ndarray, gamma: float, T: float, g: GridSpec) -> float:
        """int_0^T ||(1/t) F0(./sqrt t)||^2_{L2(w_gamma)} dt, time integral in closed form."""
        grid = GridService.for_grid(g)
        r = 1.0 / self.inverse_radius(g)
        root = math.sqrt(T)
        if abs(gamma - 1.0) < 1e-12:
            kernel = 2.0 * np.log1p(root * r) / r
        else:
            kernel = 2.0 * (1.0 - (1.0 + root * r) ** (1.0 - gamma)) / ((gamma - 1.0) * r)
        return grid.integrate(GridService.magnitude(F0) ** 2 * kernel)


def swirl(sigma: np.ndarray) -> np.ndarray:
    """Tangential sphere field e3 x sigma."""
    return np.stack([-sigma[..., 1], sigma[..., 0], np.zeros_like(sigma[..., 0])], axis=-1)
