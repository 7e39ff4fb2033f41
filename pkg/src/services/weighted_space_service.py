import logging
import math
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy import integrate

from src.config import config
from src.models import GridSpec, QuadratureReport, WeightSpec
from src.services.grid_service import GridService
from src.services.spectral_service import SpectralService

logger = logging.getLogger(__name__)

Ball = Tuple[Sequence[float], float]


def _psi(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t, dtype=float)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def _psi_prime(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t, dtype=float)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos]) / t[pos] ** 2
    return out


def cutoff(rho: np.ndarray) -> np.ndarray:
    """Smooth radial cutoff: 1 on rho <= 1, 0 on rho >= 2."""
    rho = np.asarray(rho, dtype=float)
    a, b = _psi(2.0 - rho), _psi(rho - 1.0)
    return a / (a + b)


def cutoff_derivative(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    a, b = _psi(2.0 - rho), _psi(rho - 1.0)
    a_rho, b_rho = -_psi_prime(2.0 - rho), _psi_prime(rho - 1.0)
    return (a_rho * b - a * b_rho) / (a + b) ** 2


class WeightedSpaceService:
    def __init__(self):
        self.weight_config = config.weight

    @staticmethod
    def eval_weight(x: np.ndarray, w: WeightSpec) -> np.ndarray:
        """(1 + sqrt(eps^2 + |x|^2))^(-delta) for points along the last axis."""
        x = np.asarray(x, dtype=float)
        rho = np.sqrt(w.eps ** 2 + np.sum(x ** 2, axis=-1))
        return (1.0 + rho) ** (-w.delta)

    @staticmethod
    def radial_weight(r: np.ndarray, w: WeightSpec) -> np.ndarray:
        return (1.0 + np.sqrt(w.eps ** 2 + np.asarray(r, dtype=float) ** 2)) ** (-w.delta)

    def weight_field(self, w: WeightSpec, g: GridSpec) -> np.ndarray:
        return self.radial_weight(GridService.for_grid(g).radius, w)

    def weight_gradient(self, w: WeightSpec, g: GridSpec) -> np.ndarray:
        grid = GridService.for_grid(g)
        rho = np.sqrt(w.eps ** 2 + grid.radius ** 2)
        unit = np.divide(grid.coords, rho, out=np.zeros_like(grid.coords), where=rho > 0)
        return -w.delta * (1.0 + rho) ** (-w.delta - 1.0) * unit

    def weighted_norm(self, f: np.ndarray, p: float, w: WeightSpec, g: GridSpec) -> float:
        """(sum |f|^p w h^3)^(1/p) over grid nodes."""
        if p < 1:
            raise ValueError(f"weighted_norm requires p >= 1, got {p}")
        grid = GridService.for_grid(g)
        grid.check_shape(f)
        density = GridService.magnitude(f) ** p * self.weight_field(w, g)
        return grid.integrate(density) ** (1.0 / p)

    def quadrature_report(self, f: np.ndarray, p: float, w: WeightSpec, g: GridSpec) -> QuadratureReport:
        return QuadratureReport(value=self.weighted_norm(f, p, w, g), grid=g, weight=w)

    def _radial_average(self, integrand, radius: float) -> float:
        value, _ = integrate.quad(lambda r: integrand(r) * r ** 2, 0.0, radius, limit=200)
        return 3.0 * value / radius ** 3

    def _monte_carlo_points(self, center: Sequence[float], radius: float) -> np.ndarray:
        rng = np.random.default_rng(self.weight_config.monte_carlo_seed)
        count = self.weight_config.monte_carlo_samples
        direction = rng.standard_normal((count, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        lengths = radius * rng.random(count) ** (1.0 / 3.0)
        return np.asarray(center, dtype=float) + direction * lengths[:, None]

    def reverse_holder_product(self, w: WeightSpec, p: float, center: Sequence[float],
                               radius: float) -> float:
        if radius <= 0:
            raise ValueError(f"ball radius must be positive, got {radius}")
        dual = -1.0 / (p - 1.0)
        if np.allclose(center, 0.0):
            avg_w = self._radial_average(lambda r: float(self.radial_weight(r, w)), radius)
            avg_dual = self._radial_average(lambda r: float(self.radial_weight(r, w)) ** dual, radius)
        else:
            values = self.eval_weight(self._monte_carlo_points(center, radius), w)
            avg_w, avg_dual = float(np.mean(values)), float(np.mean(values ** dual))
        return avg_w ** (1.0 / p) * avg_dual ** (1.0 - 1.0 / p)

    def muckenhoupt_profile(self, w: WeightSpec, p: float, balls: Iterable[Ball]) -> List[float]:
        if p <= 1:
            raise ValueError(f"muckenhoupt_certificate requires p > 1, got {p}")
        return [self.reverse_holder_product(w, p, center, radius) for center, radius in balls]

    def muckenhoupt_certificate(self, w: WeightSpec, p: float, balls: Iterable[Ball]) -> float:
        """Max over balls of (avg w)^(1/p) (avg w^(-1/(p-1)))^(1-1/p)."""
        values = self.muckenhoupt_profile(w, p, balls)
        logger.debug(f"A_p products for delta={w.delta}, p={p}: {values}")
        return max(values)

    def sobolev_embedding_ratio(self, f: np.ndarray, w: WeightSpec, g: GridSpec) -> float:
        """||f||_{L6(w_3delta)} / (||f||_{L2(w_delta)} + ||grad f||_{L2(w_delta)})."""
        gradient = SpectralService.for_grid(g).gradient(f)
        denominator = self.weighted_norm(f, 2, w, g) + self.weighted_norm(gradient, 2, w, g)
        if denominator < 1e-14:
            raise ValueError("sobolev_embedding_ratio: zero denominator")
        w6 = WeightSpec(delta=3 * w.delta, eps=w.eps)
        return self.weighted_norm(f, 6, w6, g) / denominator

    def holder_interpolation_gap(self, f: np.ndarray, gamma: float, g: GridSpec) -> float:
        l2 = self.weighted_norm(f, 2, WeightSpec(delta=gamma), g)
        l6 = self.weighted_norm(f, 6, WeightSpec(delta=3 * gamma), g)
        l3 = self.weighted_norm(f, 3, WeightSpec(delta=1.5 * gamma), g)
        return l2 ** 1.5 * l6 ** 1.5 - l3 ** 3

    def cutoff_flux_constant(self, w: WeightSpec, R: float, g: GridSpec) -> float:
        """max (|w_eps grad phi_R| + |phi_R grad w_eps|) (1+|x|) / w_gamma over nodes."""
        grid = GridService.for_grid(g)
        phi = cutoff(grid.radius / R)
        grad_phi = np.abs(cutoff_derivative(grid.radius / R)) / R
        grad_w = GridService.magnitude(self.weight_gradient(w, g))
        ratio = (self.weight_field(w, g) * grad_phi + phi * grad_w) * (1.0 + grid.radius)
        ratio /= self.radial_weight(grid.radius, WeightSpec(delta=w.delta))
        return float(np.max(ratio))

    @staticmethod
    def gradient_identity_gap(w: WeightSpec, r: float) -> float:
        """|d/dr w_delta(r)| - delta w_delta(r)/(1+r); zero for eps = 0."""
        rho = max(math.hypot(w.eps, r), 1e-300)
        slope = w.delta * (1.0 + rho) ** (-w.delta - 1.0) * r / rho
        return slope - w.delta * (1.0 + r) ** (-w.delta) / (1.0 + r)
