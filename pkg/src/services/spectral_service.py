import logging
import math
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft, integrate

from src.config import config
from src.models import GridSpec, MollifierSpec
from src.services.grid_service import GridService

logger = logging.getLogger(__name__)

AXES = (-3, -2, -1)


def _bump(rho: np.ndarray) -> np.ndarray:
    inside = rho < 1.0
    out = np.zeros_like(rho, dtype=float)
    out[inside] = np.exp(-1.0 / (1.0 - rho[inside] ** 2))
    return out


# c such that c * exp(-1/(1-|x|^2)) integrates to one over the unit ball
BUMP_NORMALIZATION = 1.0 / (4.0 * math.pi * integrate.quad(
    lambda r: r ** 2 * math.exp(-1.0 / (1.0 - r ** 2)), 0.0, 1.0)[0])


def mollifier_profile(x: np.ndarray) -> np.ndarray:
    """Normalized radial bump theta evaluated at |x| values."""
    return BUMP_NORMALIZATION * _bump(np.abs(x))


class SpectralService:
    def __init__(self, grid_service: GridService):
        self.grid_service = grid_service
        self.grid = grid_service.grid
        n, h = self.grid.n, self.grid.h

        k = 2.0 * np.pi * fft.fftfreq(n, d=h)
        k_true = k.copy()
        # Nyquist zeroed so every multiplier keeps fields real
        k[n // 2] = 0.0
        self.k = np.stack(np.meshgrid(k, k, k, indexing="ij"))
        self.k_sq = np.sum(self.k ** 2, axis=0)
        k_norm = np.sqrt(self.k_sq)
        self.inv_k_norm = np.divide(1.0, k_norm, out=np.zeros_like(k_norm), where=k_norm > 0)
        self.inv_k_sq = self.inv_k_norm ** 2

        cutoff = config.numerics.dealias_fraction * np.pi / h
        keep = np.abs(k_true) < cutoff
        self.dealias_mask = keep[:, None, None] & keep[None, :, None] & keep[None, None, :]

        offset = fft.fftfreq(n, d=1.0 / n)
        self.offset_radius = h * np.sqrt(
            offset[:, None, None] ** 2 + offset[None, :, None] ** 2 + offset[None, None, :] ** 2)
        self._mollifiers: Dict[float, np.ndarray] = {}
        self._balls: Dict[float, np.ndarray] = {}

    @classmethod
    def for_grid(cls, grid: GridSpec) -> "SpectralService":
        return _spectral_service(grid)

    # Transforms

    @staticmethod
    def forward(f: np.ndarray) -> np.ndarray:
        return fft.fftn(f, axes=AXES)

    @staticmethod
    def backward(f_hat: np.ndarray) -> np.ndarray:
        return fft.ifftn(f_hat, axes=AXES).real

    def apply(self, f: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
        return self.backward(multiplier * self.forward(f))

    # Derivatives

    def gradient(self, f: np.ndarray) -> np.ndarray:
        """Gradient; for a vector field entry [i, j] is d_i u_j."""
        f_hat = self.forward(f)
        return np.stack([self.backward(1j * self.k[i] * f_hat) for i in range(3)])

    def divergence(self, v: np.ndarray) -> np.ndarray:
        v_hat = self.forward(v)
        return self.backward(sum(1j * self.k[j] * v_hat[j] for j in range(3)))

    def tensor_divergence(self, G: np.ndarray) -> np.ndarray:
        """(div G)_j = sum_i d_i G_ij."""
        G_hat = self.forward(G)
        return np.stack([
            self.backward(sum(1j * self.k[i] * G_hat[i, j] for i in range(3)))
            for j in range(3)
        ])

    def curl(self, v: np.ndarray) -> np.ndarray:
        v_hat = self.forward(v)
        kx, ky, kz = self.k
        return np.stack([
            self.backward(1j * (ky * v_hat[2] - kz * v_hat[1])),
            self.backward(1j * (kz * v_hat[0] - kx * v_hat[2])),
            self.backward(1j * (kx * v_hat[1] - ky * v_hat[0])),
        ])

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        return self.apply(f, -self.k_sq)

    def dealias(self, f: np.ndarray) -> np.ndarray:
        return self.apply(f, self.dealias_mask)

    def heat_multiplier(self, dt: float) -> np.ndarray:
        return np.exp(-self.k_sq * dt)

    # Riesz transforms and projections

    def riesz_multiplier(self, j: int) -> np.ndarray:
        return -1j * self.k[j] * self.inv_k_norm

    def riesz_transform(self, f: np.ndarray, j: int) -> np.ndarray:
        if j not in (0, 1, 2):
            raise ValueError(f"Riesz axis must be 0, 1 or 2, got {j}")
        return self.apply(f, self.riesz_multiplier(j))

    def leray_project(self, v: np.ndarray) -> np.ndarray:
        v_hat = self.forward(v)
        k_dot_v = sum(self.k[j] * v_hat[j] for j in range(3)) * self.inv_k_sq
        return self.backward(v_hat - self.k * k_dot_v)

    def _double_riesz(self, G: np.ndarray) -> np.ndarray:
        G_hat = self.forward(G)
        p_hat = sum(
            -self.k[i] * self.k[j] * self.inv_k_sq * G_hat[i, j]
            for i in range(3) for j in range(3)
        )
        return self.backward(p_hat)

    def advection_tensor(self, b: Optional[np.ndarray], u: Optional[np.ndarray]) -> np.ndarray:
        """Dealiased b_i u_j."""
        n = self.grid.n
        if b is None or u is None:
            return np.zeros((3, 3, n, n, n))
        return self.dealias(b[:, None] * u[None, :])

    def pressure_split(self, b: Optional[np.ndarray], u: Optional[np.ndarray],
                       F: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        p1 = self._double_riesz(self.advection_tensor(b, u))
        n = self.grid.n
        p2 = -self._double_riesz(F) if F is not None else np.zeros((n, n, n))
        return p1, p2

    def pressure_solve(self, b: Optional[np.ndarray], u: Optional[np.ndarray],
                       F: Optional[np.ndarray]) -> np.ndarray:
        """p = sum_ij R_i R_j (b_i u_j - F_ij)."""
        G = self.advection_tensor(b, u)
        if F is not None:
            G = G - F
        return self._double_riesz(G)

    # Mollification

    def mollifier_multiplier(self, scale: float) -> np.ndarray:
        key = round(scale, 12)
        if key not in self._mollifiers:
            kernel = mollifier_profile(self.offset_radius / scale)
            if kernel.sum() == 0:
                kernel[0, 0, 0] = 1.0
            kernel = kernel / kernel.sum()
            self._mollifiers[key] = self.forward(kernel).real
            logger.debug(f"Cached mollifier multiplier for scale={scale}")
        return self._mollifiers[key]

    def mollify_at_scale(self, f: np.ndarray, scale: float) -> np.ndarray:
        return self.apply(f, self.mollifier_multiplier(scale))

    def mollify(self, f: np.ndarray, m: MollifierSpec, t: Optional[float] = None) -> np.ndarray:
        return self.mollify_at_scale(f, m.scale(t))

    # Maximal function

    def lattice_radii(self, r_max: float) -> List[float]:
        """Distinct node distances in (0, r_max]."""
        values = np.unique(np.round(self.offset_radius / self.grid.h, 9)) * self.grid.h
        return [float(r) for r in values if 0 < r <= r_max * (1 + 1e-12)]

    def dyadic_radii(self) -> List[float]:
        radii, r = [], self.grid.h
        while r <= self.grid.half_width * (1 + 1e-12):
            radii.append(r)
            r *= 2.0
        return radii

    def ball_multiplier(self, radius: float) -> np.ndarray:
        key = round(radius, 12)
        if key not in self._balls:
            stencil = (self.offset_radius <= radius * (1 + 1e-9)).astype(float)
            self._balls[key] = self.forward(stencil / stencil.sum()).real
        return self._balls[key]

    def maximal_function(self, f: np.ndarray, radii: Optional[Sequence[float]] = None,
                         support: Optional[float] = None) -> np.ndarray:
        """max(|f|, ball averages of |f| over the radius list).

        The default list is the dyadic ladder plus every lattice radius up to `support`. A radially
        non-increasing lattice kernel supported there is a convex combination of those ball averages,
        so its convolution with f is dominated exactly.
        """
        if radii is None:
            radii = sorted(set(self.dyadic_radii()) | set(self.lattice_radii(support or 0.0)))
        if len(radii) == 0:
            raise ValueError("maximal_function needs a non-empty radius list")
        if min(radii) < self.grid.h * (1 - 1e-9):
            raise ValueError(f"maximal_function radii must be at least h={self.grid.h}")
        magnitude = GridService.magnitude(f)
        result = magnitude.copy()
        for radius in radii:
            np.maximum(result, self.apply(magnitude, self.ball_multiplier(radius)), out=result)
        return result


@lru_cache(maxsize=16)
def _spectral_service(grid: GridSpec) -> SpectralService:
    return SpectralService(GridService.for_grid(grid))
