import logging
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy import ndimage

from src.models import GridSpec

logger = logging.getLogger(__name__)


class GridService:
    """Node geometry, rectangle-rule quadrature and interpolation on a periodic box."""

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.h = grid.h
        self.cell_volume = grid.h ** 3
        self.axis = -grid.half_width + grid.h * np.arange(grid.n)
        self.coords = np.stack(np.meshgrid(self.axis, self.axis, self.axis, indexing="ij"))
        self.radius = np.sqrt(np.sum(self.coords ** 2, axis=0))
        self.origin_index = grid.n // 2
        logger.debug(f"Grid ready: n={grid.n}, half_width={grid.half_width}, h={self.h}")

    @classmethod
    def for_grid(cls, grid: GridSpec) -> "GridService":
        return _grid_service(grid)

    @staticmethod
    def magnitude(f: np.ndarray) -> np.ndarray:
        """Pointwise Euclidean (Frobenius for tensors) magnitude."""
        if f.ndim == 3:
            return np.abs(f)
        axes = tuple(range(f.ndim - 3))
        return np.sqrt(np.sum(f ** 2, axis=axes))

    def check_shape(self, f: np.ndarray) -> None:
        if f.shape[-3:] != (self.grid.n,) * 3:
            raise ValueError(f"Field of shape {f.shape} does not match grid n={self.grid.n}")

    def integrate(self, density: np.ndarray) -> float:
        self.check_shape(density)
        return float(np.sum(density) * self.cell_volume)

    def mean(self, f: np.ndarray) -> np.ndarray:
        return np.mean(f, axis=(-3, -2, -1))

    def l2_norm(self, f: np.ndarray) -> float:
        return float(np.sqrt(self.integrate(self.magnitude(f) ** 2)))

    def ball_mask(self, radius: float, inner: float = 0.0) -> np.ndarray:
        """Nodes with inner < |x| <= radius."""
        return (self.radius > inner) & (self.radius <= radius)

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Map physical points (..., 3) to fractional node indices (3, ...)."""
        return np.moveaxis((points + self.grid.half_width) / self.h, -1, 0)

    def sample(self, f: np.ndarray, points: np.ndarray, periodic: bool = False,
               order: int = 1) -> np.ndarray:
        """Interpolate f at physical points; outside the box is zero unless periodic."""
        index = self.to_index(points)
        mode = "grid-wrap" if periodic else "constant"
        if f.ndim == 3:
            return ndimage.map_coordinates(f, index, order=order, mode=mode, cval=0.0)
        lead = f.shape[:-3]
        flat = f.reshape((-1,) + f.shape[-3:])
        out = np.stack([
            ndimage.map_coordinates(component, index, order=order, mode=mode, cval=0.0)
            for component in flat
        ])
        return out.reshape(lead + points.shape[:-1])

    def dilate(self, f: np.ndarray, factor: float) -> Tuple[np.ndarray, np.ndarray]:
        """Values of f at factor*x for every node, plus the mask of nodes kept inside the box."""
        points = np.moveaxis(self.coords * factor, 0, -1)
        inside = np.all(np.abs(points) <= self.grid.half_width - self.h, axis=-1)
        return self.sample(f, points), inside

    def offsets(self, center: Tuple[float, float, float]) -> np.ndarray:
        """Minimum-image displacement x - center on the periodic box."""
        width = 2.0 * self.grid.half_width
        shift = self.coords - np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
        return shift - width * np.round(shift / width)


@lru_cache(maxsize=16)
def _grid_service(grid: GridSpec) -> GridService:
    return GridService(grid)
