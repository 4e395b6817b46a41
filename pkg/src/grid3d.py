"""Vacancy grids: continuous positions <-> discretized 3D occupancy volumes."""

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from src.errors import ConfigurationError, DataError, EmitterOutOfBoundsError
from src.optics import Emitter, OpticalConfig

logger = logging.getLogger(__name__)

Weighting = Literal["unit", "photons"]

DEFAULT_VOXEL_Z = 33.0


@dataclass(frozen=True)
class GridSpec:
    """Voxel pitches (nm), dims (D, H, W) and origin (x, y, z) of voxel (0,0,0)'s corner."""

    voxel_xy: float = 27.5
    voxel_z: float = DEFAULT_VOXEL_Z
    dims: Tuple[int, int, int] = (121, 256, 256)
    origin: Tuple[float, float, float] = (0.0, 0.0, -121 * DEFAULT_VOXEL_Z / 2)

    def __post_init__(self) -> None:
        if self.voxel_xy <= 0 or self.voxel_z <= 0:
            raise ConfigurationError("voxel sizes must be positive")
        if any(d < 1 for d in self.dims):
            raise ConfigurationError(f"grid dims must be positive, got {self.dims}")

    @classmethod
    def for_frame(
        cls,
        cfg: OpticalConfig,
        height: int,
        width: int,
        axial_range: Optional[float] = None,
        voxel_z: float = DEFAULT_VOXEL_Z,
    ) -> "GridSpec":
        """Grid matched to a camera frame: lateral pitch = camera_pixel / upsample."""
        axial = cfg.axial_range if axial_range is None else axial_range
        depth = max(int(round(axial / voxel_z)), 1)
        factor = cfg.upsample_factor
        return cls(
            voxel_xy=cfg.pitch,
            voxel_z=voxel_z,
            dims=(depth, height * factor, width * factor),
            origin=(0.0, 0.0, -depth * voxel_z / 2.0),
        )

    @property
    def z_extent(self) -> Tuple[float, float]:
        z0 = self.origin[2]
        return z0, z0 + self.dims[0] * self.voxel_z

    @property
    def xy_extent(self) -> Tuple[float, float]:
        """Upper bounds (x, y) in nm."""
        return (
            self.origin[0] + self.dims[2] * self.voxel_xy,
            self.origin[1] + self.dims[1] * self.voxel_xy,
        )

    def voxel_of(self, x: float, y: float, z: float) -> Optional[Tuple[int, int, int]]:
        """(k, i, j) voxel index of a world position, or None outside extents."""
        k = int(np.floor((z - self.origin[2]) / self.voxel_z))
        i = int(np.floor((y - self.origin[1]) / self.voxel_xy))
        j = int(np.floor((x - self.origin[0]) / self.voxel_xy))
        depth, rows, cols = self.dims
        if 0 <= k < depth and 0 <= i < rows and 0 <= j < cols:
            return k, i, j
        return None

    def centers(
        self, k: NDArray[np.intp], i: NDArray[np.intp], j: NDArray[np.intp]
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
        x = self.origin[0] + (j + 0.5) * self.voxel_xy
        y = self.origin[1] + (i + 0.5) * self.voxel_xy
        z = self.origin[2] + (k + 0.5) * self.voxel_z
        return x, y, z


@dataclass
class Grid3D:
    values: NDArray[np.float64]
    spec: GridSpec
    collisions: int = 0

    def __post_init__(self) -> None:
        if tuple(self.values.shape) != tuple(self.spec.dims):
            raise DataError(
                f"grid values {self.values.shape} do not match spec dims {self.spec.dims}"
            )


@dataclass
class LocalizationList:
    """Columnar list of localizations (nm) with photons or confidence."""

    frame: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    x: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    y: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    z: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    photons: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.frame = np.asarray(self.frame, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.photons = np.asarray(self.photons, dtype=np.float64)
        lengths = {len(self.frame), len(self.x), len(self.y), len(self.z), len(self.photons)}
        if len(lengths) != 1:
            raise DataError(f"localization columns have unequal lengths: {lengths}")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def positions(self) -> NDArray[np.float64]:
        """(n, 3) array of x, y, z."""
        return np.column_stack([self.x, self.y, self.z]) if len(self) else np.zeros((0, 3))

    @classmethod
    def from_emitters(cls, emitters: Sequence[Emitter], frame: int = 0) -> "LocalizationList":
        return cls(
            frame=np.full(len(emitters), frame, dtype=np.int64),
            x=np.array([e.x for e in emitters]),
            y=np.array([e.y for e in emitters]),
            z=np.array([e.z for e in emitters]),
            photons=np.array([e.photons for e in emitters]),
        )

    def to_emitters(self) -> List[Emitter]:
        return [
            Emitter(float(x), float(y), float(z), float(p))
            for x, y, z, p in zip(self.x, self.y, self.z, self.photons)
        ]

    def select(self, keep: NDArray[np.bool_]) -> "LocalizationList":
        return LocalizationList(
            self.frame[keep], self.x[keep], self.y[keep], self.z[keep], self.photons[keep]
        )

    def for_frame(self, frame: int) -> "LocalizationList":
        return self.select(self.frame == frame)

    def sorted(self) -> "LocalizationList":
        """Order by (frame, x), stable for equal keys."""
        order = np.lexsort((self.x, self.frame))
        return self.select(order)

    @classmethod
    def concatenate(cls, parts: Iterable["LocalizationList"]) -> "LocalizationList":
        items = list(parts)
        if not items:
            return cls()
        return cls(
            np.concatenate([p.frame for p in items]),
            np.concatenate([p.x for p in items]),
            np.concatenate([p.y for p in items]),
            np.concatenate([p.z for p in items]),
            np.concatenate([p.photons for p in items]),
        )


def _impulse_peak(sigma: float) -> float:
    radius = int(2.0 * sigma + 0.5)
    size = 2 * radius + 1
    delta = np.zeros((size, size, size))
    delta[radius, radius, radius] = 1.0
    blurred = ndimage.gaussian_filter(delta, sigma, mode="constant", truncate=2.0)
    return float(blurred[radius, radius, radius])


def positions_to_grid(
    emitters: Sequence[Emitter],
    spec: GridSpec,
    dilation_sigma: float = 0.0,
    weighting: Weighting = "unit",
) -> Grid3D:
    """Nearest-voxel occupancy grid, optionally dilated by a truncated Gaussian.

    Each impulse is blurred with a Gaussian of ``dilation_sigma`` voxels
    truncated at 2σ and rescaled so its own peak equals its weight.
    Emitters sharing a voxel add up and are counted in ``collisions``.
    """
    if dilation_sigma < 0:
        raise ConfigurationError("dilation_sigma must be non-negative")
    values = np.zeros(spec.dims)
    collisions = 0
    for index, emitter in enumerate(emitters):
        voxel = spec.voxel_of(emitter.x, emitter.y, emitter.z)
        if voxel is None:
            raise EmitterOutOfBoundsError(
                index,
                f"({emitter.x:.1f}, {emitter.y:.1f}, {emitter.z:.1f}) nm outside grid",
            )
        if values[voxel] != 0:
            collisions += 1
        values[voxel] += 1.0 if weighting == "unit" else emitter.photons

    if collisions:
        logger.warning(f"{collisions} emitter(s) collided in a shared voxel")

    if dilation_sigma > 0 and emitters:
        values = ndimage.gaussian_filter(
            values, dilation_sigma, mode="constant", truncate=2.0
        ) / _impulse_peak(dilation_sigma)
        np.maximum(values, 0.0, out=values)

    return Grid3D(values=values, spec=spec, collisions=collisions)


def extract_peaks(
    grid: Grid3D, threshold: float, radius: int = 1, frame: int = 0
) -> LocalizationList:
    """Voxel centres of local maxima above ``threshold``.

    A voxel is a peak when it equals the maximum of its (2r+1)³
    neighbourhood; among equal neighbours only the lowest linear index is kept.
    """
    if threshold <= 0:
        raise ConfigurationError(f"threshold must be positive, got {threshold}")
    if radius < 1:
        raise ConfigurationError(f"radius must be >= 1, got {radius}")

    values = grid.values
    local_max = ndimage.maximum_filter(
        values, size=2 * radius + 1, mode="constant", cval=-np.inf
    )
    is_candidate = (values == local_max) & (values > threshold)
    if not np.any(is_candidate):
        return LocalizationList()

    # candidates sharing a neighbourhood hold equal values; keep the lowest index
    linear = np.arange(values.size, dtype=np.float64).reshape(values.shape)
    labelled = np.where(is_candidate, linear, np.inf)
    lowest = ndimage.minimum_filter(
        labelled, size=2 * radius + 1, mode="constant", cval=np.inf
    )
    peaks = np.flatnonzero(is_candidate & (lowest == linear))

    k, i, j = np.unravel_index(peaks, values.shape)
    x, y, z = grid.spec.centers(k, i, j)
    return LocalizationList(
        frame=np.full(len(peaks), frame, dtype=np.int64),
        x=x,
        y=y,
        z=z,
        photons=values[k, i, j],
    )
