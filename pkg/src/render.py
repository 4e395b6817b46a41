"""Super-resolution renders and regenerated camera frames.

The ASH image averages ``shifts²`` histograms of bin ``bin_nm`` whose
origins are offset by multiples of ``bin_nm / shifts`` in x and y. On the
fine ``bin_nm / shifts`` lattice this equals a separable triangular filter
over the fine histogram, which is how it is computed here. Pixel hue is the
count-weighted mean z looked up in a 256-entry colour table; intensity is
the averaged count relative to the brightest pixel.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from PIL import Image
from scipy import ndimage

from src.errors import ConfigurationError, DataError
from src.grid3d import LocalizationList
from src.optics import Emitter, Frame, PhaseMask, PupilGrid, render_noiseless

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_COLORMAP = Path(__file__).parent / "resources" / "colormap.csv"
COLORMAP_SIZE = 256


def load_colormap(path: Optional[PathLike] = None) -> NDArray[np.uint8]:
    """Read an ``r,g,b`` table of 256 rows with 0–255 entries."""
    source = Path(path) if path is not None else DEFAULT_COLORMAP
    try:
        with open(source, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError as e:
        raise ConfigurationError(f"colormap not found: {source}") from e
    if not rows or [c.strip() for c in rows[0]] != ["r", "g", "b"]:
        raise DataError(f"{source}: expected header r,g,b")
    try:
        table = np.array([[int(c) for c in row] for row in rows[1:]], dtype=np.int64)
    except ValueError as e:
        raise DataError(f"{source}: {e}") from e
    if table.shape != (COLORMAP_SIZE, 3) or table.min() < 0 or table.max() > 255:
        raise DataError(f"{source}: expected {COLORMAP_SIZE} rows of 0-255 triples")
    return table.astype(np.uint8)


@dataclass
class AshImage:
    """Averaged counts and mean z on the fine lattice (rows = y)."""

    counts: NDArray[np.float64]
    mean_z: NDArray[np.float64]
    pitch: float

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.counts.shape[0]), int(self.counts.shape[1]))


def _triangle(shifts: int) -> NDArray[np.float64]:
    offsets = np.arange(-(shifts - 1), shifts)
    return (shifts - np.abs(offsets)).astype(np.float64)


def ash_histogram(
    locs: LocalizationList,
    bin_nm: float = 20.0,
    shifts: int = 4,
    extent: Optional[Tuple[float, float]] = None,
) -> AshImage:
    """Averaged shifted histogram of ``locs`` over ``extent`` = (width, height) nm."""
    if len(locs) == 0:
        raise DataError("cannot render an empty localization list")
    if bin_nm <= 0 or shifts < 1:
        raise ConfigurationError(f"invalid ASH parameters bin={bin_nm} shifts={shifts}")

    pitch = bin_nm / shifts
    if extent is None:
        extent = (float(locs.x.max()) + bin_nm, float(locs.y.max()) + bin_nm)
    width = max(int(np.ceil(extent[0] / bin_nm)), 1) * shifts
    height = max(int(np.ceil(extent[1] / bin_nm)), 1) * shifts

    cols = np.floor(locs.x / pitch).astype(np.int64)
    rows = np.floor(locs.y / pitch).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    if not inside.all():
        logger.warning(f"{int((~inside).sum())} localizations outside the render extent were skipped")
    if not inside.any():
        raise DataError("no localization lies inside the render extent")

    counts = np.zeros((height, width))
    z_sum = np.zeros((height, width))
    np.add.at(counts, (rows[inside], cols[inside]), 1.0)
    np.add.at(z_sum, (rows[inside], cols[inside]), locs.z[inside])

    tri = _triangle(shifts)
    kernel = np.outer(tri, tri)
    smooth_counts = ndimage.convolve(counts, kernel, mode="constant") / shifts**2
    smooth_z = ndimage.convolve(z_sum, kernel, mode="constant") / shifts**2
    mean_z = np.divide(smooth_z, smooth_counts, out=np.zeros_like(smooth_z), where=smooth_counts > 0)
    return AshImage(counts=smooth_counts, mean_z=mean_z, pitch=pitch)


def colorize(
    image: AshImage, axial_range: float, colormap: NDArray[np.uint8]
) -> NDArray[np.uint8]:
    """RGB pixels: hue from mean z over ±axial_range/2, brightness from counts."""
    half = axial_range / 2.0
    position = np.clip((image.mean_z + half) / axial_range, 0.0, 1.0)
    index = np.rint(position * (COLORMAP_SIZE - 1)).astype(np.int64)
    peak = image.counts.max()
    intensity = image.counts / peak if peak > 0 else image.counts
    rgb = colormap[index].astype(np.float64) * intensity[..., None]
    return np.rint(rgb).astype(np.uint8)


def render_ash(
    locs: LocalizationList,
    output: PathLike,
    bin_nm: float = 20.0,
    shifts: int = 4,
    axial_range: float = 4000.0,
    colormap: Optional[PathLike] = None,
    extent: Optional[Tuple[float, float]] = None,
) -> Path:
    """Write the z-coloured ASH render of ``locs`` as a PNG and return its path."""
    image = ash_histogram(locs, bin_nm, shifts, extent)
    rgb = colorize(image, axial_range, load_colormap(colormap))
    path = Path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path, format="PNG")
    logger.info(f"ASH render {image.shape[1]}x{image.shape[0]} px at {image.pitch:.2f} nm -> {path}")
    return path


def regenerate_frames(
    locs: LocalizationList,
    pupil: PupilGrid,
    mask: PhaseMask,
    shape: Tuple[int, int],
    frames: Optional[Sequence[int]] = None,
    uniform_photons: Optional[float] = None,
) -> List[Frame]:
    """Expected camera frames of ``locs`` rendered back through the optics.

    Localizations outside the field of view are dropped with a warning.
    """
    height, width = shape
    extent_x = width * pupil.config.camera_pixel
    extent_y = height * pupil.config.camera_pixel
    indices = sorted(set(int(f) for f in locs.frame)) if frames is None else list(frames)

    regenerated: List[Frame] = []
    for index in indices:
        subset = locs.for_frame(index)
        emitters: List[Emitter] = []
        for emitter in subset.to_emitters():
            if not (0.0 <= emitter.x < extent_x and 0.0 <= emitter.y < extent_y):
                continue
            photons = uniform_photons if uniform_photons is not None else emitter.photons
            if photons > 0:
                emitters.append(Emitter(emitter.x, emitter.y, emitter.z, photons))
        skipped = len(subset) - len(emitters)
        if skipped:
            logger.warning(f"frame {index}: {skipped} localizations not regenerated")
        frame = render_noiseless(pupil, mask, emitters, height, width)
        frame.metadata["frame"] = index
        regenerated.append(frame)
    return regenerated


def save_png16(path: PathLike, pixels: NDArray[np.float64]) -> Path:
    """Photon counts rounded into a 16-bit greyscale PNG."""
    values = np.clip(np.rint(pixels), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(values).save(target, format="PNG")
    return target


def _unit(pixels: NDArray[np.float64]) -> NDArray[np.float64]:
    low = pixels.min()
    span = pixels.max() - low
    return (pixels - low) / span if span > 0 else np.zeros_like(pixels)


def save_overlay(path: PathLike, observed: Frame, regenerated: Frame) -> Path:
    """Observed frame in green, regenerated frame in magenta, each min-max scaled."""
    if observed.shape != regenerated.shape:
        raise DataError(f"overlay shapes differ: {observed.shape} vs {regenerated.shape}")
    green = _unit(observed.pixels)
    magenta = _unit(regenerated.pixels)
    rgb = np.stack([magenta, green, magenta], axis=-1)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(rgb * 255).astype(np.uint8)).save(target, format="PNG")
    return target
