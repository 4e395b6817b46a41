"""Scalar Fourier-optics image formation for phase-mask engineered PSFs.

The pupil lives on an N×N grid whose inscribed disc is the aperture. It is
zero-padded into an M×M FFT so that the image-plane sample pitch equals
``camera_pixel / upsample_factor`` exactly. A single emitter therefore
produces an M×M hi-res intensity window which is placed on the hi-res
canvas of a frame and box-binned to camera pixels.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import fft as sfft

from src.errors import ConfigurationError, DataError, EmitterOutOfBoundsError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
ComplexArray = NDArray[np.complex128]


@dataclass(frozen=True)
class OpticalConfig:
    """Microscope and simulation sampling parameters (lengths in nm)."""

    numerical_aperture: float = 1.45
    immersion_index: float = 1.518
    emission_wavelength: float = 670.0
    camera_pixel: float = 110.0
    pupil_samples: int = 128
    upsample_factor: int = 4
    axial_range: float = 4000.0

    def __post_init__(self) -> None:
        if self.numerical_aperture <= 0:
            raise ConfigurationError("numerical_aperture must be positive")
        if self.numerical_aperture >= self.immersion_index:
            raise ConfigurationError(
                f"numerical_aperture {self.numerical_aperture} must be below "
                f"immersion_index {self.immersion_index}"
            )
        if self.emission_wavelength <= 0 or self.camera_pixel <= 0:
            raise ConfigurationError("wavelength and camera_pixel must be positive")
        if self.pupil_samples < 4 or self.pupil_samples % 2:
            raise ConfigurationError(
                f"pupil_samples must be an even integer >= 4, got {self.pupil_samples}"
            )
        if self.upsample_factor < 1:
            raise ConfigurationError("upsample_factor must be >= 1")
        if self.axial_range <= 0:
            raise ConfigurationError("axial_range must be positive")

    @property
    def pitch(self) -> float:
        """Hi-res sample pitch at the sample plane in nm."""
        return self.camera_pixel / self.upsample_factor

    def to_dict(self) -> Dict[str, Any]:
        return {
            "numerical_aperture": self.numerical_aperture,
            "immersion_index": self.immersion_index,
            "emission_wavelength": self.emission_wavelength,
            "camera_pixel": self.camera_pixel,
            "pupil_samples": self.pupil_samples,
            "upsample_factor": self.upsample_factor,
            "axial_range": self.axial_range,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OpticalConfig":
        known = {k: data[k] for k in cls().to_dict() if k in data}
        return cls(**known)


@dataclass(frozen=True)
class PupilGrid:
    """Frequency-domain sampling of the pupil (all frequencies in 1/nm)."""

    config: OpticalConfig
    k_x: FloatArray
    k_y: FloatArray
    k_z: FloatArray
    aperture: NDArray[np.bool_]
    window: int
    normalization: float
    embed_index: NDArray[np.intp]

    @property
    def samples(self) -> int:
        return self.config.pupil_samples

    @property
    def pitch(self) -> float:
        return self.config.pitch


@dataclass
class PhaseMask:
    """Pupil-plane phase in radians; values outside the aperture are inert."""

    phase: FloatArray
    aperture: NDArray[np.bool_]

    def __post_init__(self) -> None:
        if self.phase.shape != self.aperture.shape:
            raise DataError(
                f"phase shape {self.phase.shape} does not match aperture "
                f"{self.aperture.shape}"
            )

    @classmethod
    def flat(cls, pupil: PupilGrid) -> "PhaseMask":
        return cls(np.zeros(pupil.aperture.shape), pupil.aperture.copy())

    def copy(self) -> "PhaseMask":
        return PhaseMask(self.phase.copy(), self.aperture.copy())

    def wrapped(self) -> "PhaseMask":
        """Return the mask with phases wrapped into [-pi, pi)."""
        wrapped = np.mod(self.phase + np.pi, 2 * np.pi) - np.pi
        return PhaseMask(np.where(self.aperture, wrapped, 0.0), self.aperture.copy())


@dataclass(frozen=True)
class Emitter:
    """Point source: x, y from the FOV corner, z from focus (nm)."""

    x: float
    y: float
    z: float
    photons: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.photons)


@dataclass
class Frame:
    """Camera image in photons per pixel."""

    pixels: FloatArray
    pixel_pitch: float
    background: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.pixels.shape[0]), int(self.pixels.shape[1]))


def build_pupil(cfg: OpticalConfig) -> PupilGrid:
    """Sample the pupil so the FFT image pitch equals the hi-res pitch."""
    if cfg.numerical_aperture >= cfg.immersion_index:
        raise ConfigurationError("numerical_aperture must be below immersion_index")

    samples = cfg.pupil_samples
    pitch = cfg.pitch
    cutoff = cfg.numerical_aperture / cfg.emission_wavelength

    window = int(np.floor(samples / (2.0 * cutoff * pitch)))
    window -= window % 2
    # the aperture must stay strictly inside the grid so that k and -k are both sampled
    while window > 0 and cutoff * window * pitch >= samples / 2:
        window -= 2
    if window < samples:
        raise ConfigurationError(
            f"hi-res pitch {pitch} nm undersamples the pupil cutoff; "
            "increase upsample_factor"
        )

    dk = 1.0 / (window * pitch)
    offsets = np.arange(samples) - samples // 2
    k_x, k_y = np.meshgrid(offsets * dk, offsets * dk)
    radial_sq = k_x**2 + k_y**2
    aperture = radial_sq <= cutoff**2
    medium = cfg.immersion_index / cfg.emission_wavelength
    k_z = np.where(aperture, np.sqrt(np.maximum(medium**2 - radial_sq, 0.0)), 0.0)
    normalization = 1.0 / (window * window * int(aperture.sum()))

    logger.debug(
        f"Pupil: N={samples}, window={window}, aperture px={int(aperture.sum())}, "
        f"pitch={pitch} nm"
    )
    return PupilGrid(
        config=cfg,
        k_x=k_x,
        k_y=k_y,
        k_z=k_z,
        aperture=aperture,
        window=window,
        normalization=normalization,
        embed_index=np.mod(offsets, window).astype(np.intp),
    )


def _pupil_field(
    pupil: PupilGrid, mask: PhaseMask, z: float, dx: float, dy: float
) -> ComplexArray:
    total = mask.phase + 2.0 * np.pi * (
        z * pupil.k_z + dx * pupil.k_x + dy * pupil.k_y
    )
    return np.where(pupil.aperture, np.exp(1j * total), 0.0 + 0.0j)


def _image_field(pupil: PupilGrid, pupil_field: ComplexArray) -> ComplexArray:
    """Image-plane amplitude with its origin at index 0 (uncentred)."""
    full = np.zeros((pupil.window, pupil.window), dtype=np.complex128)
    full[np.ix_(pupil.embed_index, pupil.embed_index)] = pupil_field
    return np.asarray(sfft.fft2(full))


def psf_slice(
    pupil: PupilGrid, mask: PhaseMask, z: float, dx: float = 0.0, dy: float = 0.0
) -> FloatArray:
    """Hi-res PSF window (M×M) centred at index M//2, shifted by (dx, dy) nm."""
    amplitude = _image_field(pupil, _pupil_field(pupil, mask, z, dx, dy))
    intensity = pupil.normalization * (amplitude.real**2 + amplitude.imag**2)
    return np.asarray(sfft.fftshift(intensity))


def _placement(pupil: PupilGrid, x: float, y: float) -> Tuple[int, int, float, float]:
    pitch = pupil.pitch
    col = int(np.floor(x / pitch))
    row = int(np.floor(y / pitch))
    return row, col, x - (col + 0.5) * pitch, y - (row + 0.5) * pitch


def _overlap(center: int, size: int, extent: int) -> Optional[Tuple[slice, slice]]:
    """Canvas and window slices where a window centred at ``center`` lands."""
    start = center - size // 2
    lo = max(start, 0)
    hi = min(start + size, extent)
    if hi <= lo:
        return None
    return slice(lo, hi), slice(lo - start, hi - start)


def check_in_fov(
    emitters: Sequence[Emitter], height: int, width: int, camera_pixel: float
) -> None:
    """Raise ``EmitterOutOfBoundsError`` for the first emitter outside the FOV."""
    extent_x = width * camera_pixel
    extent_y = height * camera_pixel
    for index, emitter in enumerate(emitters):
        if not (0.0 <= emitter.x < extent_x and 0.0 <= emitter.y < extent_y):
            raise EmitterOutOfBoundsError(
                index,
                f"({emitter.x:.1f}, {emitter.y:.1f}) nm outside "
                f"{extent_x:.0f}x{extent_y:.0f} nm field of view",
            )
        if not emitter.photons > 0:
            raise EmitterOutOfBoundsError(index, "photon count must be positive")


def bin_canvas(canvas: FloatArray, factor: int) -> FloatArray:
    """Sum ``factor``×``factor`` blocks of the hi-res canvas."""
    rows, cols = canvas.shape
    return canvas.reshape(rows // factor, factor, cols // factor, factor).sum(axis=(1, 3))


def render_hires(
    pupil: PupilGrid,
    mask: PhaseMask,
    emitters: Sequence[Emitter],
    height: int,
    width: int,
) -> FloatArray:
    """Expected photons on the hi-res canvas (height·u × width·u)."""
    cfg = pupil.config
    check_in_fov(emitters, height, width, cfg.camera_pixel)
    factor = cfg.upsample_factor
    canvas = np.zeros((height * factor, width * factor))
    for emitter in emitters:
        row, col, dx, dy = _placement(pupil, emitter.x, emitter.y)
        rows = _overlap(row, pupil.window, canvas.shape[0])
        cols = _overlap(col, pupil.window, canvas.shape[1])
        if rows is None or cols is None:
            continue
        psf = psf_slice(pupil, mask, emitter.z, dx, dy)
        canvas[rows[0], cols[0]] += emitter.photons * psf[rows[1], cols[1]]
    return canvas


def render_noiseless(
    pupil: PupilGrid,
    mask: PhaseMask,
    emitters: Sequence[Emitter],
    height: int,
    width: int,
) -> Frame:
    """Render the expected camera frame of ``emitters`` (no background)."""
    canvas = render_hires(pupil, mask, emitters, height, width)
    pixels = bin_canvas(canvas, pupil.config.upsample_factor)
    return Frame(pixels=pixels, pixel_pitch=pupil.config.camera_pixel, background=0.0)


def apply_noise(
    frame: Frame,
    background: float,
    rng_seed: int,
    read_noise: float = 0.0,
) -> Frame:
    """Sample a Poisson camera frame with uniform background.

    Optional Gaussian read noise (std in photons) is added after Poisson
    sampling and the result clipped at zero.
    """
    if background < 0:
        raise DataError(f"background must be non-negative, got {background}")
    if read_noise < 0:
        raise DataError(f"read_noise must be non-negative, got {read_noise}")
    rng = np.random.default_rng(rng_seed)
    counts = rng.poisson(frame.pixels + background).astype(np.float64)
    if read_noise > 0:
        counts = np.maximum(counts + rng.normal(0.0, read_noise, counts.shape), 0.0)
    return Frame(
        pixels=counts,
        pixel_pitch=frame.pixel_pitch,
        background=background,
        metadata=dict(frame.metadata),
    )


def mask_gradient(
    pupil: PupilGrid,
    mask: PhaseMask,
    emitters: Sequence[Emitter],
    upstream: FloatArray,
) -> FloatArray:
    """Gradient of a loss with respect to the mask phase.

    ``upstream`` is dL/dFrame for the noiseless frame. The adjoint runs the
    bin → crop → |.|² → FFT chain backwards for every emitter.
    """
    cfg = pupil.config
    factor = cfg.upsample_factor
    height, width = upstream.shape
    check_in_fov(emitters, height, width, cfg.camera_pixel)
    grad = np.zeros(pupil.aperture.shape)
    if not np.any(upstream):
        return grad

    hires_upstream = np.repeat(np.repeat(upstream, factor, axis=0), factor, axis=1)
    window = pupil.window
    for emitter in emitters:
        row, col, dx, dy = _placement(pupil, emitter.x, emitter.y)
        rows = _overlap(row, window, hires_upstream.shape[0])
        cols = _overlap(col, window, hires_upstream.shape[1])
        if rows is None or cols is None:
            continue
        field_p = _pupil_field(pupil, mask, emitter.z, dx, dy)
        amplitude = _image_field(pupil, field_p)

        grad_intensity = np.zeros((window, window))
        grad_intensity[rows[1], cols[1]] = emitter.photons * hires_upstream[rows[0], cols[0]]
        grad_amplitude = (
            2.0 * pupil.normalization * np.asarray(sfft.ifftshift(grad_intensity)) * amplitude
        )
        grad_full = window * window * np.asarray(sfft.ifft2(grad_amplitude))
        grad_pupil = grad_full[np.ix_(pupil.embed_index, pupil.embed_index)]
        grad += np.imag(np.conj(field_p) * grad_pupil)

    return np.where(pupil.aperture, grad, 0.0)


def _partial_dft(
    pupil: PupilGrid, shifts: NDArray[np.signedinteger[Any]]
) -> Tuple[ComplexArray, NDArray[np.bool_]]:
    """Rows of the M-point DFT at signed image indices ``shifts`` relative to the PSF centre.

    The mask flags the indices that fall inside the M×M PSF window; the
    periodic DFT repeats beyond it while a full render does not.
    """
    window = pupil.window
    offsets = np.arange(pupil.samples) - pupil.samples // 2
    matrix = np.exp(-2j * np.pi * np.outer(shifts, offsets) / window)
    inside = (shifts >= -(window // 2)) & (shifts < window - window // 2)
    return matrix, inside


def _window_field(
    pupil: PupilGrid,
    mask: PhaseMask,
    emitter: Emitter,
    origin: Tuple[int, int],
    shape: Tuple[int, int],
) -> Tuple[ComplexArray, ComplexArray, ComplexArray, ComplexArray, FloatArray]:
    cfg = pupil.config
    pixel = cfg.camera_pixel
    factor = cfg.upsample_factor
    eps = 1e-6
    local_x = float(np.clip(emitter.x - origin[1] * pixel, 0.0, shape[1] * pixel - eps))
    local_y = float(np.clip(emitter.y - origin[0] * pixel, 0.0, shape[0] * pixel - eps))
    row, col, dx, dy = _placement(pupil, local_x, local_y)
    rows, rows_inside = _partial_dft(pupil, np.arange(shape[0] * factor) - row)
    cols, cols_inside = _partial_dft(pupil, np.arange(shape[1] * factor) - col)
    field_p = _pupil_field(pupil, mask, emitter.z, dx, dy)
    scale = pupil.normalization * np.outer(rows_inside, cols_inside)
    return rows, cols.T, field_p, rows @ field_p @ cols.T, scale


def window_frame(
    pupil: PupilGrid,
    mask: PhaseMask,
    emitter: Emitter,
    origin: Tuple[int, int],
    shape: Tuple[int, int],
) -> FloatArray:
    """Noiseless pixels of one emitter inside a camera sub-window.

    ``origin`` is the (row, col) camera pixel of the sub-window corner.
    Coordinates outside the sub-window are clamped to its edge. Only the
    sub-window is transformed, so the cost does not depend on the frame.
    """
    _, _, _, amplitude, scale = _window_field(pupil, mask, emitter, origin, shape)
    intensity = scale * (amplitude.real**2 + amplitude.imag**2)
    return emitter.photons * bin_canvas(intensity, pupil.config.upsample_factor)


def window_frame_gradient(
    pupil: PupilGrid,
    mask: PhaseMask,
    emitter: Emitter,
    origin: Tuple[int, int],
    shape: Tuple[int, int],
) -> Tuple[FloatArray, FloatArray]:
    """Unit-photon sub-window pixels and their (3, rows, cols) derivatives in x, y, z.

    Lateral and axial moves are linear phase ramps on the pupil, so each
    derivative is one more partial transform of the same pupil field.
    """
    rows, cols_t, field_p, amplitude, scale = _window_field(pupil, mask, emitter, origin, shape)
    factor = pupil.config.upsample_factor
    pixels = bin_canvas(scale * (amplitude.real**2 + amplitude.imag**2), factor)
    derivatives = np.empty((3, *pixels.shape))
    for index, k in enumerate((pupil.k_x, pupil.k_y, pupil.k_z)):
        d_amplitude = rows @ (2j * np.pi * k * field_p) @ cols_t
        d_intensity = 2.0 * scale * np.real(np.conj(amplitude) * d_amplitude)
        derivatives[index] = bin_canvas(d_intensity, factor)
    return pixels, derivatives


def psf_footprint(pupil: PupilGrid, mask: PhaseMask, z: float, fraction: float = 0.9) -> float:
    """Radius (nm) of the disc holding ``fraction`` of the PSF energy at ``z``."""
    psf = psf_slice(pupil, mask, z)
    center = pupil.window // 2
    offsets = (np.arange(pupil.window) - center) * pupil.pitch
    yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
    radius = np.hypot(xx, yy).ravel()
    order = np.argsort(radius, kind="stable")
    cumulative = np.cumsum(psf.ravel()[order])
    index = int(np.searchsorted(cumulative, fraction * cumulative[-1]))
    return float(radius[order][min(index, radius.size - 1)])


def emitters_from_array(rows: NDArray[np.float64]) -> List[Emitter]:
    """Build emitters from an (n, 4) array of x, y, z, photons."""
    return [Emitter(float(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows]


def emitters_to_array(emitters: Sequence[Emitter]) -> FloatArray:
    if not emitters:
        return np.zeros((0, 4))
    return np.array([e.as_tuple() for e in emitters], dtype=np.float64)
