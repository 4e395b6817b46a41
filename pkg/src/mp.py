"""Fit-and-subtract Matching Pursuit with per-emitter Poisson MLE refinement.

Each iteration picks the best-correlated PSF template on the residual,
refines it continuously by maximum likelihood, subtracts its noiseless
model and repeats. Models are quantized to a dyadic grid before they are
subtracted so that subtraction and re-addition are exact.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.signal import fftconvolve

from src.errors import ConfigurationError
from src.grid3d import LocalizationList
from src.optics import (
    Emitter,
    Frame,
    PhaseMask,
    PupilGrid,
    psf_footprint,
    render_noiseless,
    window_frame,
    window_frame_gradient,
)

logger = logging.getLogger(__name__)

QUANTUM = 2.0**-20


@dataclass(frozen=True)
class MpConfig:
    max_emitters: int = 100
    photon_threshold: float = 500.0
    correlation_threshold: float = 0.5
    max_iterations: int = 50
    tolerance: float = 0.1

    def __post_init__(self) -> None:
        if self.max_emitters < 1 or self.max_iterations < 1:
            raise ConfigurationError("max_emitters and max_iterations must be positive")
        if self.photon_threshold <= 0 or self.tolerance <= 0:
            raise ConfigurationError("photon_threshold and tolerance must be positive")
        if not 0 < self.correlation_threshold <= 1:
            raise ConfigurationError("correlation_threshold must lie in (0, 1]")


@dataclass
class Dictionary:
    """Unit-norm camera-pixel templates on an axial lattice, plus the model they came from."""

    pupil: PupilGrid
    mask: PhaseMask
    z_values: NDArray[np.float64]
    templates: NDArray[np.float64]
    norms: NDArray[np.float64]
    radius: int

    @property
    def size(self) -> int:
        return 2 * self.radius + 1


def build_dictionary(
    pupil: PupilGrid,
    mask: PhaseMask,
    axial_range: Optional[float] = None,
    z_step: float = 100.0,
    radius: Optional[int] = None,
) -> Dictionary:
    """Templates every ``z_step`` nm over the axial range.

    Laterally the lattice is every camera pixel centre; one template per
    z serves all of them because placement at pixel centres is exactly
    shift invariant.
    """
    cfg = pupil.config
    axial = cfg.axial_range if axial_range is None else axial_range
    if z_step <= 0:
        raise ConfigurationError("z_step must be positive")
    count = int(np.ceil(axial / z_step - 1e-9)) + 1
    z_values = -axial / 2.0 + z_step * np.arange(count)
    if radius is None:
        widest = max(psf_footprint(pupil, mask, float(z), 0.95) for z in z_values)
        radius = int(np.ceil(widest / cfg.camera_pixel)) + 1
    radius = max(1, min(radius, pupil.window // (2 * cfg.upsample_factor)))
    size = 2 * radius + 1
    centre = (radius + 0.5) * cfg.camera_pixel

    templates = np.empty((count, size, size))
    norms = np.empty(count)
    for k, z in enumerate(z_values):
        psf = window_frame(pupil, mask, Emitter(centre, centre, float(z), 1.0), (0, 0), (size, size))
        norms[k] = float(np.linalg.norm(psf))
        templates[k] = psf / norms[k]
    logger.debug(f"Dictionary: {count} z-slices, template {size}x{size} px")
    return Dictionary(pupil, mask, z_values, templates, norms, radius)


@dataclass
class Candidate:
    x: float
    y: float
    z: float
    photons: float
    score: float
    row: int
    col: int


def estimate_background(frame: Frame) -> float:
    return float(np.percentile(frame.pixels, 10))


def quantize(values: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.round(np.asarray(values, dtype=np.float64) / QUANTUM) * QUANTUM


def detect_candidate(residual: Frame, dictionary: Dictionary, background: float = 0.0) -> Candidate:
    """Lattice point with the highest normalized cross-correlation."""
    signal = np.maximum(residual.pixels, 0.0) - background
    size = dictionary.size
    energy = fftconvolve(signal * signal, np.ones((size, size)), mode="same")
    denominator = np.sqrt(np.maximum(energy, 0.0))
    valid = denominator > 1e-12 * max(float(denominator.max()), 1e-300)

    best: Optional[Candidate] = None
    pixel = dictionary.pupil.config.camera_pixel
    for k, template in enumerate(dictionary.templates):
        numerator = fftconvolve(signal, template[::-1, ::-1], mode="same")
        score = np.where(valid, numerator / np.where(valid, denominator, 1.0), 0.0)
        flat = int(np.argmax(score))
        value = float(score.flat[flat])
        if best is None or value > best.score:
            row, col = np.unravel_index(flat, score.shape)
            best = Candidate(
                x=(col + 0.5) * pixel,
                y=(row + 0.5) * pixel,
                z=float(dictionary.z_values[k]),
                photons=float(numerator[row, col]) / float(dictionary.norms[k]),
                score=value,
                row=int(row),
                col=int(col),
            )
    assert best is not None
    return best


@dataclass(frozen=True)
class Window:
    """Camera sub-window: (row, col) corner and (rows, cols) size."""

    origin: Tuple[int, int]
    shape: Tuple[int, int]


def window_around(row: int, col: int, radius: int, frame_shape: Tuple[int, int]) -> Window:
    top, left = max(row - radius, 0), max(col - radius, 0)
    bottom = min(row + radius + 1, frame_shape[0])
    right = min(col + radius + 1, frame_shape[1])
    return Window((top, left), (bottom - top, right - left))


@dataclass
class Refinement:
    x: float
    y: float
    z: float
    photons: float
    converged: bool
    iterations: int
    nll: float

    @property
    def emitter(self) -> Emitter:
        return Emitter(self.x, self.y, self.z, self.photons)


def _nll(mu: NDArray[np.float64], counts: NDArray[np.float64]) -> float:
    return float(np.sum(mu - counts * np.log(mu)))


class _WindowModel:
    """μ = N·PSF + b on a sub-window, with analytic position derivatives."""

    def __init__(self, dictionary: Dictionary, window: Window, background: float) -> None:
        self.pupil = dictionary.pupil
        self.mask = dictionary.mask
        self.window = window
        self.background = background

    def evaluate(self, theta: NDArray[np.float64]) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        x, y, z, photons = (float(v) for v in theta)
        pixels, derivatives = window_frame_gradient(
            self.pupil, self.mask, Emitter(x, y, z, 1.0), self.window.origin, self.window.shape
        )
        psf = pixels.ravel()
        jac = np.column_stack([photons * derivatives.reshape(3, -1).T, psf])
        mu = np.maximum(photons * psf + self.background, 1e-9)
        return mu, jac


def mle_refine(
    frame: Frame,
    window: Window,
    init: Tuple[float, float, float, float],
    background: float,
    dictionary: Dictionary,
    cfg: MpConfig = MpConfig(),
) -> Refinement:
    """Levenberg-Marquardt on the Poisson negative log-likelihood in ``window``.

    Converges when the position step drops below ``cfg.tolerance`` nm; if
    the iteration cap is reached first the initial values come back with
    ``converged=False``.
    """
    pixel = dictionary.pupil.config.camera_pixel
    top, left = window.origin
    rows, cols = window.shape
    counts = np.maximum(
        frame.pixels[top : top + rows, left : left + cols], 0.0
    ).ravel()
    model = _WindowModel(dictionary, window, background)
    eps = 1e-6
    x_bounds = (left * pixel, (left + cols) * pixel - eps)
    y_bounds = (top * pixel, (top + rows) * pixel - eps)
    z_margin = float(dictionary.z_values[1] - dictionary.z_values[0]) if len(dictionary.z_values) > 1 else 0.0
    z_bounds = (float(dictionary.z_values[0]) - z_margin, float(dictionary.z_values[-1]) + z_margin)

    def clamp(theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.array(
            [
                np.clip(theta[0], *x_bounds),
                np.clip(theta[1], *y_bounds),
                np.clip(theta[2], *z_bounds),
                max(float(theta[3]), 1.0),
            ]
        )

    theta = clamp(np.array(init, dtype=np.float64))
    mu, jac = model.evaluate(theta)
    nll = _nll(mu, counts)
    damping = 1e-3
    moved = np.inf
    for iteration in range(1, cfg.max_iterations + 1):
        gradient = jac.T @ (1.0 - counts / mu)
        hessian = jac.T @ (jac / mu[:, None])
        accepted = False
        for _ in range(10):
            system = hessian + damping * np.diag(np.diag(hessian))
            try:
                delta = -np.linalg.solve(system, gradient)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            trial = clamp(theta + delta)
            mu_trial, jac_trial = model.evaluate(trial)
            nll_trial = _nll(mu_trial, counts)
            if nll_trial <= nll:
                moved = float(np.linalg.norm(trial[:3] - theta[:3]))
                theta, mu, jac, nll = trial, mu_trial, jac_trial, nll_trial
                damping = max(damping / 10.0, 1e-9)
                accepted = True
                break
            damping *= 10.0
        if not accepted or moved < cfg.tolerance:
            return Refinement(*(float(v) for v in theta), converged=True, iterations=iteration, nll=nll)

    logger.warning(f"MLE did not converge in {cfg.max_iterations} iterations; keeping the seed")
    x, y, z, photons = (float(v) for v in init)
    return Refinement(x, y, z, photons, converged=False, iterations=cfg.max_iterations, nll=nll)


def mp_localize(
    frame: Frame,
    dictionary: Dictionary,
    cfg: MpConfig = MpConfig(),
    background: Optional[float] = None,
    frame_index: int = 0,
    on_subtract: Optional[Callable[[int, NDArray[np.float64]], None]] = None,
) -> LocalizationList:
    """Greedy detect, refine, subtract until a stop rule fires.

    ``on_subtract`` receives the emitter count and the residual after each subtraction.
    """
    background = estimate_background(frame) if background is None else background
    height, width = frame.shape
    residual = quantize(frame.pixels)
    found: List[Refinement] = []
    while len(found) < cfg.max_emitters:
        current = Frame(residual, frame.pixel_pitch, background)
        candidate = detect_candidate(current, dictionary, background)
        if candidate.score < cfg.correlation_threshold or candidate.photons < cfg.photon_threshold:
            break
        window = window_around(candidate.row, candidate.col, dictionary.radius, (height, width))
        init = (candidate.x, candidate.y, candidate.z, candidate.photons)
        refined = mle_refine(current, window, init, background, dictionary, cfg)
        if refined.photons < cfg.photon_threshold:
            break
        model = render_noiseless(dictionary.pupil, dictionary.mask, [refined.emitter], height, width)
        residual = residual - quantize(model.pixels)
        found.append(refined)
        if on_subtract is not None:
            on_subtract(len(found), residual)
        logger.debug(
            f"frame {frame_index}: emitter {len(found)} at ({refined.x:.1f}, {refined.y:.1f}, "
            f"{refined.z:.1f}) nm, {refined.photons:.0f} photons, score {candidate.score:.3f}"
        )

    return LocalizationList(
        frame=np.full(len(found), frame_index, dtype=np.int64),
        x=np.array([r.x for r in found]),
        y=np.array([r.y for r in found]),
        z=np.array([r.z for r in found]),
        photons=np.array([r.photons for r in found]),
    )


def calibrate_correlation_threshold(
    dictionary: Dictionary,
    background: float,
    shape: Tuple[int, int],
    trials: int = 200,
    seed: int = 0,
    percentile: float = 99.9,
) -> float:
    """Percentile of the best correlation found on background-only frames."""
    if trials < 1:
        raise ConfigurationError("trials must be positive")
    rng = np.random.default_rng(seed)
    pitch = dictionary.pupil.config.camera_pixel
    maxima = np.empty(trials)
    for trial in range(trials):
        pixels = rng.poisson(background, size=shape).astype(np.float64)
        maxima[trial] = detect_candidate(Frame(pixels, pitch, background), dictionary, background).score
    threshold = float(np.percentile(maxima, percentile))
    logger.info(f"Calibrated correlation threshold {threshold:.4f} from {trials} null frames")
    return threshold
