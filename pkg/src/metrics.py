"""Evaluation metrics: gated optimal matching, Jaccard, RMSE and Cramér-Rao bounds."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import spearmanr

from src.errors import ConfigurationError, DataError, NumericalError
from src.grid3d import LocalizationList
from src.optics import Emitter, PhaseMask, PupilGrid, render_noiseless

logger = logging.getLogger(__name__)

DEFAULT_MATCH_THRESHOLD = 150.0
FISHER_PARAMETERS = ("x", "y", "z", "photons", "background")


@dataclass
class MatchResult:
    """Matched (gt index, pred index, distance nm) pairs plus detection counts."""

    pairs: List[Tuple[int, int, float]]
    tp: int
    fp: int
    fn: int
    threshold: float
    lateral_only: bool = False

    @property
    def total_distance(self) -> float:
        return float(sum(d for _, _, d in self.pairs))


def match_points(
    gt: LocalizationList,
    pred: LocalizationList,
    threshold: float = DEFAULT_MATCH_THRESHOLD,
    lateral_only: bool = False,
) -> MatchResult:
    """Maximum-cardinality, minimum-distance assignment under a distance gate.

    Disallowed pairs get a cost larger than any feasible sum of allowed
    distances, so the solver first maximises the number of gated pairs and
    then minimises their total distance.
    """
    if threshold <= 0:
        raise ConfigurationError(f"match threshold must be positive, got {threshold}")
    n_gt, n_pred = len(gt), len(pred)
    if n_gt == 0 or n_pred == 0:
        return MatchResult([], 0, n_pred, n_gt, threshold, lateral_only)

    columns = slice(0, 2) if lateral_only else slice(0, 3)
    distance = cdist(gt.positions[:, columns], pred.positions[:, columns])
    allowed = distance <= threshold
    blocked = (min(n_gt, n_pred) + 1) * threshold
    cost = np.where(allowed, distance, blocked)
    rows, cols = linear_sum_assignment(cost)

    pairs = [
        (int(r), int(c), float(distance[r, c])) for r, c in zip(rows, cols) if allowed[r, c]
    ]
    tp = len(pairs)
    return MatchResult(pairs, tp, n_pred - tp, n_gt - tp, threshold, lateral_only)


def jaccard(m: MatchResult) -> float:
    """TP / (TP + FP + FN); 1.0 for an empty comparison."""
    total = m.tp + m.fp + m.fn
    return 1.0 if total == 0 else m.tp / total


def _squared_errors(
    m: MatchResult, gt: LocalizationList, pred: LocalizationList
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    gi = np.array([p[0] for p in m.pairs], dtype=np.intp)
    pi = np.array([p[1] for p in m.pairs], dtype=np.intp)
    lateral = (gt.x[gi] - pred.x[pi]) ** 2 + (gt.y[gi] - pred.y[pi]) ** 2
    axial = (gt.z[gi] - pred.z[pi]) ** 2
    return lateral, axial


def rmse(
    m: MatchResult, gt: LocalizationList, pred: LocalizationList
) -> Optional[Tuple[float, float]]:
    """(lateral, axial) RMSE in nm over matched pairs, or None without pairs."""
    if not m.pairs:
        return None
    lateral, axial = _squared_errors(m, gt, pred)
    return float(np.sqrt(lateral.mean())), float(np.sqrt(axial.mean()))


@dataclass
class EvaluationRow:
    density: float
    jaccard: float
    rmse_lateral: Optional[float]
    rmse_axial: Optional[float]
    tp: int
    fp: int
    fn: int


def evaluate(
    gt: LocalizationList,
    pred: LocalizationList,
    threshold: float = DEFAULT_MATCH_THRESHOLD,
    lateral_only: bool = False,
    min_photons: float = 0.0,
    density: float = 0.0,
) -> EvaluationRow:
    """Frame-by-frame matching pooled into one row.

    Entries below ``min_photons`` are ignored on both sides. RMSE pools the
    squared errors of all matched pairs.
    """
    if min_photons > 0:
        gt = gt.select(gt.photons >= min_photons)
        pred = pred.select(pred.photons >= min_photons)

    tp = fp = fn = 0
    lateral_sq: List[NDArray[np.float64]] = []
    axial_sq: List[NDArray[np.float64]] = []
    for frame in np.union1d(gt.frame, pred.frame):
        gt_frame = gt.for_frame(int(frame))
        pred_frame = pred.for_frame(int(frame))
        m = match_points(gt_frame, pred_frame, threshold, lateral_only)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        if m.pairs:
            lateral, axial = _squared_errors(m, gt_frame, pred_frame)
            lateral_sq.append(lateral)
            axial_sq.append(axial)

    total = tp + fp + fn
    score = 1.0 if total == 0 else tp / total
    if lateral_sq:
        rmse_lateral: Optional[float] = float(np.sqrt(np.concatenate(lateral_sq).mean()))
        rmse_axial: Optional[float] = float(np.sqrt(np.concatenate(axial_sq).mean()))
    else:
        rmse_lateral = rmse_axial = None
    return EvaluationRow(density, score, rmse_lateral, rmse_axial, tp, fp, fn)


def density_correlation(rows: Sequence[EvaluationRow]) -> Optional[float]:
    """Spearman rank correlation of (density, jaccard), None when undefined."""
    if len(rows) < 2:
        return None
    result = spearmanr([r.density for r in rows], [r.jaccard for r in rows])
    value = float(result[0])
    return None if np.isnan(value) else value


@dataclass(frozen=True)
class CrlbReport:
    """Standard-deviation bounds at one axial position."""

    z: float
    photons: float
    background: float
    sigma_x: float
    sigma_y: float
    sigma_z: float
    sigma_n: float
    sigma_background: Optional[float] = None

    @property
    def trace_xyz(self) -> float:
        return self.sigma_x**2 + self.sigma_y**2 + self.sigma_z**2

    def to_dict(self) -> Dict[str, Any]:
        return {
            "z_nm": self.z,
            "sigma_x_nm": self.sigma_x,
            "sigma_y_nm": self.sigma_y,
            "sigma_z_nm": self.sigma_z,
            "sigma_n": self.sigma_n,
        }


@dataclass
class FisherModel:
    """Expected unit-photon frame and its derivatives for one emitter."""

    psf: NDArray[np.float64]
    derivatives: Dict[str, NDArray[np.float64]] = field(default_factory=dict)


def _model_frames(
    pupil: PupilGrid,
    mask: PhaseMask,
    z: float,
    shape: Tuple[int, int],
    spatial_step: float,
) -> FisherModel:
    pixel = pupil.config.camera_pixel
    x0 = shape[1] * pixel / 2.0
    y0 = shape[0] * pixel / 2.0

    def frame(dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> NDArray[np.float64]:
        emitter = Emitter(x0 + dx, y0 + dy, z + dz, 1.0)
        return render_noiseless(pupil, mask, [emitter], shape[0], shape[1]).pixels

    h = spatial_step
    return FisherModel(
        psf=frame(),
        derivatives={
            "x": (frame(dx=h) - frame(dx=-h)) / (2 * h),
            "y": (frame(dy=h) - frame(dy=-h)) / (2 * h),
            "z": (frame(dz=h) - frame(dz=-h)) / (2 * h),
        },
    )


def default_crlb_shape(pupil: PupilGrid) -> Tuple[int, int]:
    """Camera window covering one full PSF window."""
    size = pupil.window // pupil.config.upsample_factor
    return size, size


def fisher_matrix(
    pupil: PupilGrid,
    mask: PhaseMask,
    z: float,
    photons: float,
    background: float,
    shape: Optional[Tuple[int, int]] = None,
    estimate_background: bool = False,
    spatial_step: float = 1.0,
) -> NDArray[np.float64]:
    """Poisson Fisher information over (x, y, z, N[, background]).

    Spatial derivatives are central differences; the photon derivative is
    the unit-photon frame itself since the model is linear in N.
    """
    if not photons > 0:
        raise DataError(f"photons must be positive, got {photons}")
    if background < 0:
        raise DataError(f"background must be non-negative, got {background}")
    shape = shape if shape is not None else default_crlb_shape(pupil)
    model = _model_frames(pupil, mask, z, shape, spatial_step)

    mu = photons * model.psf + background
    columns = [
        photons * model.derivatives["x"],
        photons * model.derivatives["y"],
        photons * model.derivatives["z"],
        model.psf,
    ]
    if estimate_background:
        columns.append(np.ones_like(mu))
    valid = mu > 0
    jac = np.stack([c[valid] for c in columns], axis=1)
    return np.asarray(jac.T @ (jac / mu[valid][:, None]))


def _check_degenerate(
    fisher: NDArray[np.float64], scales: NDArray[np.float64], tolerance: float
) -> None:
    names = FISHER_PARAMETERS[: fisher.shape[0]]
    scaled = fisher * np.outer(scales, scales)
    diagonal = np.diag(scaled)
    reference = float(np.max(diagonal))
    if not reference > 0:
        raise NumericalError("Fisher matrix vanishes", parameter=names[0])
    weak = np.flatnonzero(diagonal <= tolerance * reference)
    if weak.size:
        raise NumericalError(
            f"Fisher information for {names[weak[0]]} is degenerate",
            parameter=names[weak[0]],
        )
    norm = np.sqrt(diagonal)
    correlation = scaled / np.outer(norm, norm)
    values, vectors = np.linalg.eigh(correlation)
    if values[0] <= tolerance:
        worst = int(np.argmax(np.abs(vectors[:, 0])))
        raise NumericalError(
            f"Fisher matrix is singular along {names[worst]}", parameter=names[worst]
        )


def crlb(
    pupil: PupilGrid,
    mask: PhaseMask,
    z: float,
    photons: float,
    background: float,
    shape: Optional[Tuple[int, int]] = None,
    estimate_background: bool = False,
    tolerance: float = 1e-9,
) -> CrlbReport:
    """Single-emitter Cramér-Rao bounds at axial position ``z``.

    Raises ``NumericalError`` naming the parameter whose information is
    degenerate, e.g. z for a flat mask exactly at focus.
    """
    fisher = fisher_matrix(
        pupil, mask, z, photons, background, shape, estimate_background
    )
    # dimensionless scaling: wavelength for positions, photon counts for amplitudes
    wavelength = pupil.config.emission_wavelength
    scales = [wavelength, wavelength, wavelength, photons]
    if estimate_background:
        scales.append(max(background, 1.0))
    _check_degenerate(fisher, np.array(scales), tolerance)

    try:
        variances = np.diag(np.linalg.inv(fisher))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Fisher matrix inversion failed: {e}") from e
    if not np.all(np.isfinite(variances)) or np.any(variances <= 0):
        bad = int(np.argmin(np.where(np.isfinite(variances), variances, -np.inf)))
        raise NumericalError(
            f"non-positive variance bound for {FISHER_PARAMETERS[bad]}",
            parameter=FISHER_PARAMETERS[bad],
        )
    sigma = np.sqrt(variances)
    return CrlbReport(
        z=float(z),
        photons=float(photons),
        background=float(background),
        sigma_x=float(sigma[0]),
        sigma_y=float(sigma[1]),
        sigma_z=float(sigma[2]),
        sigma_n=float(sigma[3]),
        sigma_background=float(sigma[4]) if estimate_background else None,
    )


def crlb_sweep(
    pupil: PupilGrid,
    mask: PhaseMask,
    zs: Sequence[float],
    photons: float,
    background: float,
    shape: Optional[Tuple[int, int]] = None,
) -> List[Tuple[float, Optional[CrlbReport]]]:
    """Bounds along z; degenerate samples yield None and a warning."""
    results: List[Tuple[float, Optional[CrlbReport]]] = []
    for z in zs:
        try:
            results.append((float(z), crlb(pupil, mask, z, photons, background, shape)))
        except NumericalError as e:
            logger.warning(f"CRLB at z={z:.1f} nm is degenerate ({e.parameter}): {e}")
            results.append((float(z), None))
    return results
