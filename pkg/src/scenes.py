"""Synthetic emitter scenes and their rendered frame stacks."""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Literal, Optional, Set, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from src.errors import ConfigurationError, DataError
from src.grid3d import LocalizationList
from src.optics import Emitter, Frame, PhaseMask, PupilGrid, apply_noise, render_noiseless
from src.workers import run_frames

logger = logging.getLogger(__name__)

SceneKind = Literal["uniform", "ellipsoid", "nucleus", "density-sweep"]
PhotonDistribution = Literal["fixed", "log-uniform"]

MAX_ATTEMPTS_PER_EMITTER = 1000


@dataclass(frozen=True)
class SceneSpec:
    """Scene geometry: FOV in µm, axial range and separations in nm."""

    kind: SceneKind = "uniform"
    fov_um: Tuple[float, float] = (13.0, 13.0)
    axial_range: float = 4000.0
    count: Optional[int] = None
    density: Optional[float] = None
    photon_distribution: PhotonDistribution = "fixed"
    photons: Tuple[float, float] = (30000.0, 30000.0)
    background: float = 150.0
    min_separation: float = 0.0
    seed: int = 0
    frames: int = 1
    semi_axes: Tuple[float, float, float] = (3000.0, 2000.0, 1000.0)
    nucleus_diameter_um: float = 20.0
    collision_voxel: Tuple[float, float, float] = (27.5, 27.5, 33.0)
    sweep: Tuple[int, int, int] = (1, 75, 10)

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "ellipsoid", "nucleus", "density-sweep"):
            raise ConfigurationError(f"unknown scene kind {self.kind!r}")
        if min(self.fov_um) <= 0 or self.axial_range <= 0:
            raise ConfigurationError("fov and axial range must be positive")
        if self.min_separation < 0:
            raise ConfigurationError("min_separation must be non-negative")
        if not 0 < self.photons[0] <= self.photons[1]:
            raise ConfigurationError(f"invalid photon range {self.photons}")
        if self.background < 0 or self.frames < 1:
            raise ConfigurationError("background must be >= 0 and frames >= 1")
        if self.count is not None and self.count < 0:
            raise ConfigurationError("count must be non-negative")
        if self.density is not None and self.density < 0:
            raise ConfigurationError("density must be non-negative")
        if self.count is not None and self.density is not None:
            implied = self.density * self.area_um2
            if abs(implied - self.count) > 0.5:
                raise ConfigurationError(
                    f"count {self.count} disagrees with density {self.density}/µm² "
                    f"over {self.area_um2:.1f} µm² ({implied:.1f})"
                )

    @property
    def area_um2(self) -> float:
        return self.fov_um[0] * self.fov_um[1]

    @property
    def resolved_count(self) -> int:
        if self.count is not None:
            return self.count
        if self.density is not None:
            return int(round(self.density * self.area_um2))
        return 62 if self.kind == "nucleus" else 1

    def frame_shape(self, camera_pixel: float) -> Tuple[int, int]:
        """(H, W) camera pixels covering the FOV."""
        return (
            int(np.ceil(self.fov_um[1] * 1000.0 / camera_pixel - 1e-9)),
            int(np.ceil(self.fov_um[0] * 1000.0 / camera_pixel - 1e-9)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        for key in ("fov_um", "photons", "semi_axes", "collision_voxel", "sweep"):
            if key in known and known[key] is not None:
                known[key] = tuple(known[key])
        return cls(**known)

    @classmethod
    def nucleus(cls, seed: int = 0, **overrides: Any) -> "SceneSpec":
        """Telomere-like defaults: 62 emitters in a 20 µm disc, 3 µm deep, 400 nm apart."""
        settings: Dict[str, Any] = {
            "kind": "nucleus",
            "fov_um": (22.0, 22.0),
            "axial_range": 3000.0,
            "count": 62,
            "photon_distribution": "log-uniform",
            "photons": (10000.0, 30000.0),
            "min_separation": 400.0,
            "seed": seed,
        }
        settings.update(overrides)
        return cls(**settings)


def density_sweep_counts(low: int = 1, high: int = 75, levels: int = 10) -> List[int]:
    """Log-spaced, strictly increasing per-FOV emitter counts."""
    if low < 1 or high < low or levels < 1:
        raise ConfigurationError(f"invalid sweep ({low}, {high}, {levels})")
    if levels == 1:
        return [low]
    raw = np.rint(np.exp(np.linspace(np.log(low), np.log(high), levels))).astype(int)
    counts: List[int] = []
    for value in raw:
        counts.append(max(int(value), counts[-1] + 1) if counts else int(value))
    if counts[-1] > high:
        raise ConfigurationError(f"cannot fit {levels} distinct counts in [{low}, {high}]")
    return counts


def _rng(spec: SceneSpec, frame: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, frame])


def _photons(spec: SceneSpec, rng: np.random.Generator) -> float:
    low, high = spec.photons
    if spec.photon_distribution == "fixed" or low == high:
        return float(low)
    return float(np.exp(rng.uniform(np.log(low), np.log(high))))


class _Placer:
    """Accepts candidate points under the separation and voxel-collision rules."""

    def __init__(self, spec: SceneSpec) -> None:
        self.spec = spec
        self.points: List[Tuple[float, float, float]] = []
        self.voxels: Set[Tuple[int, int, int]] = set()

    def _voxel(self, x: float, y: float, z: float) -> Tuple[int, int, int]:
        vx, vy, vz = self.spec.collision_voxel
        return int(np.floor(x / vx)), int(np.floor(y / vy)), int(np.floor(z / vz))

    def try_add(self, x: float, y: float, z: float) -> bool:
        voxel = self._voxel(x, y, z)
        if voxel in self.voxels:
            return False
        if self.spec.min_separation > 0 and self.points:
            nearest = cdist([[x, y, z]], self.points).min()
            if nearest < self.spec.min_separation:
                return False
        self.points.append((x, y, z))
        self.voxels.add(voxel)
        return True


def _place(
    spec: SceneSpec, count: int, rng: np.random.Generator, draw: Any
) -> List[Tuple[float, float, float]]:
    placer = _Placer(spec)
    attempts = 0
    limit = MAX_ATTEMPTS_PER_EMITTER * max(count, 1)
    while len(placer.points) < count:
        if attempts >= limit:
            raise ConfigurationError(
                f"could only place {len(placer.points)} of {count} emitters with "
                f"min separation {spec.min_separation} nm after {attempts} attempts"
            )
        attempts += 1
        placer.try_add(*draw(rng))
    return placer.points


def _finish(spec: SceneSpec, points: List[Tuple[float, float, float]], rng: np.random.Generator) -> List[Emitter]:
    emitters = [Emitter(x, y, z, _photons(spec, rng)) for x, y, z in points]
    check_scene(spec, emitters)
    return emitters


def gen_uniform(spec: SceneSpec, frame: int = 0, count: Optional[int] = None) -> List[Emitter]:
    """Emitters uniform over FOV × axial range, rejection-sampled under min separation."""
    rng = _rng(spec, frame)
    width_nm, height_nm = spec.fov_um[0] * 1000.0, spec.fov_um[1] * 1000.0
    half = spec.axial_range / 2.0

    def draw(r: np.random.Generator) -> Tuple[float, float, float]:
        return float(r.uniform(0, width_nm)), float(r.uniform(0, height_nm)), float(r.uniform(-half, half))

    n = spec.resolved_count if count is None else count
    return _finish(spec, _place(spec, n, rng, draw), rng)


def gen_ellipsoid(
    semi_axes: Tuple[float, float, float],
    count: int,
    spec: SceneSpec,
    centre: Optional[Tuple[float, float, float]] = None,
    frame: int = 0,
) -> List[Emitter]:
    """Area-uniform points on an ellipsoid surface.

    A normalized Gaussian direction u is stretched onto the surface and kept
    with probability min(a,b,c)·sqrt(ux²/a² + uy²/b² + uz²/c²), which
    cancels the stretching of the area element.
    """
    a, b, c = semi_axes
    if min(semi_axes) <= 0:
        raise ConfigurationError(f"semi-axes must be positive, got {semi_axes}")
    width_nm, height_nm = spec.fov_um[0] * 1000.0, spec.fov_um[1] * 1000.0
    cx, cy, cz = centre if centre is not None else (width_nm / 2.0, height_nm / 2.0, 0.0)
    half = spec.axial_range / 2.0
    if cx - a < 0 or cx + a >= width_nm or cy - b < 0 or cy + b >= height_nm or abs(cz) + c > half:
        raise ConfigurationError(f"ellipsoid {semi_axes} around {(cx, cy, cz)} exceeds the scene extents")
    rng = _rng(spec, frame)
    shortest = min(semi_axes)

    def draw(r: np.random.Generator) -> Tuple[float, float, float]:
        while True:
            u = r.normal(size=3)
            u /= np.linalg.norm(u)
            accept = shortest * np.sqrt((u[0] / a) ** 2 + (u[1] / b) ** 2 + (u[2] / c) ** 2)
            if r.uniform() < accept:
                return float(cx + a * u[0]), float(cy + b * u[1]), float(cz + c * u[2])

    return _finish(spec, _place(spec, count, rng, draw), rng)


def gen_nucleus(spec: SceneSpec, frame: int = 0) -> List[Emitter]:
    """Emitters uniform in a disc of ``nucleus_diameter_um`` × the axial range."""
    width_nm, height_nm = spec.fov_um[0] * 1000.0, spec.fov_um[1] * 1000.0
    radius = spec.nucleus_diameter_um * 500.0
    if 2 * radius > min(width_nm, height_nm):
        raise ConfigurationError(
            f"nucleus diameter {spec.nucleus_diameter_um} µm does not fit in {spec.fov_um} µm FOV"
        )
    cx, cy = width_nm / 2.0, height_nm / 2.0
    half = spec.axial_range / 2.0
    rng = _rng(spec, frame)

    def draw(r: np.random.Generator) -> Tuple[float, float, float]:
        rho = radius * np.sqrt(r.uniform())
        theta = r.uniform(0, 2 * np.pi)
        return float(cx + rho * np.cos(theta)), float(cy + rho * np.sin(theta)), float(r.uniform(-half, half))

    return _finish(spec, _place(spec, spec.resolved_count, rng, draw), rng)


def check_scene(spec: SceneSpec, emitters: List[Emitter]) -> None:
    """Post-hoc invariants: inside the FOV and axial range, separation honoured."""
    width_nm, height_nm = spec.fov_um[0] * 1000.0, spec.fov_um[1] * 1000.0
    half = spec.axial_range / 2.0
    for index, e in enumerate(emitters):
        if not (0 <= e.x < width_nm and 0 <= e.y < height_nm and -half <= e.z <= half):
            raise DataError(f"scene emitter {index} at ({e.x:.1f}, {e.y:.1f}, {e.z:.1f}) nm is outside the scene")
        if not e.photons > 0:
            raise DataError(f"scene emitter {index} has non-positive photons")
    if spec.min_separation > 0 and len(emitters) > 1:
        points = np.array([[e.x, e.y, e.z] for e in emitters])
        distances = cdist(points, points)
        np.fill_diagonal(distances, np.inf)
        if distances.min() < spec.min_separation:
            raise DataError(f"scene violates min separation: {distances.min():.1f} nm")


def generate(spec: SceneSpec, frame: int = 0, count: Optional[int] = None) -> List[Emitter]:
    """Dispatch on ``spec.kind``; density sweeps draw uniform scenes with ``count``."""
    if spec.kind == "nucleus":
        return gen_nucleus(spec, frame)
    if spec.kind == "ellipsoid":
        return gen_ellipsoid(spec.semi_axes, spec.resolved_count if count is None else count, spec, frame=frame)
    return gen_uniform(spec, frame, count)


def simulate_frames(
    spec: SceneSpec,
    pupil: PupilGrid,
    mask: PhaseMask,
    count: Optional[int] = None,
    threads: int = 1,
) -> Tuple[List[Frame], LocalizationList]:
    """Render ``spec.frames`` independent noisy frames and their ground truth."""
    height, width = spec.frame_shape(pupil.config.camera_pixel)

    def render(frame: int) -> Tuple[Frame, List[Emitter]]:
        emitters = generate(spec, frame, count)
        expected = render_noiseless(pupil, mask, emitters, height, width)
        noise_seed = int(np.random.default_rng([spec.seed, frame, 1]).integers(2**63 - 1))
        noisy = apply_noise(expected, spec.background, noise_seed)
        noisy.metadata = {"index": frame, "emitters": len(emitters)}
        return noisy, emitters

    rendered = run_frames(render, list(range(spec.frames)), threads)
    truth = LocalizationList.concatenate(
        LocalizationList.from_emitters(emitters, frame=i) for i, (_, emitters) in enumerate(rendered)
    )
    logger.info(f"Simulated {spec.frames} frame(s) of {height}x{width} px, {len(truth)} emitters")
    return [frame for frame, _ in rendered], truth


def with_count(spec: SceneSpec, count: int) -> SceneSpec:
    """Copy of ``spec`` fixed to ``count`` emitters per FOV."""
    return replace(spec, count=count, density=None)
