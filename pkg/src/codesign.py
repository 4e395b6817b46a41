"""End-to-end mask/decoder co-design and Fisher-information mask design.

Training renders frames through the current mask, decodes them to a
vacancy grid and chains the loss gradient back through the decoder into
the optics adjoint. Poisson sampling is treated as a constant: gradients
flow through the expected image.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from src.decoder import (
    DecoderParams,
    decoder_backward,
    decoder_forward,
    init_decoder,
    loss_eval,
    normalize_frame,
)
from src.errors import ConfigurationError, NumericalError
from src.grid3d import (
    DEFAULT_VOXEL_Z,
    Grid3D,
    GridSpec,
    LocalizationList,
    extract_peaks,
    positions_to_grid,
)
from src.metrics import EvaluationRow, crlb, evaluate
from src.optics import (
    Emitter,
    Frame,
    OpticalConfig,
    PhaseMask,
    PupilGrid,
    apply_noise,
    build_pupil,
    mask_gradient,
    render_noiseless,
)
from src.optim import Adam
from src.state.train_state import MASK_GROUP, TrainState
from src.storage import canonical_json, save_mask
from src.training_log import TrainingLog
from src.workers import run_frames
from src.zernike import zernike_mask

logger = logging.getLogger(__name__)

MaskInit = str  # "flat" | "smooth" | "zernike"


@dataclass
class TrainConfig:
    """Training hyper-parameters; FOV is (H, W) camera pixels."""

    batch_size: int = 4
    emitters_per_frame: Tuple[int, int] = (1, 5)
    photon_range: Tuple[float, float] = (2000.0, 30000.0)
    background: float = 20.0
    lr_mask: float = 0.01
    lr_decoder: float = 1e-3
    steps: int = 2000
    axial_range: float = 1000.0
    fov: Tuple[int, int] = (16, 16)
    voxel_z: float = DEFAULT_VOXEL_Z
    dilation_sigma: float = 1.0
    loss_weights: Tuple[float, float] = (1.0, 0.0)
    checkpoint_every: int = 500
    mask_init: MaskInit = "smooth"
    mask_init_sigma: float = 3.0
    mask_init_amplitude: float = 0.3
    zernike_init: Tuple[Tuple[int, float], ...] = ()
    decoder_channels: int = 32
    dilations: Tuple[int, ...] = (1, 2, 4, 8)
    float32: bool = False
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.emitters_per_frame = (int(self.emitters_per_frame[0]), int(self.emitters_per_frame[1]))
        self.photon_range = (float(self.photon_range[0]), float(self.photon_range[1]))
        self.fov = (int(self.fov[0]), int(self.fov[1]))
        self.loss_weights = (float(self.loss_weights[0]), float(self.loss_weights[1]))
        self.zernike_init = tuple((int(i), float(c)) for i, c in self.zernike_init)
        self.dilations = tuple(int(d) for d in self.dilations)

        low, high = self.emitters_per_frame
        if low < 0 or high < max(low, 1):
            raise ConfigurationError(f"invalid emitters_per_frame range {self.emitters_per_frame}")
        if not 0 < self.photon_range[0] <= self.photon_range[1]:
            raise ConfigurationError(f"invalid photon_range {self.photon_range}")
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 1:
            raise ConfigurationError("batch_size and checkpoint_every must be positive")
        if self.lr_mask < 0 or self.lr_decoder < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.background < 0 or self.axial_range <= 0 or min(self.fov) < 1:
            raise ConfigurationError("background, axial_range and fov must be positive")
        if self.mask_init not in ("flat", "smooth", "zernike"):
            raise ConfigurationError(f"unknown mask_init {self.mask_init!r}")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    @property
    def dtype(self) -> Any:
        return np.float32 if self.float32 else np.float64

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["zernike_init"] = [list(pair) for pair in self.zernike_init]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        for key in ("emitters_per_frame", "photon_range", "fov", "loss_weights", "dilations"):
            if key in known:
                known[key] = tuple(known[key])
        if "zernike_init" in known:
            known["zernike_init"] = tuple(tuple(pair) for pair in known["zernike_init"])
        return cls(**known)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(canonical_json(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, TypeError) as e:
            raise ConfigurationError(f"invalid training config {path}: {e}") from e


@dataclass
class Batch:
    emitters: List[List[Emitter]]
    frames: List[Frame]
    targets: List[Grid3D]


def grid_spec_for(cfg: TrainConfig, optics: OpticalConfig) -> GridSpec:
    return GridSpec.for_frame(
        optics, cfg.fov[0], cfg.fov[1], axial_range=cfg.axial_range, voxel_z=cfg.voxel_z
    )


def _check_extents(cfg: TrainConfig, optics: OpticalConfig) -> None:
    if cfg.axial_range > optics.axial_range:
        raise ConfigurationError(
            f"training axial range {cfg.axial_range} nm exceeds optics range {optics.axial_range} nm"
        )


def sample_batch(
    cfg: TrainConfig,
    seed: int,
    pupil: PupilGrid,
    mask: PhaseMask,
    spec: Optional[GridSpec] = None,
    stream: int = 0,
) -> Batch:
    """Random emitters, their noisy frames and dilated target grids.

    Positions are continuous and uniform over the FOV and the part of the
    axial range the grid covers; photons are log-uniform. Emitters that
    would share a voxel are redrawn.
    """
    optics = pupil.config
    spec = spec if spec is not None else grid_spec_for(cfg, optics)
    rng = np.random.default_rng([seed, stream])
    height, width = cfg.fov
    extent_x = width * optics.camera_pixel
    extent_y = height * optics.camera_pixel
    grid_lo, grid_hi = spec.z_extent
    z_lo = max(-cfg.axial_range / 2.0, grid_lo)
    z_hi = min(cfg.axial_range / 2.0, grid_hi)
    log_lo, log_hi = np.log(cfg.photon_range[0]), np.log(cfg.photon_range[1])

    batch = Batch([], [], [])
    for _ in range(cfg.batch_size):
        count = int(rng.integers(cfg.emitters_per_frame[0], cfg.emitters_per_frame[1] + 1))
        occupied = set()
        emitters: List[Emitter] = []
        while len(emitters) < count:
            x = float(rng.uniform(0.0, extent_x))
            y = float(rng.uniform(0.0, extent_y))
            z = float(rng.uniform(z_lo, z_hi))
            voxel = spec.voxel_of(x, y, z)
            if voxel is None or voxel in occupied:
                continue
            occupied.add(voxel)
            photons = float(np.exp(rng.uniform(log_lo, log_hi)))
            emitters.append(Emitter(x, y, z, photons))
        expected = render_noiseless(pupil, mask, emitters, height, width)
        noisy = apply_noise(expected, cfg.background, int(rng.integers(2**63 - 1)))
        batch.emitters.append(emitters)
        batch.frames.append(noisy)
        batch.targets.append(positions_to_grid(emitters, spec, cfg.dilation_sigma))
    return batch


def initial_mask(cfg: TrainConfig, pupil: PupilGrid) -> PhaseMask:
    """Flat, smooth-random (Gaussian-filtered noise) or Zernike start."""
    if cfg.mask_init == "flat":
        return PhaseMask.flat(pupil)
    if cfg.mask_init == "zernike":
        return zernike_mask(list(cfg.zernike_init), pupil.config, pupil)
    rng = np.random.default_rng([cfg.seed, 7])
    noise = ndimage.gaussian_filter(rng.normal(size=pupil.aperture.shape), cfg.mask_init_sigma)
    inside = noise[pupil.aperture]
    scale = cfg.mask_init_amplitude / max(float(inside.std()), 1e-12)
    phase = np.where(pupil.aperture, (noise - inside.mean()) * scale, 0.0)
    return PhaseMask(phase, pupil.aperture.copy())


def calibrate_normalization(
    cfg: TrainConfig, pupil: PupilGrid, mask: PhaseMask, spec: GridSpec
) -> Tuple[float, float]:
    """Frame mean and std of a held-aside calibration batch."""
    batch = sample_batch(cfg, cfg.seed, pupil, mask, spec, stream=0)
    pixels = np.concatenate([f.pixels.ravel() for f in batch.frames])
    std = float(pixels.std())
    return float(pixels.mean()), std if std > 0 else 1.0


@dataclass
class _FrameResult:
    loss: float
    decoder_grads: Dict[str, NDArray[Any]]
    mask_grad: NDArray[np.float64]


def _frame_gradients(
    state: TrainState,
    pupil: PupilGrid,
    spec: GridSpec,
    weights: Tuple[float, float],
    with_mask: bool,
    item: Tuple[List[Emitter], Frame, Grid3D],
) -> _FrameResult:
    emitters, frame, target = item
    decoder = state.decoder
    prediction, cache = decoder_forward(decoder, normalize_frame(decoder, frame.pixels), spec)
    loss, grad_prediction = loss_eval(prediction, target, weights)
    grads, grad_input = decoder_backward(decoder, cache, grad_prediction)
    if with_mask:
        upstream = np.asarray(grad_input, dtype=np.float64) / decoder.normalization[1]
        grad_mask = mask_gradient(pupil, state.mask, emitters, upstream)
    else:
        grad_mask = np.zeros(state.mask.phase.shape)
    return _FrameResult(loss, grads, grad_mask)


def _abort(state: TrainState, message: str, dump_dir: Optional[Path]) -> None:
    diagnostics = state.diagnostics()
    logger.error(f"{message}; state: {json.dumps(diagnostics)}")
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        (dump_dir / "diagnostics.json").write_text(canonical_json(diagnostics), encoding="utf-8")
    raise NumericalError(message)


def train_step(
    state: TrainState,
    batch: Batch,
    cfg: TrainConfig,
    pupil: PupilGrid,
    spec: Optional[GridSpec] = None,
    dump_dir: Optional[Path] = None,
) -> Tuple[TrainState, float]:
    """One Adam update of decoder and mask; returns the pre-update batch loss."""
    state.check_congruent()
    spec = spec if spec is not None else grid_spec_for(cfg, pupil.config)
    with_mask = cfg.lr_mask > 0
    items = list(zip(batch.emitters, batch.frames, batch.targets))
    results = run_frames(
        lambda item: _frame_gradients(state, pupil, spec, cfg.loss_weights, with_mask, item),
        items,
        cfg.threads,
    )

    # fixed reduction order: frames are summed in batch order
    count = len(results)
    loss = float(sum(r.loss for r in results)) / count
    decoder_grads = {name: g.copy() for name, g in results[0].decoder_grads.items()}
    grad_mask = results[0].mask_grad.copy()
    for result in results[1:]:
        for name, g in result.decoder_grads.items():
            decoder_grads[name] += g
        grad_mask += result.mask_grad
    for name in decoder_grads:
        decoder_grads[name] /= count
    grad_mask /= count

    if not np.isfinite(loss):
        _abort(state, f"non-finite loss {loss} at step {state.step}", dump_dir)
    bad = [name for name, g in decoder_grads.items() if not np.all(np.isfinite(g))]
    if bad or not np.all(np.isfinite(grad_mask)):
        _abort(state, f"non-finite gradients at step {state.step}: {bad or [MASK_GROUP]}", dump_dir)

    state.step += 1
    optimizer = Adam()
    optimizer.step(
        state.decoder_parameters(),
        decoder_grads,
        state.first,
        state.second,
        state.step,
        cfg.lr_decoder,
    )
    optimizer.step(
        {MASK_GROUP: state.mask.phase},
        {MASK_GROUP: grad_mask},
        state.first,
        state.second,
        state.step,
        cfg.lr_mask,
        support={MASK_GROUP: state.mask.aperture},
    )
    if cfg.lr_decoder > 0:
        state.decoder.version += 1
    state.record_loss(loss)
    logger.debug(f"step {state.step}: loss={loss:.6g}")
    return state, loss


def new_state(
    cfg: TrainConfig,
    optics: OpticalConfig,
    init_mask: Optional[PhaseMask] = None,
) -> Tuple[TrainState, PupilGrid, GridSpec]:
    """Fresh training state with calibrated input normalization."""
    _check_extents(cfg, optics)
    pupil = build_pupil(optics)
    spec = grid_spec_for(cfg, optics)
    mask = init_mask.copy() if init_mask is not None else initial_mask(cfg, pupil)
    if mask.phase.shape != pupil.aperture.shape:
        raise ConfigurationError(
            f"initial mask {mask.phase.shape} does not match pupil {pupil.aperture.shape}"
        )
    decoder = init_decoder(
        depth=spec.dims[0],
        channels=cfg.decoder_channels,
        dilations=cfg.dilations,
        upsample_factor=optics.upsample_factor,
        seed=cfg.seed,
        dtype=cfg.dtype,
        voxel_z=spec.voxel_z,
    )
    decoder.normalization = calibrate_normalization(cfg, pupil, mask, spec)
    return TrainState.initial(mask, decoder, seed=cfg.seed), pupil, spec


def learn_psf(
    cfg: TrainConfig,
    optics: OpticalConfig,
    run_dir: Optional[Union[str, Path]] = None,
    init_mask: Optional[PhaseMask] = None,
    resume: Optional[TrainState] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> Tuple[PhaseMask, DecoderParams, List[float]]:
    """Full training loop with a fresh batch per step.

    With ``run_dir`` set, checkpoints go to ``run_dir/<step>/`` every
    ``checkpoint_every`` steps, the loss log to ``training_log.csv`` and
    the final mask to ``mask.bin``.
    """
    if resume is not None:
        _check_extents(cfg, optics)
        state, pupil, spec = resume, build_pupil(optics), grid_spec_for(cfg, optics)
    else:
        state, pupil, spec = new_state(cfg, optics, init_mask)

    root = Path(run_dir) if run_dir is not None else None
    log: Optional[TrainingLog] = None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        cfg.save(root / "train_config.json")
        log = TrainingLog(root / "training_log.csv")
        log.start()

    logger.info(
        f"Training {cfg.steps} steps: batch={cfg.batch_size}, grid={spec.dims}, "
        f"lr_mask={cfg.lr_mask}, lr_decoder={cfg.lr_decoder}, seed={cfg.seed}"
    )
    try:
        while state.step < cfg.steps:
            started = time.perf_counter()
            batch = sample_batch(cfg, cfg.seed, pupil, state.mask, spec, stream=state.step + 1)
            state, loss = train_step(state, batch, cfg, pupil, spec, dump_dir=root)
            wall_ms = (time.perf_counter() - started) * 1000.0
            if log is not None:
                log.write_entry(state.step, loss, wall_ms)
            if on_step is not None:
                on_step(state.step, loss)
            if root is not None and state.step % cfg.checkpoint_every == 0:
                state.save(root, optics)
    finally:
        if log is not None:
            log.close()

    if root is not None:
        if state.step % cfg.checkpoint_every != 0:
            state.save(root, optics)
        save_mask(root / "mask.bin", state.mask, optics)
    if state.history:
        logger.info(f"Training done: loss {state.history[0]:.4g} -> {state.history[-1]:.4g}")
    return state.mask, state.decoder, state.history


def decoder_localize(
    decoder: DecoderParams,
    frame: Frame,
    spec: GridSpec,
    threshold: float = 0.5,
    radius: int = 2,
    frame_index: int = 0,
) -> LocalizationList:
    """Decode one frame and pick grid peaks; ``photons`` holds the peak value."""
    prediction, _ = decoder_forward(decoder, normalize_frame(decoder, frame.pixels), spec)
    return extract_peaks(prediction, threshold, radius, frame=frame_index)


def evaluate_decoder(
    decoder: DecoderParams,
    frames: Sequence[Frame],
    ground_truth: LocalizationList,
    spec: GridSpec,
    threshold: float = 0.5,
    radius: int = 2,
    match_threshold: float = 150.0,
    threads: int = 1,
) -> EvaluationRow:
    """Peak-pick every frame and score against ground truth."""
    found = run_frames(
        lambda item: decoder_localize(decoder, item[1], spec, threshold, radius, item[0]),
        list(enumerate(frames)),
        threads,
    )
    return evaluate(ground_truth, LocalizationList.concatenate(found), match_threshold)


@dataclass
class CrlbDesign:
    mask: PhaseMask
    coefficients: List[Tuple[int, float]]
    objective: float
    initial_objective: float
    history: List[float] = field(default_factory=list)


def crlb_objective(
    pupil: PupilGrid,
    mask: PhaseMask,
    zs: Sequence[float],
    photons: float,
    background: float,
    shape: Optional[Tuple[int, int]] = None,
) -> float:
    """Σ_z trace of the x, y, z variance bounds; singular z-samples are dropped."""
    total = 0.0
    kept = 0
    for z in zs:
        try:
            total += crlb(pupil, mask, z, photons, background, shape).trace_xyz
            kept += 1
        except NumericalError as e:
            logger.warning(f"Dropping z={z:.1f} nm from the CRLB objective: {e}")
    return total if kept else float("inf")


def design_mask_crlb(
    basis_size: int,
    zs: Sequence[float],
    photons: float,
    background: float,
    cfg: OpticalConfig,
    iterations: int = 30,
    learning_rate: float = 0.5,
    seed: int = 0,
    init: Optional[Sequence[Tuple[int, float]]] = None,
    fd_step: float = 1e-2,
    first_index: int = 5,
    shape: Optional[Tuple[int, int]] = None,
) -> CrlbDesign:
    """Descend Σ trace(CRLB_xyz) over Zernike coefficients.

    Gradients are central differences over the coefficients; steps are
    normalized and halved whenever they fail to improve. The best mask
    seen is returned.
    """
    if len(zs) < 3:
        raise ConfigurationError("CRLB design needs at least 3 z samples")
    if basis_size < 1 or iterations < 0:
        raise ConfigurationError("basis_size must be >= 1 and iterations >= 0")
    pupil = build_pupil(cfg)
    indices = list(range(first_index, first_index + basis_size))
    coefficients = np.zeros(basis_size)
    if init is not None:
        for index, value in init:
            if index in indices:
                coefficients[indices.index(index)] = value
    else:
        coefficients = np.random.default_rng(seed).normal(0.0, 0.1, basis_size)

    def objective(c: NDArray[np.float64]) -> float:
        mask = zernike_mask(list(zip(indices, c.tolist())), cfg, pupil)
        return crlb_objective(pupil, mask, zs, photons, background, shape)

    best = coefficients.copy()
    best_value = initial = objective(best)
    history = [best_value]
    step = learning_rate
    for iteration in range(iterations):
        gradient = np.zeros(basis_size)
        for k in range(basis_size):
            offset = np.zeros(basis_size)
            offset[k] = fd_step
            gradient[k] = (objective(best + offset) - objective(best - offset)) / (2 * fd_step)
        norm = float(np.linalg.norm(gradient))
        if not np.isfinite(norm) or norm == 0:
            logger.info(f"CRLB design stopped at iteration {iteration}: flat gradient")
            break
        candidate = best - step * gradient / norm
        value = objective(candidate)
        if value < best_value:
            best, best_value = candidate, value
        else:
            step *= 0.5
        history.append(best_value)
        logger.debug(f"CRLB design iteration {iteration}: objective={best_value:.6g}, step={step:.3g}")

    mask = zernike_mask(list(zip(indices, best.tolist())), cfg, pupil)
    return CrlbDesign(
        mask=mask,
        coefficients=list(zip(indices, best.tolist())),
        objective=best_value,
        initial_objective=initial,
        history=history,
    )


def optimize_mask_crlb(
    basis_size: int,
    zs: Sequence[float],
    photons: float,
    background: float,
    cfg: OpticalConfig,
    **options: Any,
) -> PhaseMask:
    return design_mask_crlb(basis_size, zs, photons, background, cfg, **options).mask


@dataclass
class GradcheckEntry:
    audit: str
    index: Tuple[Any, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0 else abs(self.analytic - self.numeric) / scale


@dataclass
class GradcheckReport:
    entries: List[GradcheckEntry] = field(default_factory=list)

    def max_error(self, audit: Optional[str] = None) -> float:
        errors = [e.rel_error for e in self.entries if audit is None or e.audit == audit]
        return max(errors) if errors else 0.0

    def audits(self) -> List[str]:
        return sorted({e.audit for e in self.entries})


def _significant(
    gradient: NDArray[np.float64], rng: np.random.Generator, count: int, support: Optional[NDArray[np.bool_]] = None
) -> List[Tuple[int, ...]]:
    """Random indices whose gradient is at least 1% of the largest."""
    magnitude = np.abs(gradient)
    eligible = magnitude >= 1e-2 * magnitude.max() if magnitude.max() > 0 else np.ones_like(magnitude, bool)
    if support is not None:
        eligible &= support
    flat = np.flatnonzero(eligible)
    chosen = rng.choice(flat, size=min(count, flat.size), replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, gradient.shape)) for i in np.sort(chosen)]


def gradcheck(
    optics: Optional[OpticalConfig] = None,
    seed: int = 0,
    samples: int = 10,
    mask_step: float = 1e-4,
    param_step: float = 1e-5,
) -> GradcheckReport:
    """Finite-difference audit of the optics adjoint, the decoder and the full chain.

    The toy pipeline is 64-bit and noiseless so the loss is a smooth
    function of every parameter.
    """
    optics = optics if optics is not None else OpticalConfig(pupil_samples=16, axial_range=1000.0)
    rng = np.random.default_rng(seed)
    pupil = build_pupil(optics)
    height = width = 8
    spec = GridSpec.for_frame(optics, height, width, axial_range=500.0)
    pixel = optics.camera_pixel
    emitters = [
        Emitter(
            float(rng.uniform(2, 6) * pixel),
            float(rng.uniform(2, 6) * pixel),
            float(rng.uniform(-200, 200)),
            2000.0,
        )
        for _ in range(2)
    ]
    noise = ndimage.gaussian_filter(rng.normal(size=pupil.aperture.shape), 2.0)
    mask = PhaseMask(np.where(pupil.aperture, noise / noise.std(), 0.0), pupil.aperture.copy())
    background = 10.0
    decoder = init_decoder(depth=spec.dims[0], channels=4, dilations=(1, 2), seed=seed, voxel_z=spec.voxel_z)
    for layer in decoder.layers:
        layer.bias[:] = rng.normal(0.0, 0.1, layer.bias.shape)
    target = positions_to_grid(emitters, spec, dilation_sigma=1.0)
    weights = (1.0, 0.1)

    def frame_of(m: PhaseMask) -> NDArray[np.float64]:
        return render_noiseless(pupil, m, emitters, height, width).pixels + background

    base = frame_of(mask)
    decoder.normalization = (float(base.mean()), float(base.std()))
    report = GradcheckReport()

    # optics adjoint against a random linear functional of the frame
    upstream = rng.normal(size=(height, width))
    analytic = mask_gradient(pupil, mask, emitters, upstream)
    for index in _significant(analytic, rng, samples, pupil.aperture):
        numeric = _mask_difference(mask, index, mask_step, lambda m: float(np.sum(upstream * frame_of(m))))
        report.entries.append(GradcheckEntry("mask_gradient", index, float(analytic[index]), numeric))

    def decoder_loss(params: DecoderParams, pixels: NDArray[np.float64]) -> float:
        prediction, _ = decoder_forward(params, normalize_frame(params, pixels), spec)
        return loss_eval(prediction, target, weights)[0]

    prediction, cache = decoder_forward(decoder, normalize_frame(decoder, base), spec)
    _, grad_prediction = loss_eval(prediction, target, weights)
    grads, grad_input = decoder_backward(decoder, cache, grad_prediction)
    arrays = decoder.named_arrays()
    for name, grad in grads.items():
        for index in _significant(grad, rng, max(samples // 4, 1)):
            array = arrays[name]
            original = float(array[index])
            array[index] = original + param_step
            plus = decoder_loss(decoder, base)
            array[index] = original - param_step
            minus = decoder_loss(decoder, base)
            array[index] = original
            numeric = (plus - minus) / (2 * param_step)
            report.entries.append(GradcheckEntry(f"decoder:{name}", index, float(grad[index]), numeric))

    grad_frame = grad_input / decoder.normalization[1]
    for index in _significant(grad_frame, rng, samples):
        bumped = base.copy()
        bumped[index] += param_step
        plus = decoder_loss(decoder, bumped)
        bumped[index] -= 2 * param_step
        minus = decoder_loss(decoder, bumped)
        report.entries.append(
            GradcheckEntry("decoder:input", index, float(grad_frame[index]), (plus - minus) / (2 * param_step))
        )

    chained = mask_gradient(pupil, mask, emitters, np.asarray(grad_frame))
    for index in _significant(chained, rng, samples, pupil.aperture):
        numeric = _mask_difference(mask, index, mask_step, lambda m: decoder_loss(decoder, frame_of(m)))
        report.entries.append(GradcheckEntry("end_to_end", index, float(chained[index]), numeric))

    for audit in report.audits():
        logger.info(f"gradcheck {audit}: max rel. error {report.max_error(audit):.3e}")
    return report


def _mask_difference(
    mask: PhaseMask, index: Tuple[int, ...], step: float, loss: Callable[[PhaseMask], float]
) -> float:
    plus = mask.copy()
    plus.phase[index] += step
    minus = mask.copy()
    minus.phase[index] -= step
    return (loss(plus) - loss(minus)) / (2 * step)
