import hashlib
import json
import os
from typing import Any, Dict, List, Literal, Optional, Tuple, TypedDict, cast

import yaml

from src.codesign import TrainConfig
from src.errors import ConfigurationError
from src.grid3d import DEFAULT_VOXEL_Z, GridSpec
from src.mp import MpConfig
from src.optics import OpticalConfig
from src.scenes import SceneSpec


class PathsConfig(TypedDict):
    logs: str
    runs: str
    datasets: str


class LoggingConfig(TypedDict):
    level: str
    file_logging_enabled: bool


class RunConfig(TypedDict):
    seed: int
    threads: int
    out: str


class OpticsConfig(TypedDict):
    numerical_aperture: float
    immersion_index: float
    emission_wavelength: float
    camera_pixel: float
    pupil_samples: int
    upsample_factor: int
    axial_range: float


class GridConfig(TypedDict):
    voxel_z: float


class DecoderConfig(TypedDict):
    checkpoint: Optional[str]
    peak_threshold: float
    peak_radius: int


class MpSection(TypedDict):
    max_emitters: int
    photon_threshold: float
    correlation_threshold: float
    max_iterations: int
    tolerance: float
    z_step: float


class EvaluationConfig(TypedDict):
    threshold: float
    lateral_only: bool
    min_photons: float


class RenderConfig(TypedDict):
    bin_nm: float
    shifts: int
    colormap: Optional[str]


class AppConfig(TypedDict, total=False):
    paths: PathsConfig
    logging: LoggingConfig
    run: RunConfig
    optics: OpticsConfig
    grid: GridConfig
    decoder: DecoderConfig
    training: Dict[str, Any]
    mp: MpSection
    evaluation: EvaluationConfig
    scene: Dict[str, Any]
    render: RenderConfig


PathName = Literal["logs", "runs", "datasets"]

DEFAULT_PATHS: PathsConfig = {"logs": "logs", "runs": "runs", "datasets": "datasets"}
DEFAULT_LOGGING: LoggingConfig = {"level": "INFO", "file_logging_enabled": False}
DEFAULT_RUN: RunConfig = {"seed": 0, "threads": 1, "out": "runs"}
DEFAULT_DECODER: DecoderConfig = {"checkpoint": None, "peak_threshold": 0.5, "peak_radius": 2}
DEFAULT_MP: MpSection = {
    "max_emitters": 100,
    "photon_threshold": 500.0,
    "correlation_threshold": 0.5,
    "max_iterations": 50,
    "tolerance": 0.1,
    "z_step": 100.0,
}
DEFAULT_EVALUATION: EvaluationConfig = {"threshold": 150.0, "lateral_only": False, "min_photons": 0.0}
DEFAULT_RENDER: RenderConfig = {"bin_nm": 20.0, "shifts": 4, "colormap": None}


def _env_int(name: str, fallback: int) -> int:
    value = os.getenv(name)
    if value is None or value == "":
        return fallback
    try:
        return int(value)
    except ValueError as e:
        raise ConfigurationError(f"{name} must be an integer, got {value!r}") from e


class Config:
    """Configuration manager for the pipeline.

    Values come from ``config.yaml``; run-level settings can be overridden
    through ``SMLM_*`` environment variables.
    """

    def __init__(self, config_file: str = "config.yaml") -> None:
        self.config_file = config_file
        self.config = self._load_config()
        self._create_directories()

    def _load_config(self) -> AppConfig:
        if not os.path.exists(self.config_file):
            raise FileNotFoundError(f"Config file not found: {self.config_file}")

        with open(self.config_file, "r", encoding="utf-8") as f:
            try:
                config_data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"cannot parse {self.config_file}: {e}") from e
        if not isinstance(config_data, dict):
            raise ConfigurationError(f"{self.config_file} must hold a mapping")
        return cast(AppConfig, config_data)

    def _create_directories(self) -> None:
        for path_name in ("logs", "runs", "datasets"):
            os.makedirs(self.get_path(cast(PathName, path_name)), exist_ok=True)

    def _section(self, name: str) -> Dict[str, Any]:
        section = cast(Dict[str, Any], self.config).get(name) or {}
        if not isinstance(section, dict):
            raise ConfigurationError(f"config section {name!r} must be a mapping")
        return cast(Dict[str, Any], section)

    def get_path(self, name: PathName) -> str:
        paths = {**DEFAULT_PATHS, **self._section("paths")}
        if name not in paths:
            raise KeyError(f"Path not found in config: {name}")
        return str(paths[name])

    def get_logging_settings(self) -> LoggingConfig:
        """Logging section; ``SMLM_LOG_LEVEL`` and ``SMLM_LOG_FILE`` take precedence."""
        settings = cast(LoggingConfig, {**DEFAULT_LOGGING, **self._section("logging")})
        level = os.getenv("SMLM_LOG_LEVEL")
        if level:
            settings["level"] = level
        if os.getenv("SMLM_LOG_FILE", "").lower() in ("1", "true", "yes"):
            settings["file_logging_enabled"] = True
        return settings

    def get_run_settings(self) -> RunConfig:
        """Seed, thread count and output root, with environment variables taking precedence."""
        settings = cast(RunConfig, {**DEFAULT_RUN, **self._section("run")})
        settings["seed"] = _env_int("SMLM_SEED", int(settings["seed"]))
        settings["threads"] = _env_int("SMLM_THREADS", int(settings["threads"]))
        settings["out"] = os.getenv("SMLM_OUT") or str(settings["out"])
        if settings["threads"] < 1:
            raise ConfigurationError("threads must be >= 1")
        return settings

    def get_optical_config(self) -> OpticalConfig:
        return OpticalConfig.from_dict(self._section("optics"))

    def get_mask_zernike(self) -> Tuple[Tuple[int, float], ...]:
        """Noll-indexed coefficients (radians) of the default simulation mask."""
        pairs = self._section("optics").get("mask_zernike") or []
        try:
            return tuple((int(index), float(value)) for index, value in pairs)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"optics.mask_zernike must hold [index, value] pairs: {e}") from e

    def get_voxel_z(self) -> float:
        return float(self._section("grid").get("voxel_z", DEFAULT_VOXEL_Z))

    def get_grid_spec(
        self, height: int, width: int, axial_range: Optional[float] = None
    ) -> GridSpec:
        """Grid matched to a ``height`` × ``width`` camera frame."""
        optics = self.get_optical_config()
        return GridSpec.for_frame(
            optics,
            height,
            width,
            axial_range=axial_range if axial_range is not None else optics.axial_range,
            voxel_z=self.get_voxel_z(),
        )

    def get_decoder_settings(self) -> DecoderConfig:
        return cast(DecoderConfig, {**DEFAULT_DECODER, **self._section("decoder")})

    def get_train_config(self) -> TrainConfig:
        data = dict(self._section("training"))
        run = self.get_run_settings()
        data["seed"] = run["seed"]
        data["threads"] = run["threads"]
        data.setdefault("voxel_z", self.get_voxel_z())
        try:
            return TrainConfig.from_dict(data)
        except TypeError as e:
            raise ConfigurationError(f"invalid training section: {e}") from e

    def get_mp_config(self) -> MpConfig:
        section = {**DEFAULT_MP, **self._section("mp")}
        section.pop("z_step", None)
        return MpConfig(**{k: v for k, v in section.items() if k in MpConfig.__dataclass_fields__})

    def get_mp_z_step(self) -> float:
        return float({**DEFAULT_MP, **self._section("mp")}["z_step"])

    def get_evaluation_settings(self) -> EvaluationConfig:
        return cast(EvaluationConfig, {**DEFAULT_EVALUATION, **self._section("evaluation")})

    def get_scene_spec(self) -> SceneSpec:
        """Scene section; the nucleus kind starts from its own defaults."""
        data = dict(self._section("scene"))
        data.setdefault("seed", self.get_run_settings()["seed"])
        if data.get("kind") == "nucleus":
            seed = int(data.pop("seed"))
            data.pop("kind")
            return SceneSpec.nucleus(seed, **_tuples(data))
        return SceneSpec.from_dict(data)

    def get_render_settings(self) -> RenderConfig:
        return cast(RenderConfig, {**DEFAULT_RENDER, **self._section("render")})

    def to_dict(self) -> Dict[str, Any]:
        return cast(Dict[str, Any], dict(self.config))

    def config_hash(self) -> str:
        """sha256 over the canonical JSON of the loaded mapping."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _tuples(data: Dict[str, Any]) -> Dict[str, Any]:
    converted: Dict[str, Any] = {}
    for key, value in data.items():
        converted[key] = tuple(value) if isinstance(value, list) else value
    return converted


def parse_pairs(values: List[str]) -> Tuple[Tuple[int, float], ...]:
    """``["5=0.8", "11=-0.2"]`` → ``((5, 0.8), (11, -0.2))``."""
    pairs: List[Tuple[int, float]] = []
    for value in values:
        try:
            index, coefficient = value.split("=", 1)
            pairs.append((int(index), float(coefficient)))
        except ValueError as e:
            raise ConfigurationError(f"expected NOLL=COEFF, got {value!r}") from e
    return tuple(pairs)
