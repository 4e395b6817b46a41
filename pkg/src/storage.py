"""Dataset persistence: CSV tables, raw little-endian arrays and manifests.

Every payload file ``<name>`` has a JSON sidecar ``<name>.meta.json``
recording the format version, byte count and sha256 of the payload, so a
truncated or altered file is refused instead of being read partially.
"""

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from src import __version__
from src.decoder import ConvLayer, DecoderParams
from src.errors import CheckpointMismatchError, CorruptFileError, DataError
from src.grid3d import DEFAULT_VOXEL_Z, LocalizationList
from src.metrics import CrlbReport, EvaluationRow
from src.optics import Emitter, Frame, OpticalConfig, PhaseMask, build_pupil

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

EMITTER_HEADER = ["x_nm", "y_nm", "z_nm", "photons"]
LOCALIZATION_HEADER = ["frame", "x_nm", "y_nm", "z_nm", "photons"]
REPORT_HEADER = ["density", "jaccard", "rmse_lat_nm", "rmse_ax_nm", "tp", "fp", "fn"]
CRLB_HEADER = ["z_nm", "sigma_x_nm", "sigma_y_nm", "sigma_z_nm", "sigma_n"]

PathLike = Union[str, Path]


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike) -> str:
    return sha256_bytes(Path(path).read_bytes())


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def canonical_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _write_payload(path: PathLike, payload: bytes, kind: str, meta: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    record = dict(meta)
    record.update(
        {
            "kind": kind,
            "format_version": FORMAT_VERSION,
            "bytes": len(payload),
            "sha256": sha256_bytes(payload),
        }
    )
    sidecar_path(path).write_text(canonical_json(record), encoding="utf-8")
    logger.debug(f"Wrote {kind} to {path} ({len(payload)} bytes)")


def _read_payload(path: PathLike, kind: str) -> Tuple[bytes, Dict[str, Any]]:
    path = Path(path)
    data = path.read_bytes()
    side = sidecar_path(path)
    if not side.exists():
        raise CorruptFileError(str(path), f"missing sidecar {side.name}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptFileError(str(side), f"unreadable sidecar: {e}") from e
    if meta.get("kind") != kind:
        raise CorruptFileError(str(path), f"expected a {kind} file, sidecar says {meta.get('kind')!r}")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CorruptFileError(
            str(path),
            f"format version {meta.get('format_version')!r} is not {FORMAT_VERSION}",
        )
    if len(data) != meta.get("bytes"):
        raise CorruptFileError(
            str(path), f"truncated: {len(data)} of {meta.get('bytes')} bytes present"
        )
    if sha256_bytes(data) != meta.get("sha256"):
        raise CorruptFileError(str(path), "sha256 checksum mismatch")
    return data, meta


def write_array(path: PathLike, array: NDArray[Any], dtype: str, kind: str, meta: Dict[str, Any]) -> None:
    """Write ``array`` row-major as raw bytes of ``dtype`` (e.g. '<f8')."""
    payload = np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes()
    record = dict(meta)
    record.update({"dtype": dtype, "shape": list(np.shape(array))})
    _write_payload(path, payload, kind, record)


def read_array(path: PathLike, kind: str) -> Tuple[NDArray[Any], Dict[str, Any]]:
    data, meta = _read_payload(path, kind)
    dtype = np.dtype(meta["dtype"])
    shape = tuple(int(s) for s in meta["shape"])
    if int(np.prod(shape)) * dtype.itemsize != len(data):
        raise CorruptFileError(str(path), f"payload does not hold an array of shape {shape}")
    array = np.frombuffer(data, dtype=dtype).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True), meta


def _write_csv(path: PathLike, header: List[str], rows: Sequence[Sequence[str]], kind: str) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _write_payload(path, buffer.getvalue().encode("utf-8"), kind, {"rows": len(rows)})


def _read_csv(path: PathLike, header: List[str], kind: str) -> List[List[str]]:
    data, meta = _read_payload(path, kind)
    reader = csv.reader(io.StringIO(data.decode("utf-8")))
    found = next(reader, None)
    if found != header:
        raise DataError(f"{path}: columns {found} do not match expected {header}")
    rows = [row for row in reader if row]
    if len(rows) != meta.get("rows"):
        raise CorruptFileError(str(path), f"{len(rows)} rows present, {meta.get('rows')} recorded")
    for row in rows:
        if len(row) != len(header):
            raise DataError(f"{path}: row {row} has {len(row)} of {len(header)} columns")
    return rows


def _fmt(value: float) -> str:
    return repr(float(value))


def save_emitters(path: PathLike, emitters: Sequence[Emitter]) -> None:
    rows = [[_fmt(e.x), _fmt(e.y), _fmt(e.z), _fmt(e.photons)] for e in emitters]
    _write_csv(path, EMITTER_HEADER, rows, "emitters")


def load_emitters(path: PathLike) -> List[Emitter]:
    rows = _read_csv(path, EMITTER_HEADER, "emitters")
    try:
        return [Emitter(float(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows]
    except ValueError as e:
        raise DataError(f"{path}: unparsable value: {e}") from e


def save_localizations(path: PathLike, locs: LocalizationList) -> None:
    rows = [
        [str(int(f)), _fmt(x), _fmt(y), _fmt(z), _fmt(p)]
        for f, x, y, z, p in zip(locs.frame, locs.x, locs.y, locs.z, locs.photons)
    ]
    _write_csv(path, LOCALIZATION_HEADER, rows, "localizations")


def load_localizations(path: PathLike) -> LocalizationList:
    rows = _read_csv(path, LOCALIZATION_HEADER, "localizations")
    if not rows:
        return LocalizationList()
    try:
        table = np.array([[float(v) for v in row] for row in rows])
    except ValueError as e:
        raise DataError(f"{path}: unparsable value: {e}") from e
    return LocalizationList(
        frame=table[:, 0].astype(np.int64),
        x=table[:, 1],
        y=table[:, 2],
        z=table[:, 3],
        photons=table[:, 4],
    )


def _optional(value: Optional[float]) -> str:
    return "" if value is None else _fmt(value)


def save_report(
    path: PathLike, rows: Sequence[EvaluationRow], summary: Dict[str, Any]
) -> Path:
    """Write the evaluation CSV and its JSON summary; returns the summary path."""
    table = [
        [
            _fmt(r.density),
            _fmt(r.jaccard),
            _optional(r.rmse_lateral),
            _optional(r.rmse_axial),
            str(r.tp),
            str(r.fp),
            str(r.fn),
        ]
        for r in rows
    ]
    _write_csv(path, REPORT_HEADER, table, "report")
    summary_path = Path(path).with_suffix(".json")
    summary_path.write_text(canonical_json(summary), encoding="utf-8")
    return summary_path


def load_report(path: PathLike) -> List[EvaluationRow]:
    def opt(value: str) -> Optional[float]:
        return None if value == "" else float(value)

    return [
        EvaluationRow(
            density=float(r[0]),
            jaccard=float(r[1]),
            rmse_lateral=opt(r[2]),
            rmse_axial=opt(r[3]),
            tp=int(r[4]),
            fp=int(r[5]),
            fn=int(r[6]),
        )
        for r in _read_csv(path, REPORT_HEADER, "report")
    ]


def save_crlb_sweep(path: PathLike, sweep: Sequence[Tuple[float, Optional[CrlbReport]]]) -> None:
    """One row per z; degenerate samples keep empty bound columns."""
    rows: List[List[str]] = []
    for z, report in sweep:
        if report is None:
            rows.append([_fmt(z), "", "", "", ""])
        else:
            rows.append(
                [_fmt(z), _fmt(report.sigma_x), _fmt(report.sigma_y), _fmt(report.sigma_z), _fmt(report.sigma_n)]
            )
    _write_csv(path, CRLB_HEADER, rows, "crlb")


def save_mask(path: PathLike, mask: PhaseMask, cfg: OpticalConfig) -> None:
    """Raw '<f8' N×N radians with the optical descriptor in the sidecar."""
    samples = mask.phase.shape[0]
    if samples != cfg.pupil_samples:
        raise DataError(f"mask is {samples}x{samples}, config expects {cfg.pupil_samples}")
    meta = {
        "N": samples,
        "numerical_aperture": cfg.numerical_aperture,
        "emission_wavelength": cfg.emission_wavelength,
        "immersion_index": cfg.immersion_index,
        "pixel_pitch": cfg.pitch,
        "optics": cfg.to_dict(),
    }
    write_array(path, mask.phase, "<f8", "mask", meta)


def load_mask(path: PathLike) -> Tuple[PhaseMask, OpticalConfig]:
    phase, meta = read_array(path, "mask")
    if phase.ndim != 2 or phase.shape[0] != phase.shape[1] or phase.shape[0] != meta.get("N"):
        raise CorruptFileError(str(path), f"mask shape {phase.shape} disagrees with N={meta.get('N')}")
    cfg = OpticalConfig.from_dict(meta.get("optics", {}))
    pupil = build_pupil(cfg)
    if pupil.aperture.shape != phase.shape:
        raise CorruptFileError(str(path), "mask size does not match its optical descriptor")
    return PhaseMask(phase.astype(np.float64), pupil.aperture.copy()), cfg


def save_frames(path: PathLike, frames: Sequence[Frame]) -> None:
    """Raw '<f4' frame stack (count × H × W) with sidecar descriptor."""
    if not frames:
        raise DataError("refusing to write an empty frame stack")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"frames have differing shapes: {sorted(shapes)}")
    height, width = frames[0].shape
    stack = np.stack([f.pixels for f in frames])
    meta = {
        "H": height,
        "W": width,
        "frame_count": len(frames),
        "pixel_nm": frames[0].pixel_pitch,
        "background": frames[0].background,
        "backgrounds": [f.background for f in frames],
    }
    write_array(path, stack, "<f4", "frames", meta)


def load_frames(path: PathLike) -> List[Frame]:
    stack, meta = read_array(path, "frames")
    if stack.shape != (meta["frame_count"], meta["H"], meta["W"]):
        raise CorruptFileError(str(path), f"stack shape {stack.shape} disagrees with descriptor")
    backgrounds = meta.get("backgrounds", [meta["background"]] * meta["frame_count"])
    return [
        Frame(
            pixels=stack[i].astype(np.float64),
            pixel_pitch=float(meta["pixel_nm"]),
            background=float(backgrounds[i]),
            metadata={"index": i},
        )
        for i in range(stack.shape[0])
    ]


def save_decoder(path: PathLike, params: DecoderParams, optics: Optional[OpticalConfig] = None) -> None:
    """Parameters as raw '<f4' in declaration order plus a JSON manifest."""
    flat = np.concatenate([a.ravel() for a in params.named_arrays().values()])
    meta = params.manifest()
    meta["arrays"] = [
        {"name": name, "shape": list(a.shape)} for name, a in params.named_arrays().items()
    ]
    if optics is not None:
        meta["optics"] = optics.to_dict()
    write_array(path, flat, "<f4", "decoder", meta)


def load_decoder(path: PathLike, optics: Optional[OpticalConfig] = None) -> DecoderParams:
    """Rebuild float32 decoder parameters; refuses a checkpoint for other optics."""
    flat, meta = read_array(path, "decoder")
    if optics is not None and "optics" in meta and meta["optics"] != optics.to_dict():
        raise CheckpointMismatchError(
            f"{path}: decoder was trained for optics {meta['optics']}, not {optics.to_dict()}"
        )
    layers: List[ConvLayer] = []
    offset = 0
    for index, spec in enumerate(meta["layers"]):
        arrays = []
        for suffix in ("weight", "bias"):
            entry = meta["arrays"][2 * index + (suffix == "bias")]
            size = int(np.prod(entry["shape"]))
            if offset + size > flat.size:
                raise CorruptFileError(str(path), f"payload too short for {entry['name']}")
            arrays.append(flat[offset : offset + size].reshape(entry["shape"]))
            offset += size
        layers.append(ConvLayer(arrays[0], arrays[1], int(spec["dilation"]), spec["activation"]))
    if offset != flat.size:
        raise CorruptFileError(str(path), f"{flat.size - offset} trailing values in payload")
    mean, std = meta["normalization"]
    return DecoderParams(
        layers=layers,
        upsample_after=int(meta["upsample_after"]),
        upsample_factor=int(meta["upsample_factor"]),
        leaky_slope=float(meta["leaky_slope"]),
        normalization=(float(mean), float(std)),
        seed=int(meta["seed"]),
        voxel_z=float(meta.get("voxel_z", DEFAULT_VOXEL_Z)),
    )


@dataclass
class RunManifest:
    """One per output directory: how its contents were produced."""

    command: str
    config_hash: str
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    wall_time: float = 0.0
    created: str = field(default_factory=lambda: datetime.now().isoformat())
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        """Hash of the output file hashes; wall time and dates are excluded."""
        return sha256_bytes(json.dumps(self.outputs, sort_keys=True).encode("utf-8"))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "content_hash": self.content_hash,
            "tool_version": self.tool_version,
            "wall_time": self.wall_time,
            "created": self.created,
            "details": self.details,
        }

    def record_outputs(self, directory: PathLike) -> None:
        """Hash every file under ``directory`` except manifests."""
        root = Path(directory)
        self.outputs = {
            str(p.relative_to(root)): sha256_file(p)
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != MANIFEST_NAME
        }

    def save(self, directory: PathLike) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, directory: PathLike) -> "RunManifest":
        path = Path(directory) / MANIFEST_NAME
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            return cls(
                command=data["command"],
                config_hash=data["config_hash"],
                seeds=data.get("seeds", {}),
                inputs=data.get("inputs", []),
                outputs=data.get("outputs", {}),
                tool_version=data.get("tool_version", __version__),
                wall_time=float(data.get("wall_time", 0.0)),
                created=data.get("created", ""),
                details=data.get("details", {}),
            )
        except (json.JSONDecodeError, KeyError) as e:
            raise CorruptFileError(str(path), f"unreadable manifest: {e}") from e


FRAMES_FILE = "frames.bin"
TRUTH_FILE = "ground_truth.csv"
MASK_FILE = "mask.bin"


@dataclass
class Dataset:
    path: Path
    frames: List[Frame]
    ground_truth: LocalizationList
    mask: PhaseMask
    optics: OpticalConfig
    manifest: RunManifest


def write_dataset(
    directory: PathLike,
    frames: Sequence[Frame],
    ground_truth: LocalizationList,
    mask: PhaseMask,
    optics: OpticalConfig,
    manifest: RunManifest,
) -> RunManifest:
    """Write frames, ground truth and mask, then the manifest over them."""
    root = Path(directory)
    save_frames(root / FRAMES_FILE, frames)
    save_localizations(root / TRUTH_FILE, ground_truth)
    save_mask(root / MASK_FILE, mask, optics)
    manifest.details.setdefault("optics", optics.to_dict())
    manifest.details["kind"] = "dataset"
    manifest.record_outputs(root)
    manifest.save(root)
    logger.info(f"Dataset written to {root} ({len(frames)} frames, {len(ground_truth)} emitters)")
    return manifest


class DatasetStore:
    """Lists, verifies and loads dataset directories below a root."""

    def __init__(self, root: PathLike) -> None:
        self.root = Path(root)
        self.cached: Dict[Path, Dataset] = {}
        self.logger = logging.getLogger(__name__)

    def list_datasets(self) -> List[Path]:
        found = []
        for manifest in sorted(self.root.rglob(MANIFEST_NAME)):
            try:
                if RunManifest.load(manifest.parent).details.get("kind") == "dataset":
                    found.append(manifest.parent)
            except CorruptFileError as e:
                self.logger.warning(f"Skipping {manifest.parent}: {e}")
        return found

    def verify(self, directory: PathLike) -> RunManifest:
        """Recompute content hashes against the manifest."""
        root = Path(directory)
        manifest = RunManifest.load(root)
        for name, digest in manifest.outputs.items():
            target = root / name
            if not target.exists():
                raise CorruptFileError(str(target), "listed in manifest but missing")
            if sha256_file(target) != digest:
                raise CorruptFileError(str(target), "content hash differs from manifest")
        return manifest

    def load(self, directory: PathLike) -> Dataset:
        root = Path(directory).resolve()
        if root in self.cached:
            return self.cached[root]
        manifest = self.verify(root)
        mask, optics = load_mask(root / MASK_FILE)
        dataset = Dataset(
            path=root,
            frames=load_frames(root / FRAMES_FILE),
            ground_truth=load_localizations(root / TRUTH_FILE),
            mask=mask,
            optics=optics,
            manifest=manifest,
        )
        self.cached[root] = dataset
        self.logger.debug(f"Loaded dataset {root}")
        return dataset
