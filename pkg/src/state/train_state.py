import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from src.decoder import DecoderParams
from src.errors import CheckpointMismatchError, CorruptFileError
from src.optics import OpticalConfig, PhaseMask
from src.optim import zero_moments
from src.storage import (
    canonical_json,
    load_decoder,
    load_mask,
    read_array,
    save_decoder,
    save_mask,
    write_array,
)

logger = logging.getLogger(__name__)

MASK_GROUP = "mask"
STATE_VERSION = 1


@dataclass
class TrainState:
    """Mask, decoder, Adam moments, step counter and loss history of one run."""

    mask: PhaseMask
    decoder: DecoderParams
    first: Dict[str, NDArray[Any]]
    second: Dict[str, NDArray[Any]]
    step: int = 0
    seed: int = 0
    history: List[float] = field(default_factory=list)

    @classmethod
    def initial(cls, mask: PhaseMask, decoder: DecoderParams, seed: int = 0) -> "TrainState":
        params = {MASK_GROUP: mask.phase, **decoder.named_arrays()}
        return cls(mask, decoder, zero_moments(params), zero_moments(params), seed=seed)

    def parameters(self) -> Dict[str, NDArray[Any]]:
        """Live parameter arrays keyed by group name (mask first)."""
        return {MASK_GROUP: self.mask.phase, **self.decoder.named_arrays()}

    def decoder_parameters(self) -> Dict[str, NDArray[Any]]:
        return self.decoder.named_arrays()

    def check_congruent(self) -> None:
        for name, value in self.parameters().items():
            for buffers in (self.first, self.second):
                if name not in buffers or buffers[name].shape != value.shape:
                    raise CheckpointMismatchError(f"moment buffer for {name} does not match its parameter")

    def record_loss(self, loss: float) -> None:
        self.history.append(float(loss))

    def diagnostics(self) -> Dict[str, Any]:
        """Summary dumped when training aborts."""
        report: Dict[str, Any] = {
            "step": self.step,
            "seed": self.seed,
            "recent_losses": self.history[-10:],
        }
        for name, value in self.parameters().items():
            report[name] = {
                "norm": float(np.linalg.norm(value)),
                "non_finite": int(np.count_nonzero(~np.isfinite(value))),
            }
        return report

    def _moment_vector(self) -> NDArray[np.float64]:
        parts = []
        for name in self.parameters():
            parts.append(self.first[name].ravel().astype(np.float64))
            parts.append(self.second[name].ravel().astype(np.float64))
        return np.concatenate(parts)

    def save(self, run_dir: Union[str, Path], optics: OpticalConfig) -> Path:
        """Write ``run_dir/<step>/{mask.bin, decoder.bin, optimizer.bin, state.json}``."""
        target = Path(run_dir) / str(self.step)
        target.mkdir(parents=True, exist_ok=True)
        save_mask(target / "mask.bin", self.mask, optics)
        save_decoder(target / "decoder.bin", self.decoder, optics)
        write_array(target / "optimizer.bin", self._moment_vector(), "<f8", "optimizer", {})
        state = {
            "version": STATE_VERSION,
            "step": self.step,
            "seed": self.seed,
            "history": self.history,
            "decoder_dtype": np.dtype(self.decoder.dtype).name,
            "decoder_version": self.decoder.version,
        }
        (target / "state.json").write_text(canonical_json(state), encoding="utf-8")
        logger.debug(f"Checkpoint written to {target}")
        return target

    @classmethod
    def load(cls, checkpoint_dir: Union[str, Path]) -> Tuple["TrainState", OpticalConfig]:
        source = Path(checkpoint_dir)
        try:
            state = json.loads((source / "state.json").read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CorruptFileError(str(source / "state.json"), f"unreadable state: {e}") from e
        if state.get("version") != STATE_VERSION:
            raise CorruptFileError(str(source / "state.json"), f"state version {state.get('version')!r}")

        mask, optics = load_mask(source / "mask.bin")
        decoder = load_decoder(source / "decoder.bin", optics).astype(np.dtype(state["decoder_dtype"]))
        decoder.version = int(state["decoder_version"])
        moments, _ = read_array(source / "optimizer.bin", "optimizer")

        loaded = cls.initial(mask, decoder, seed=int(state["seed"]))
        offset = 0
        for name, value in loaded.parameters().items():
            for buffers in (loaded.first, loaded.second):
                chunk = moments[offset : offset + value.size]
                if chunk.size != value.size:
                    raise CorruptFileError(str(source / "optimizer.bin"), f"too short for {name}")
                buffers[name] = chunk.reshape(value.shape).astype(value.dtype)
                offset += value.size
        if offset != moments.size:
            raise CorruptFileError(str(source / "optimizer.bin"), "moment count does not match parameters")

        loaded.step = int(state["step"])
        loaded.history = [float(v) for v in state["history"]]
        return loaded, optics
