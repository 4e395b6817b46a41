from pathlib import Path
from typing import Optional, TextIO, Union


class TrainingLog:
    """Appends ``step,loss,wall_ms`` rows to a CSV file, flushing every entry."""

    HEADER = "step,loss,wall_ms\n"

    def __init__(self, output_file: Union[str, Path]) -> None:
        self.output_file = Path(output_file)
        self.file_handle: Optional[TextIO] = None

    def start(self) -> None:
        self.output_file.parent.mkdir(parents=True, exist_ok=True)
        self.file_handle = open(self.output_file, "w", encoding="utf-8")
        self.file_handle.write(self.HEADER)
        self.file_handle.flush()

    def write_entry(self, step: int, loss: float, wall_ms: float) -> None:
        if self.file_handle:
            self.file_handle.write(f"{step},{float(loss)!r},{wall_ms:.3f}\n")
            self.file_handle.flush()

    def close(self) -> None:
        if self.file_handle:
            self.file_handle.close()
            self.file_handle = None

    def __enter__(self) -> "TrainingLog":
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
