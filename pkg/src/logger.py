import logging
from datetime import datetime
from pathlib import Path
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

FILE_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class AppLogger:
    """Process-wide logger setup: rich console output plus an optional log file.

    Handlers hang off the ``src`` logger so every module logger created with
    ``logging.getLogger(__name__)`` reaches them.
    """

    _instance: Optional["AppLogger"] = None

    def __new__(cls) -> "AppLogger":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self) -> None:
        if not hasattr(self, "initialized"):
            self.logger = logging.getLogger("src")
            self.console = Console(stderr=True)
            self.console_handler = RichHandler(
                console=self.console, show_path=False, rich_tracebacks=False
            )
            self.console_handler.setFormatter(logging.Formatter("%(message)s"))
            self.file_handler: Optional[logging.FileHandler] = None
            self.log_file: Optional[Path] = None
            self.initialized = True

            self.logger.setLevel(logging.INFO)
            self.logger.propagate = False
            self.logger.addHandler(self.console_handler)

    def setup_file_logging(self, log_dir: str, enabled: bool = False) -> Optional[Path]:
        """Add a file handler writing ``smlm_<timestamp>.log`` under ``log_dir``."""
        if not enabled:
            return None
        if self.file_handler:
            self.logger.removeHandler(self.file_handler)
            self.file_handler.close()

        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)

        self.log_file = log_path / f"smlm_{datetime.now():%Y%m%d_%H%M%S}.log"
        self.file_handler = logging.FileHandler(self.log_file, encoding="utf-8")
        self.file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        self.logger.addHandler(self.file_handler)
        return self.log_file

    def set_level(self, level: str) -> None:
        """Set the logging level; unknown names fall back to INFO."""
        if isinstance(level, str):
            level_map = {
                "DEBUG": logging.DEBUG,
                "INFO": logging.INFO,
                "WARNING": logging.WARNING,
                "ERROR": logging.ERROR,
                "CRITICAL": logging.CRITICAL,
            }
            self.logger.setLevel(level_map.get(level.upper(), logging.INFO))
