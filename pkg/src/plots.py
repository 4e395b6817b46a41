"""Terminal plots rendered with plotext."""

from typing import List, Optional, Sequence, Tuple

import numpy as np
import plotext as plt

from src.metrics import CrlbReport


def _prepare(width: int, height: int, title: str) -> None:
    plt.clear_figure()
    plt.clear_data()
    plt.plotsize(width, height)
    plt.theme("dark")
    plt.grid(False)
    plt.title(title)


def _lines(figure: str) -> List[str]:
    return [line.rstrip() for line in figure.split("\n")] if isinstance(figure, str) else []


def build_loss_plot(history: Sequence[float], width: int = 80, height: int = 20) -> List[str]:
    """Loss history on a log axis, as a list of text lines."""
    _prepare(width, height, "training loss")
    if not history:
        return []
    steps = list(range(1, len(history) + 1))
    values = [max(float(v), 1e-12) for v in history]
    plt.plot(steps, values, color="white", marker="braille")
    plt.yscale("log")
    plt.xlabel("step")
    return _lines(plt.build())


def build_crlb_plot(
    sweep: Sequence[Tuple[float, Optional[CrlbReport]]], width: int = 80, height: int = 20
) -> List[str]:
    """σx, σy, σz (nm) against z; degenerate samples are left out."""
    _prepare(width, height, "CRLB vs z")
    valid = [report for _, report in sweep if report is not None]
    if not valid:
        return []
    zs = [r.z for r in valid]
    plt.plot(zs, [r.sigma_x for r in valid], color="red", marker="braille", label="σx")
    plt.plot(zs, [r.sigma_y for r in valid], color="green", marker="braille", label="σy")
    plt.plot(zs, [r.sigma_z for r in valid], color="blue", marker="braille", label="σz")
    top = max(max(r.sigma_x, r.sigma_y, r.sigma_z) for r in valid)
    plt.ylim(0, float(np.nextafter(top * 1.2, np.inf)))
    plt.xlabel("z (nm)")
    return _lines(plt.build())
