from math import factorial
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from src.errors import ConfigurationError
from src.optics import OpticalConfig, PhaseMask, PupilGrid, build_pupil

# Highest supported Noll index (radial order 20).
MAX_NOLL_INDEX = 231

NAMED_MODES: Dict[str, int] = {
    "piston": 1,
    "tip": 2,
    "tilt": 3,
    "defocus": 4,
    "oblique_astigmatism": 5,
    "vertical_astigmatism": 6,
    "vertical_coma": 7,
    "horizontal_coma": 8,
    "spherical": 11,
}


def noll_to_nm(index: int) -> Tuple[int, int]:
    """Convert a Noll index (1-based) to radial order n and azimuthal order m."""
    if not isinstance(index, (int, np.integer)) or index < 1 or index > MAX_NOLL_INDEX:
        raise ConfigurationError(f"unknown Zernike Noll index: {index!r}")
    n = 0
    remainder = int(index) - 1
    while remainder > n:
        n += 1
        remainder -= n
    m = (-1) ** int(index) * ((n % 2) + 2 * ((remainder + ((n + 1) % 2)) // 2))
    return n, m


def radial_polynomial(n: int, m: int, rho: NDArray[np.float64]) -> NDArray[np.float64]:
    m = abs(m)
    result = np.zeros_like(rho)
    for s in range((n - m) // 2 + 1):
        coefficient = (-1) ** s * factorial(n - s) / (
            factorial(s) * factorial((n + m) // 2 - s) * factorial((n - m) // 2 - s)
        )
        result += coefficient * rho ** (n - 2 * s)
    return result


def zernike_mode(pupil: PupilGrid, index: int) -> NDArray[np.float64]:
    """Orthonormal (Noll) Zernike mode on the unit-radius aperture, zero outside."""
    n, m = noll_to_nm(index)
    cfg = pupil.config
    cutoff = cfg.numerical_aperture / cfg.emission_wavelength
    rho = np.hypot(pupil.k_x, pupil.k_y) / cutoff
    theta = np.arctan2(pupil.k_y, pupil.k_x)
    radial = radial_polynomial(n, m, rho)
    if m == 0:
        mode = np.sqrt(n + 1.0) * radial
    elif m > 0:
        mode = np.sqrt(2.0 * (n + 1)) * radial * np.cos(m * theta)
    else:
        mode = np.sqrt(2.0 * (n + 1)) * radial * np.sin(-m * theta)
    return np.where(pupil.aperture, mode, 0.0)


def zernike_phase(
    pupil: PupilGrid, coefficients: Sequence[Tuple[int, float]]
) -> NDArray[np.float64]:
    phase = np.zeros(pupil.aperture.shape)
    for index, value in coefficients:
        phase += value * zernike_mode(pupil, index)
    return phase


def zernike_mask(
    coefficients: Sequence[Tuple[int, float]],
    cfg: OpticalConfig,
    pupil: Optional[PupilGrid] = None,
) -> PhaseMask:
    """Phase mask from Noll-indexed coefficients in radians."""
    pupil = pupil if pupil is not None else build_pupil(cfg)
    return PhaseMask(zernike_phase(pupil, coefficients), pupil.aperture.copy())
