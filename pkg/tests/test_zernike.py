import numpy as np
import pytest

from src.errors import ConfigurationError
from src.optics import OpticalConfig, PupilGrid, psf_slice
from src.zernike import NAMED_MODES, noll_to_nm, zernike_mask, zernike_mode


@pytest.mark.parametrize(
    "index, expected",
    [(1, (0, 0)), (2, (1, 1)), (3, (1, -1)), (4, (2, 0)), (5, (2, -2)), (6, (2, 2)), (11, (4, 0))],
)
def test_noll_to_nm(index: int, expected: tuple[int, int]) -> None:
    """Test the Noll index ordering."""
    assert noll_to_nm(index) == expected


@pytest.mark.parametrize("index", [0, -3, 232])
def test_unknown_index_rejected(index: int) -> None:
    """Test that indices outside the table are refused."""
    with pytest.raises(ConfigurationError):
        noll_to_nm(index)


def test_zero_coefficients_give_flat_mask(small_optics: OpticalConfig, pupil: PupilGrid) -> None:
    """Test that all-zero coefficients give a flat mask."""
    mask = zernike_mask([(4, 0.0), (6, 0.0)], small_optics, pupil)
    assert not mask.phase.any()
    assert np.array_equal(mask.aperture, pupil.aperture)


def test_modes_are_orthogonal(pupil: PupilGrid) -> None:
    """Test that defocus and astigmatism are orthogonal over the aperture."""
    defocus = zernike_mode(pupil, 4)[pupil.aperture]
    astig = zernike_mode(pupil, 6)[pupil.aperture]
    inner = float(np.dot(defocus, astig))
    assert abs(inner) <= 0.01 * np.linalg.norm(defocus) * np.linalg.norm(astig)


def test_mode_is_zero_outside_aperture(pupil: PupilGrid) -> None:
    """Test that modes vanish outside the aperture."""
    assert not zernike_mode(pupil, NAMED_MODES["spherical"])[~pupil.aperture].any()


def _elongation(psf: np.ndarray) -> float:
    """Second-moment difference along x and y of the bright core."""
    weights = np.where(psf > 0.05 * psf.max(), psf, 0.0)
    rows, cols = np.indices(psf.shape)
    total = weights.sum()
    cy = (rows * weights).sum() / total
    cx = (cols * weights).sum() / total
    return float(((cols - cx) ** 2 * weights).sum() / total - ((rows - cy) ** 2 * weights).sum() / total)


def test_astigmatism_rotates_through_focus(small_optics: OpticalConfig, pupil: PupilGrid) -> None:
    """Test that the elongation axis flips by 90° between z=-500 and z=+500 nm."""
    mask = zernike_mask([(NAMED_MODES["vertical_astigmatism"], 1.0)], small_optics, pupil)
    below = _elongation(psf_slice(pupil, mask, -500.0))
    above = _elongation(psf_slice(pupil, mask, 500.0))
    assert below * above < 0
