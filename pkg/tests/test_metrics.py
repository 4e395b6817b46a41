from itertools import permutations

import numpy as np
import pytest

from src.errors import ConfigurationError, DataError, NumericalError
from src.grid3d import LocalizationList
from src.metrics import (
    EvaluationRow,
    MatchResult,
    crlb,
    crlb_sweep,
    density_correlation,
    evaluate,
    fisher_matrix,
    jaccard,
    match_points,
    rmse,
)
from src.mp import build_dictionary, mle_refine, window_around
from src.optics import Emitter, PhaseMask, PupilGrid, apply_noise, render_noiseless


def _points(rows: list[tuple[float, float, float]], frame: int = 0) -> LocalizationList:
    array = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return LocalizationList(
        frame=np.full(len(array), frame),
        x=array[:, 0],
        y=array[:, 1],
        z=array[:, 2],
        photons=np.full(len(array), 1000.0),
    )


def test_identical_lists_match_exactly(rng: np.random.Generator) -> None:
    """Test that a list matched against itself pairs everything at distance 0."""
    points = _points([tuple(p) for p in rng.uniform(0, 5000, size=(8, 3))])
    result = match_points(points, points)
    assert (result.tp, result.fp, result.fn) == (8, 0, 0)
    assert all(distance == 0.0 for _, _, distance in result.pairs)


def test_gate_blocks_distant_pairs() -> None:
    """Test that a 200 nm axial miss is a false positive plus a false negative."""
    result = match_points(_points([(0.0, 0.0, 0.0)]), _points([(0.0, 0.0, 200.0)]))
    assert (result.tp, result.fp, result.fn) == (0, 1, 1)


def test_lateral_only_ignores_z() -> None:
    """Test that lateral matching ignores the axial offset."""
    result = match_points(
        _points([(0.0, 0.0, 0.0)]), _points([(30.0, 40.0, 900.0)]), lateral_only=True
    )
    assert result.tp == 1
    assert result.total_distance == pytest.approx(50.0)


def test_empty_lists_are_valid() -> None:
    """Test matching against an empty list."""
    result = match_points(_points([]), _points([(0.0, 0.0, 0.0)]))
    assert (result.tp, result.fp, result.fn) == (0, 1, 0)
    assert jaccard(match_points(_points([]), _points([]))) == 1.0


def test_rejects_non_positive_threshold() -> None:
    """Test that the gate must be positive."""
    with pytest.raises(ConfigurationError):
        match_points(_points([]), _points([]), threshold=0.0)


@pytest.mark.acceptance
def test_assignment_is_optimal(rng: np.random.Generator) -> None:
    """Test the matched total distance against every permutation on 100 instances up to 6×6."""
    for _ in range(100):
        n = int(rng.integers(1, 7))
        gt = rng.uniform(0, 100, size=(n, 3))
        pred = rng.uniform(0, 100, size=(n, 3))
        distance = np.linalg.norm(gt[:, None, :] - pred[None, :, :], axis=2)
        best = min(sum(distance[i, p[i]] for i in range(n)) for p in permutations(range(n)))
        result = match_points(_points([tuple(p) for p in gt]), _points([tuple(p) for p in pred]), 1e6)
        assert result.tp == n
        assert result.total_distance == pytest.approx(best)


def test_swapping_lists_swaps_fp_and_fn(rng: np.random.Generator) -> None:
    """Test that exchanging ground truth and predictions keeps tp and exchanges fp with fn."""
    for _ in range(50):
        gt = _points([tuple(p) for p in rng.uniform(0, 600, size=(int(rng.integers(0, 7)), 3))])
        pred = _points([tuple(p) for p in rng.uniform(0, 600, size=(int(rng.integers(0, 7)), 3))])
        forward = match_points(gt, pred, threshold=150.0)
        backward = match_points(pred, gt, threshold=150.0)
        assert forward.tp == backward.tp
        assert (forward.fp, forward.fn) == (backward.fn, backward.fp)
        assert forward.total_distance == pytest.approx(backward.total_distance)


def test_cardinality_before_distance() -> None:
    """Test that the matcher prefers more gated pairs over a shorter single pair."""
    gt = _points([(0.0, 0.0, 0.0), (120.0, 0.0, 0.0)])
    pred = _points([(100.0, 0.0, 0.0), (230.0, 0.0, 0.0)])
    result = match_points(gt, pred, threshold=150.0)
    assert result.tp == 2


@pytest.mark.parametrize(
    "counts, expected",
    [((57, 2, 5), 0.890625), ((5, 0, 0), 1.0), ((49, 1, 13), 49 / 63)],
)
def test_jaccard(counts: tuple[int, int, int], expected: float) -> None:
    """Test Jaccard arithmetic on reported detection counts."""
    tp, fp, fn = counts
    assert jaccard(MatchResult([], tp, fp, fn, 150.0)) == pytest.approx(expected)


def test_jaccard_reported_at_two_decimals() -> None:
    """Test that 57/64 rounds to the reported 0.89."""
    assert f"{jaccard(MatchResult([], 57, 2, 5, 150.0)):.2f}" == "0.89"


def test_jaccard_bounded_and_monotone_in_tp(rng: np.random.Generator) -> None:
    """Test that Jaccard stays in [0, 1] and never drops as tp grows with fp + fn fixed."""
    for _ in range(100):
        fp, fn = (int(v) for v in rng.integers(0, 20, size=2))
        scores = [jaccard(MatchResult([], tp, fp, fn, 150.0)) for tp in range(30)]
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert all(later >= earlier for earlier, later in zip(scores, scores[1:]))


def test_rmse_arithmetic() -> None:
    """Test lateral and axial RMSE on one 3-4-12 pair and on no pairs."""
    gt = _points([(0.0, 0.0, 0.0)])
    pred = _points([(3.0, 4.0, 12.0)])
    result = match_points(gt, pred)
    assert rmse(result, gt, pred) == pytest.approx((5.0, 12.0))
    assert rmse(match_points(gt, gt), gt, gt) == (0.0, 0.0)
    assert rmse(match_points(gt, _points([])), gt, _points([])) is None


def test_rmse_of_voxel_snapping(rng: np.random.Generator) -> None:
    """Test that snapping to 27.5 nm voxels gives a lateral RMSE of 27.5/√6 nm."""
    count = 10_000
    truth = rng.uniform(0, 5000, size=(count, 3))
    snapped = (np.floor(truth / 27.5) + 0.5) * 27.5
    gt = _points([tuple(p) for p in truth])
    pred = _points([tuple(p) for p in snapped])
    pairs = MatchResult([(i, i, 0.0) for i in range(count)], count, 0, 0, 150.0)
    errors = rmse(pairs, gt, pred)
    assert errors is not None
    assert errors[0] == pytest.approx(27.5 / np.sqrt(6), rel=0.05)


def test_evaluate_matches_per_frame() -> None:
    """Test that matching never crosses frames and photon filtering applies to both sides."""
    gt = LocalizationList.concatenate([_points([(0.0, 0.0, 0.0)], 0), _points([(500.0, 0.0, 0.0)], 1)])
    pred = LocalizationList.concatenate([_points([(500.0, 0.0, 0.0)], 0), _points([(510.0, 0.0, 0.0)], 1)])
    row = evaluate(gt, pred, density=0.3)
    assert (row.tp, row.fp, row.fn) == (1, 1, 1)
    assert row.jaccard == pytest.approx(1 / 3)
    assert row.rmse_lateral == pytest.approx(10.0)
    assert row.density == 0.3

    dim = LocalizationList(frame=[0], x=[0.0], y=[0.0], z=[0.0], photons=[10.0])
    filtered = evaluate(dim, dim, min_photons=100.0)
    assert (filtered.tp, filtered.fp, filtered.fn) == (0, 0, 0)
    assert filtered.rmse_lateral is None


def test_density_correlation() -> None:
    """Test the rank correlation of Jaccard against density."""
    rows = [EvaluationRow(d, 1.0 - d, None, None, 0, 0, 0) for d in (0.1, 0.2, 0.4)]
    assert density_correlation(rows) == pytest.approx(-1.0)
    assert density_correlation(rows[:1]) is None


def test_fisher_rejects_bad_photons(pupil: PupilGrid, astigmatic_mask: PhaseMask) -> None:
    """Test that non-positive photons and negative background are refused."""
    with pytest.raises(DataError):
        fisher_matrix(pupil, astigmatic_mask, 0.0, 0.0, 10.0)
    with pytest.raises(DataError):
        fisher_matrix(pupil, astigmatic_mask, 0.0, 100.0, -1.0)


def test_crlb_scales_with_photons(pupil: PupilGrid, astigmatic_mask: PhaseMask) -> None:
    """Test that without background doubling photons divides position bounds by √2."""
    single = crlb(pupil, astigmatic_mask, 200.0, 5000.0, 0.0)
    double = crlb(pupil, astigmatic_mask, 200.0, 10000.0, 0.0)
    for name in ("sigma_x", "sigma_y", "sigma_z"):
        assert getattr(single, name) / getattr(double, name) == pytest.approx(np.sqrt(2), rel=1e-6)
    assert double.sigma_n / double.photons == pytest.approx(
        single.sigma_n / single.photons / np.sqrt(2), rel=1e-6
    )


def test_crlb_ignores_global_piston(pupil: PupilGrid, astigmatic_mask: PhaseMask, rng: np.random.Generator) -> None:
    """Test that a constant phase offset on the mask leaves every bound unchanged."""
    for z in (-300.0, 120.0):
        base = crlb(pupil, astigmatic_mask, z, 30000.0, 150.0)
        for piston in rng.uniform(-np.pi, np.pi, size=2):
            shifted = PhaseMask(
                np.where(pupil.aperture, astigmatic_mask.phase + piston, 0.0), pupil.aperture.copy()
            )
            moved = crlb(pupil, shifted, z, 30000.0, 150.0)
            for name in ("sigma_x", "sigma_y", "sigma_z", "sigma_n"):
                assert getattr(moved, name) == pytest.approx(getattr(base, name), rel=1e-9)


def test_crlb_flat_mask_degenerate_at_focus(pupil: PupilGrid, flat_mask: PhaseMask) -> None:
    """Test that a flat mask carries no axial information exactly at focus."""
    with pytest.raises(NumericalError) as error:
        crlb(pupil, flat_mask, 0.0, 30000.0, 150.0)
    assert error.value.parameter == "z"


def test_crlb_sweep_marks_degenerate_samples(pupil: PupilGrid, flat_mask: PhaseMask) -> None:
    """Test that a sweep through focus keeps going and leaves the focal sample empty."""
    sweep = dict(crlb_sweep(pupil, flat_mask, [-300.0, 0.0, 300.0], 30000.0, 150.0))
    assert sweep[0.0] is None
    assert sweep[300.0] is not None
    assert sweep[300.0].sigma_z > 0


def test_crlb_with_background_estimation(pupil: PupilGrid, astigmatic_mask: PhaseMask) -> None:
    """Test that estimating the background adds its bound and loosens the others."""
    fixed = crlb(pupil, astigmatic_mask, -200.0, 30000.0, 150.0)
    free = crlb(pupil, astigmatic_mask, -200.0, 30000.0, 150.0, estimate_background=True)
    assert fixed.sigma_background is None
    assert free.sigma_background is not None and free.sigma_background > 0
    assert free.sigma_x >= fixed.sigma_x * (1 - 1e-9)
    assert set(fixed.to_dict()) == {"z_nm", "sigma_x_nm", "sigma_y_nm", "sigma_z_nm", "sigma_n"}


@pytest.mark.slow
@pytest.mark.acceptance
def test_crlb_matches_monte_carlo_spread(pupil: PupilGrid, astigmatic_mask: PhaseMask) -> None:
    """Test the lateral bound against the spread of 200 maximum-likelihood fits."""
    pixel = pupil.config.camera_pixel
    emitter = Emitter(16.5 * pixel, 16.5 * pixel, -150.0, 30000.0)
    clean = render_noiseless(pupil, astigmatic_mask, [emitter], 33, 33)
    dictionary = build_dictionary(pupil, astigmatic_mask, z_step=100.0, radius=16)
    window = window_around(16, 16, dictionary.radius, clean.shape)
    estimates = []
    for trial in range(200):
        noisy = apply_noise(clean, 150.0, rng_seed=1000 + trial)
        fit = mle_refine(noisy, window, (emitter.x, emitter.y, emitter.z, emitter.photons), 150.0, dictionary)
        estimates.append((fit.x, fit.y))

    bound = crlb(pupil, astigmatic_mask, emitter.z, emitter.photons, 150.0, shape=(33, 33))
    spread = np.std(np.array(estimates), axis=0, ddof=1)
    assert 0.9 <= spread[0] / bound.sigma_x <= 1.3
    assert 0.9 <= spread[1] / bound.sigma_y <= 1.3
