from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.codesign import (
    TrainConfig,
    crlb_objective,
    decoder_localize,
    design_mask_crlb,
    evaluate_decoder,
    gradcheck,
    grid_spec_for,
    initial_mask,
    learn_psf,
    new_state,
    sample_batch,
    train_step,
)
from src.decoder import DecoderParams
from src.errors import ConfigurationError, NumericalError
from src.grid3d import LocalizationList
from src.optics import OpticalConfig, PhaseMask, PupilGrid, build_pupil
from src.state.train_state import TrainState
from src.storage import DatasetStore, load_mask


def test_train_config_validation() -> None:
    """Test that inverted ranges and negative learning rates are refused."""
    with pytest.raises(ConfigurationError):
        TrainConfig(emitters_per_frame=(3, 1))
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_mask=-0.1)
    with pytest.raises(ConfigurationError):
        TrainConfig(mask_init="random")


def test_train_config_file(tmp_path: Path, tiny_train_config: TrainConfig) -> None:
    """Test that a saved training config loads back equal."""
    tiny_train_config.zernike_init = ((5, 0.4),)
    tiny_train_config.save(tmp_path / "train_config.json")
    assert TrainConfig.load(tmp_path / "train_config.json") == tiny_train_config


def test_training_range_must_fit_optics(tiny_train_config: TrainConfig) -> None:
    """Test that a training range beyond the optics range is refused."""
    with pytest.raises(ConfigurationError):
        new_state(tiny_train_config, OpticalConfig(pupil_samples=16, axial_range=400.0))


def test_sample_batch_is_seeded(
    tiny_train_config: TrainConfig, pupil: PupilGrid, astigmatic_mask: PhaseMask
) -> None:
    """Test that a seed and stream fix the batch."""
    first = sample_batch(tiny_train_config, 4, pupil, astigmatic_mask, stream=2)
    second = sample_batch(tiny_train_config, 4, pupil, astigmatic_mask, stream=2)
    assert first.emitters == second.emitters
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(first.frames, second.frames))
    assert first.targets[0].values.shape == (5, 24, 24)


def test_sample_batch_emitter_count(
    tiny_train_config: TrainConfig, pupil: PupilGrid, astigmatic_mask: PhaseMask
) -> None:
    """Test that a (1, 1) range gives exactly one emitter per frame."""
    tiny_train_config.emitters_per_frame = (1, 1)
    tiny_train_config.batch_size = 5
    batch = sample_batch(tiny_train_config, 0, pupil, astigmatic_mask)
    assert [len(e) for e in batch.emitters] == [1] * 5
    low, high = grid_spec_for(tiny_train_config, pupil.config).z_extent
    assert all(low <= e[0].z < high for e in batch.emitters)


def test_initial_masks(tiny_train_config: TrainConfig, pupil: PupilGrid) -> None:
    """Test the flat and smooth-random starting masks."""
    tiny_train_config.mask_init = "flat"
    assert not initial_mask(tiny_train_config, pupil).phase.any()
    tiny_train_config.mask_init = "smooth"
    smooth = initial_mask(tiny_train_config, pupil)
    assert smooth.phase[pupil.aperture].std() == pytest.approx(0.3)
    assert not smooth.phase[~pupil.aperture].any()


def test_new_decoder_carries_configured_voxel_z(
    tiny_train_config: TrainConfig, small_optics: OpticalConfig
) -> None:
    """Test that a fresh decoder records the training grid's axial pitch."""
    state, _, spec = new_state(tiny_train_config, small_optics)
    assert state.decoder.voxel_z == spec.voxel_z == 100.0
    assert state.decoder.manifest()["voxel_z"] == 100.0


def test_zero_learning_rates_only_advance_the_step(
    tiny_train_config: TrainConfig, small_optics: OpticalConfig
) -> None:
    """Test that learning rates of zero leave every parameter and moment unchanged."""
    tiny_train_config.lr_mask = 0.0
    tiny_train_config.lr_decoder = 0.0
    state, pupil, spec = new_state(tiny_train_config, small_optics)
    before = {name: value.copy() for name, value in state.parameters().items()}
    moments = {name: value.copy() for name, value in state.first.items()}
    batch = sample_batch(tiny_train_config, 1, pupil, state.mask, spec, stream=1)

    state, loss = train_step(state, batch, tiny_train_config, pupil, spec)
    assert state.step == 1
    assert state.history == [loss]
    for name, value in state.parameters().items():
        assert np.array_equal(value, before[name])
        assert np.array_equal(state.first[name], moments[name])


def test_train_step_updates_mask_inside_aperture(
    tiny_train_config: TrainConfig, small_optics: OpticalConfig
) -> None:
    """Test that a mask update moves phase only inside the aperture."""
    state, pupil, spec = new_state(tiny_train_config, small_optics)
    before = state.mask.phase.copy()
    batch = sample_batch(tiny_train_config, 1, pupil, state.mask, spec, stream=1)
    state, _ = train_step(state, batch, tiny_train_config, pupil, spec)
    changed = state.mask.phase != before
    assert changed[pupil.aperture].any()
    assert not changed[~pupil.aperture].any()
    assert state.decoder.version == 1


def test_non_finite_loss_aborts_with_dump(
    tmp_path: Path, tiny_train_config: TrainConfig, small_optics: OpticalConfig
) -> None:
    """Test that a non-finite loss raises and leaves a diagnostic dump."""
    state, pupil, spec = new_state(tiny_train_config, small_optics)
    batch = sample_batch(tiny_train_config, 1, pupil, state.mask, spec, stream=1)
    state.decoder.layers[0].weight[...] = np.nan
    with pytest.raises(NumericalError):
        train_step(state, batch, tiny_train_config, pupil, spec, dump_dir=tmp_path)
    assert (tmp_path / "diagnostics.json").exists()


def test_training_is_deterministic(tiny_train_config: TrainConfig, small_optics: OpticalConfig) -> None:
    """Test that two runs with one seed give identical loss histories."""
    tiny_train_config.steps = 3
    _, _, first = learn_psf(tiny_train_config, small_optics)
    _, _, second = learn_psf(tiny_train_config, small_optics)
    assert first == second
    assert len(first) == 3


def test_learn_psf_writes_run_directory(
    tmp_path: Path, tiny_train_config: TrainConfig, small_optics: OpticalConfig
) -> None:
    """Test checkpoints, the loss log and the final mask of a training run."""
    steps: list[int] = []
    mask, _, history = learn_psf(
        tiny_train_config, small_optics, tmp_path, on_step=lambda step, _: steps.append(step)
    )
    assert steps == [1, 2, 3, 4]
    assert (tmp_path / "2" / "state.json").exists()
    assert (tmp_path / "4" / "decoder.bin").exists()
    assert (tmp_path / "training_log.csv").read_text(encoding="utf-8").count("\n") == 5
    saved, _ = load_mask(tmp_path / "mask.bin")
    assert np.array_equal(saved.phase, mask.phase)
    assert len(history) == 4


def test_resume_continues_from_checkpoint(
    tmp_path: Path, tiny_train_config: TrainConfig, small_optics: OpticalConfig
) -> None:
    """Test that a resumed run picks up the step counter and history."""
    tiny_train_config.steps = 2
    learn_psf(tiny_train_config, small_optics, tmp_path)
    state, optics = TrainState.load(tmp_path / "2")
    tiny_train_config.steps = 4
    _, _, history = learn_psf(tiny_train_config, optics, tmp_path, resume=state)
    assert len(history) == 4
    assert (tmp_path / "4" / "state.json").exists()


def test_frozen_mask_is_unchanged(
    tmp_path: Path, tiny_train_config: TrainConfig, small_optics: OpticalConfig, astigmatic_mask: PhaseMask
) -> None:
    """Test that a mask learning rate of zero trains the decoder only."""
    tiny_train_config.lr_mask = 0.0
    mask, _, _ = learn_psf(tiny_train_config, small_optics, tmp_path, init_mask=astigmatic_mask)
    assert np.array_equal(mask.phase, astigmatic_mask.phase)
    saved, _ = load_mask(tmp_path / "mask.bin")
    assert saved.phase.tobytes() == astigmatic_mask.phase.tobytes()


def test_decoder_on_dataset(tmp_dataset: Path, tiny_train_config: TrainConfig, small_optics: OpticalConfig) -> None:
    """Test decoder localization and scoring on a stored dataset."""
    dataset = DatasetStore(tmp_dataset.parent).load(tmp_dataset)
    state, _, _ = new_state(tiny_train_config, small_optics)
    spec = grid_spec_for(tiny_train_config, small_optics)
    spec = replace(spec, dims=(spec.dims[0], 48, 48))
    found = decoder_localize(state.decoder, dataset.frames[1], spec, threshold=0.2, frame_index=1)
    assert set(found.frame.tolist()) <= {1}
    row = evaluate_decoder(state.decoder, dataset.frames, dataset.ground_truth, spec, threads=2)
    assert row.tp + row.fn == 4


def test_gradcheck_passes() -> None:
    """Test that every audited gradient agrees with finite differences."""
    report = gradcheck(seed=3, samples=6)
    assert {"mask_gradient", "decoder:input", "end_to_end"} <= set(report.audits())
    assert report.max_error() <= 1e-3


def test_crlb_objective_drops_singular_samples(pupil: PupilGrid, flat_mask: PhaseMask) -> None:
    """Test that the focal sample of a flat mask is dropped, not fatal."""
    with_focus = crlb_objective(pupil, flat_mask, [-300.0, 0.0, 300.0], 30000.0, 150.0)
    without = crlb_objective(pupil, flat_mask, [-300.0, 300.0], 30000.0, 150.0)
    assert with_focus == pytest.approx(without)


def test_crlb_design_zero_iterations(small_optics: OpticalConfig) -> None:
    """Test that no iterations return the initialization."""
    design = design_mask_crlb(
        2, [-300.0, 0.0, 300.0], 30000.0, 150.0, small_optics, iterations=0, init=[(5, 0.5)]
    )
    assert design.coefficients == [(5, 0.5), (6, 0.0)]
    assert design.objective == design.initial_objective
    assert design.history == [design.initial_objective]


def test_crlb_design_needs_three_samples(small_optics: OpticalConfig) -> None:
    """Test that fewer than three z samples are refused."""
    with pytest.raises(ConfigurationError):
        design_mask_crlb(2, [0.0, 100.0], 30000.0, 150.0, small_optics)


def test_crlb_design_is_deterministic(small_optics: OpticalConfig) -> None:
    """Test that one seed and config give one mask."""
    zs = [-300.0, 0.0, 300.0]
    first = design_mask_crlb(2, zs, 30000.0, 150.0, small_optics, iterations=1, seed=4)
    second = design_mask_crlb(2, zs, 30000.0, 150.0, small_optics, iterations=1, seed=4)
    assert np.array_equal(first.mask.phase, second.mask.phase)
    assert first.objective <= first.initial_objective


@pytest.mark.slow
def test_crlb_design_beats_flat_mask(small_optics: OpticalConfig, pupil: PupilGrid, flat_mask: PhaseMask) -> None:
    """Test that an astigmatism-seeded design halves the flat-mask objective."""
    zs = list(np.linspace(-500.0, 500.0, 5))
    design = design_mask_crlb(4, zs, 30000.0, 150.0, small_optics, iterations=10, init=[(5, 0.5)])
    assert design.objective * 2 <= crlb_objective(pupil, flat_mask, zs, 30000.0, 150.0)


@pytest.mark.slow
def test_overfits_one_batch(tiny_train_config: TrainConfig, small_optics: OpticalConfig) -> None:
    """Test that repeated steps on one fixed batch cut its loss fivefold."""
    tiny_train_config.lr_mask = 0.0
    state, pupil, spec = new_state(tiny_train_config, small_optics)
    batch = sample_batch(tiny_train_config, 2, pupil, state.mask, spec, stream=1)
    for _ in range(200):
        state, _ = train_step(state, batch, tiny_train_config, pupil, spec)
    assert state.history[-1] * 5 <= state.history[0]


@pytest.fixture(scope="module")
def toy_runs() -> dict[str, tuple[PhaseMask, DecoderParams, list[float]]]:
    """2000-step runs on a 32×32 pupil: learned mask and frozen flat mask, same seed."""
    optics = OpticalConfig(pupil_samples=32, axial_range=1000.0)
    cfg = TrainConfig(emitters_per_frame=(1, 5), axial_range=1000.0, steps=2000, checkpoint_every=1000, seed=2)
    frozen = replace(cfg, lr_mask=0.0, mask_init="flat")
    return {"learned": learn_psf(cfg, optics), "flat": learn_psf(frozen, optics)}


@pytest.mark.slow
@pytest.mark.acceptance
def test_toy_run_cuts_loss(toy_runs: dict[str, tuple[PhaseMask, DecoderParams, list[float]]]) -> None:
    """Test that a toy run ends below a fifth of its starting loss."""
    history = toy_runs["learned"][2]
    assert len(history) == 2000
    assert np.mean(history[-50:]) < 0.2 * np.mean(history[:10])


@pytest.mark.slow
@pytest.mark.acceptance
def test_learned_mask_beats_flat_mask(toy_runs: dict[str, tuple[PhaseMask, DecoderParams, list[float]]]) -> None:
    """Test held-out Jaccard of the learned mask against the flat mask."""
    optics = OpticalConfig(pupil_samples=32, axial_range=1000.0)
    pupil = build_pupil(optics)
    cfg = TrainConfig(emitters_per_frame=(1, 5), axial_range=1000.0, batch_size=50)
    spec = grid_spec_for(cfg, optics)
    scores = {}
    for name, (mask, decoder, _) in toy_runs.items():
        held_out = sample_batch(cfg, 999, pupil, mask, spec)
        truth = LocalizationList.concatenate(
            LocalizationList.from_emitters(emitters, frame=i) for i, emitters in enumerate(held_out.emitters)
        )
        scores[name] = evaluate_decoder(decoder, held_out.frames, truth, spec).jaccard
    assert scores["learned"] > scores["flat"]
