import asyncio
from pathlib import Path

import numpy as np
import pytest

from src.codesign import TrainConfig
from src.grid3d import GridSpec, LocalizationList
from src.optics import Emitter, OpticalConfig, PhaseMask, PupilGrid, build_pupil
from src.storage import RunManifest, write_dataset
from src.zernike import zernike_mask


def pytest_collection_modifyitems(
    session: pytest.Session, config: pytest.Config, items: list[pytest.Item]
) -> None:
    """Add asyncio marks to async tests."""
    for item in items:
        if isinstance(item, pytest.Function) and asyncio.iscoroutinefunction(item.obj):
            item.add_marker(pytest.mark.asyncio(loop_scope="function"))


@pytest.fixture(scope="session")
def small_optics() -> OpticalConfig:
    """16-sample pupil: a 134×134 PSF window at 27.5 nm."""
    return OpticalConfig(pupil_samples=16, axial_range=1000.0)


@pytest.fixture(scope="session")
def pupil(small_optics: OpticalConfig) -> PupilGrid:
    return build_pupil(small_optics)


@pytest.fixture(scope="session")
def flat_mask(pupil: PupilGrid) -> PhaseMask:
    return PhaseMask.flat(pupil)


@pytest.fixture(scope="session")
def astigmatic_mask(pupil: PupilGrid, small_optics: OpticalConfig) -> PhaseMask:
    """Oblique astigmatism (Noll 5) of 1 rad."""
    return zernike_mask([(5, 1.0)], small_optics, pupil)


@pytest.fixture
def tiny_grid() -> GridSpec:
    return GridSpec(voxel_xy=27.5, voxel_z=33.0, dims=(8, 16, 16), origin=(0.0, 0.0, -132.0))


@pytest.fixture
def centred_emitter(small_optics: OpticalConfig) -> Emitter:
    """Single emitter at the centre of an 8×8 frame, in focus."""
    return Emitter(4 * small_optics.camera_pixel, 4 * small_optics.camera_pixel, 0.0, 5000.0)


@pytest.fixture
def tmp_dataset(
    tmp_path: Path, pupil: PupilGrid, astigmatic_mask: PhaseMask, small_optics: OpticalConfig
) -> Path:
    """Two 12×12 frames with two emitters each, written as a dataset directory."""
    from src.optics import apply_noise, render_noiseless

    pixel = small_optics.camera_pixel
    frames = []
    truth = []
    for index in range(2):
        emitters = [
            Emitter(3.5 * pixel, 4.2 * pixel, -100.0 + 50 * index, 20000.0),
            Emitter(8.3 * pixel, 7.6 * pixel, 150.0, 15000.0),
        ]
        expected = render_noiseless(pupil, astigmatic_mask, emitters, 12, 12)
        frames.append(apply_noise(expected, 10.0, rng_seed=index))
        truth.append(LocalizationList.from_emitters(emitters, frame=index))

    directory = tmp_path / "datasets" / "tiny"
    manifest = RunManifest(command="simulate", config_hash="test", seeds={"seed": 0})
    manifest.details["density"] = 2 / (12 * pixel / 1000.0) ** 2
    write_dataset(
        directory, frames, LocalizationList.concatenate(truth), astigmatic_mask, small_optics, manifest
    )
    return directory


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    """6×6-pixel frames, 5 slices of 100 nm, a three-channel decoder."""
    return TrainConfig(
        batch_size=2,
        emitters_per_frame=(1, 2),
        photon_range=(5000.0, 20000.0),
        background=10.0,
        lr_mask=0.05,
        lr_decoder=0.01,
        steps=4,
        axial_range=500.0,
        fov=(6, 6),
        voxel_z=100.0,
        checkpoint_every=2,
        decoder_channels=3,
        dilations=(1, 2),
        seed=21,
    )
