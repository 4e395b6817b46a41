import json
import sys
from pathlib import Path
from unittest.mock import patch

import pytest
import yaml
from pytest_mock import MockerFixture

from src.codesign import GradcheckEntry, GradcheckReport
from src.main import GRADCHECK_TOLERANCE, main, parse_arguments
from src.storage import MANIFEST_NAME, RunManifest, load_localizations


@pytest.fixture
def tiny_config(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Small optics and a 20×20-pixel scene, run from a scratch directory."""
    for name in ("SMLM_LOG_LEVEL", "SMLM_LOG_FILE", "SMLM_SEED", "SMLM_THREADS", "SMLM_OUT"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
    config_data = {
        "paths": {"logs": "logs", "runs": "runs", "datasets": "datasets"},
        "logging": {"level": "WARNING", "file_logging_enabled": False},
        "run": {"seed": 3, "threads": 1, "out": "runs"},
        "optics": {"pupil_samples": 16, "axial_range": 1000.0, "mask_zernike": [[5, 1.0]]},
        "scene": {
            "kind": "uniform",
            "fov_um": [2.2, 2.2],
            "axial_range": 800.0,
            "count": 2,
            "frames": 2,
            "photons": [20000.0, 20000.0],
            "background": 10.0,
            "min_separation": 600.0,
        },
        "mp": {"max_emitters": 4, "photon_threshold": 2000.0, "z_step": 100.0},
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.dump(config_data), encoding="utf-8")
    return path


def test_parse_arguments_defaults() -> None:
    """Test argument parsing with defaults."""
    with patch.object(sys, "argv", ["smlm", "crlb"]):
        args = parse_arguments()
    assert args.config == "config.yaml"
    assert args.out is None
    assert args.seed is None
    assert (args.photons, args.background, args.z_step) == (30000.0, 150.0, 100.0)
    assert not args.optimize


def test_parse_arguments_custom() -> None:
    """Test global flags ahead of a subcommand and its own options."""
    args = parse_arguments(
        ["--config", "custom.yaml", "--seed", "5", "--threads", "4", "-o", "out"]
        + ["localize", "data", "--method", "decoder"]
    )
    assert (args.config, args.seed, args.threads, args.out) == ("custom.yaml", 5, 4, "out")
    assert (args.command, args.dataset, args.method) == ("localize", "data", "decoder")


def test_parse_arguments_needs_command() -> None:
    """Test that a subcommand is required."""
    with pytest.raises(SystemExit):
        parse_arguments([])


def test_gradcheck_tolerance_default() -> None:
    """Test the audit tolerance default."""
    assert parse_arguments(["gradcheck"]).tolerance == GRADCHECK_TOLERANCE


def test_missing_config_exits_2(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    """Test that a missing config file is a usage error."""
    monkeypatch.chdir(tmp_path)
    assert main(["--config", "missing.yaml", "crlb"]) == 2


def test_invalid_threads_exits_2(tiny_config: Path) -> None:
    """Test that a zero thread count is a configuration error."""
    assert main(["--config", str(tiny_config), "--threads", "0", "crlb"]) == 2


def test_missing_input_exits_2(tiny_config: Path) -> None:
    """Test that an input file that does not exist is a usage error."""
    assert main(["--config", str(tiny_config), "evaluate", "gt.csv", "pred.csv"]) == 2


def test_corrupt_input_exits_3(tiny_config: Path, tmp_path: Path) -> None:
    """Test that an input without its sidecar is a data error."""
    (tmp_path / "gt.csv").write_text("frame,x_nm,y_nm,z_nm,photons\n", encoding="utf-8")
    assert main(["--config", str(tiny_config), "evaluate", "gt.csv", "gt.csv"]) == 3


def test_failed_gradcheck_exits_4(tiny_config: Path, tmp_path: Path, mocker: MockerFixture) -> None:
    """Test that an audit above tolerance is a numerical error."""
    report = GradcheckReport([GradcheckEntry("mask_gradient", (3, 4), 1.0, 1.5)])
    mocked = mocker.patch("src.main.gradcheck", return_value=report)
    out = tmp_path / "audit"
    assert main(["--config", str(tiny_config), "-o", str(out), "gradcheck", "--samples", "2"]) == 4
    mocked.assert_called_once_with(seed=3, samples=2)
    entries = json.loads((out / "gradcheck.json").read_text(encoding="utf-8"))["entries"]
    assert entries[0]["audit"] == "mask_gradient"


def test_passing_gradcheck_exits_0(tiny_config: Path, tmp_path: Path, mocker: MockerFixture) -> None:
    """Test that an audit within tolerance succeeds and records a manifest."""
    report = GradcheckReport([GradcheckEntry("end_to_end", (0,), 1.0, 1.0 + 1e-6)])
    mocker.patch("src.main.gradcheck", return_value=report)
    out = tmp_path / "audit"
    assert main(["--config", str(tiny_config), "-o", str(out), "gradcheck"]) == 0
    assert RunManifest.load(out).details["max_rel_error"] < GRADCHECK_TOLERANCE


def test_interrupt_and_unexpected_errors(tiny_config: Path, mocker: MockerFixture) -> None:
    """Test the exit codes of an interrupt and of an unexpected exception."""
    mocker.patch.dict("src.main.COMMANDS", {"crlb": mocker.Mock(side_effect=KeyboardInterrupt)})
    assert main(["--config", str(tiny_config), "crlb"]) == 130
    mocker.patch.dict("src.main.COMMANDS", {"crlb": mocker.Mock(side_effect=RuntimeError("boom"))})
    assert main(["--config", str(tiny_config), "crlb"]) == 1


def test_seed_flag_reaches_command(tiny_config: Path, mocker: MockerFixture) -> None:
    """Test that --seed takes precedence over SMLM_SEED and the config."""
    command = mocker.Mock(return_value=0)
    mocker.patch.dict("src.main.COMMANDS", {"crlb": command})
    with patch.dict("os.environ", {"SMLM_SEED": "11"}):
        assert main(["--config", str(tiny_config), "--seed", "42", "crlb"]) == 0
        ctx = command.call_args.args[0]
        assert ctx.seed == 42
        assert main(["--config", str(tiny_config), "crlb"]) == 0
        assert command.call_args.args[0].seed == 11
    assert ctx.out == Path("runs") / "crlb"


def test_crlb_command(tiny_config: Path, tmp_path: Path) -> None:
    """Test the CRLB sweep with the configured astigmatic mask."""
    out = tmp_path / "bound"
    code = main(["--config", str(tiny_config), "-o", str(out), "crlb", "--z-step", "250", "--background", "10"])
    assert code == 0
    lines = (out / "crlb.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1 + 5
    manifest = RunManifest.load(out)
    assert manifest.details["mask"] == {"zernike": [[5, 1.0]]}
    assert "crlb.csv" in manifest.outputs


@pytest.mark.integration
def test_simulate_localize_evaluate(tiny_config: Path, tmp_path: Path) -> None:
    """Test a dataset through matching pursuit into an evaluation report."""
    config = ["--config", str(tiny_config)]
    dataset = tmp_path / "datasets" / "tiny"
    assert main([*config, "-o", str(dataset), "simulate"]) == 0
    assert (dataset / MANIFEST_NAME).exists()
    truth = load_localizations(dataset / "ground_truth.csv")
    assert truth.frame.tolist() == [0, 0, 1, 1]

    located = tmp_path / "located"
    assert main([*config, "-o", str(located), "localize", str(dataset)]) == 0
    found = load_localizations(located / "localizations.csv")
    assert set(found.frame.tolist()) <= {0, 1}

    scored = tmp_path / "scored"
    code = main(
        [*config, "-o", str(scored), "evaluate", str(dataset / "ground_truth.csv"), str(located / "localizations.csv")]
    )
    assert code == 0
    summary = json.loads((scored / "report.json").read_text(encoding="utf-8"))
    assert summary["tp"] + summary["fn"] == 4
    assert 0.0 <= summary["jaccard"] <= 1.0
    assert summary["threshold"] == 150.0


@pytest.mark.integration
def test_density_sweep_writes_one_dataset_per_count(tiny_config: Path, tmp_path: Path) -> None:
    """Test that a sweep writes one dataset per count and a listing manifest."""
    out = tmp_path / "sweep"
    config = tiny_config.read_text(encoding="utf-8")
    data = yaml.safe_load(config)
    data["scene"].update({"count": None, "frames": 1, "min_separation": 0.0, "sweep": [1, 3, 3]})
    tiny_config.write_text(yaml.dump(data), encoding="utf-8")

    assert main(["--config", str(tiny_config), "-o", str(out), "simulate", "--density-sweep"]) == 0
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["density_001", "density_002", "density_003"]
    assert RunManifest.load(out).details["counts"] == [1, 2, 3]


@pytest.mark.integration
def test_reruns_are_byte_identical(tiny_config: Path, tmp_path: Path) -> None:
    """Test that one config and seed reproduce datasets and localizations byte for byte."""
    config = ["--config", str(tiny_config)]
    for name in ("a", "b"):
        assert main([*config, "-o", str(tmp_path / name / "data"), "simulate"]) == 0
        assert main([*config, "-o", str(tmp_path / name / "locs"), "localize", str(tmp_path / name / "data")]) == 0

    for relative in ("data/frames.bin", "data/ground_truth.csv", "data/mask.bin", "locs/localizations.csv"):
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()
    assert RunManifest.load(tmp_path / "a" / "data").outputs == RunManifest.load(tmp_path / "b" / "data").outputs
