import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from src import __version__
from src.codesign import decoder_localize, design_mask_crlb, gradcheck, learn_psf
from src.config import Config, parse_pairs
from src.decoder import DecoderParams
from src.errors import CheckpointMismatchError, ConfigurationError, DataError, NumericalError, exit_code_for
from src.grid3d import GridSpec, LocalizationList
from src.logger import AppLogger
from src.metrics import EvaluationRow, crlb_sweep, density_correlation, evaluate
from src.mp import build_dictionary, calibrate_correlation_threshold, mp_localize
from src.optics import OpticalConfig, PhaseMask, PupilGrid, build_pupil
from src.plots import build_crlb_plot, build_loss_plot
from src.render import regenerate_frames, render_ash, save_overlay, save_png16
from src.scenes import density_sweep_counts, simulate_frames, with_count
from src.state.train_state import TrainState
from src.storage import (
    Dataset,
    DatasetStore,
    RunManifest,
    canonical_json,
    load_decoder,
    load_localizations,
    load_mask,
    save_crlb_sweep,
    save_frames,
    save_localizations,
    save_mask,
    save_report,
    write_dataset,
)
from src.workers import run_frames
from src.zernike import zernike_mask

console = Console()
GRADCHECK_TOLERANCE = 1e-3


class RunContext:
    """Settings shared by every subcommand after flags and environment are merged."""

    def __init__(self, args: argparse.Namespace, config: Config) -> None:
        run = config.get_run_settings()
        self.args = args
        self.config = config
        self.seed: int = args.seed if args.seed is not None else run["seed"]
        self.threads: int = args.threads if args.threads is not None else run["threads"]
        if self.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        self.out = Path(args.out) if args.out else Path(run["out"]) / args.command
        self.started = time.perf_counter()

    def manifest(
        self,
        inputs: Sequence[str] = (),
        seeds: Optional[Dict[str, int]] = None,
        details: Optional[Dict[str, Any]] = None,
    ) -> RunManifest:
        return RunManifest(
            command=self.args.command,
            config_hash=self.config.config_hash(),
            seeds=seeds if seeds is not None else {"seed": self.seed},
            inputs=[str(p) for p in inputs],
            details=dict(details or {}),
        )

    def finish(self, manifest: RunManifest, directory: Path) -> Path:
        manifest.wall_time = time.perf_counter() - self.started
        manifest.record_outputs(directory)
        return manifest.save(directory)


def _check_optics(found: OpticalConfig, expected: OpticalConfig, what: str) -> None:
    if found.to_dict() != expected.to_dict():
        raise CheckpointMismatchError(
            f"{what} was built for optics {found.to_dict()}, expected {expected.to_dict()}"
        )


def _resolve_mask(
    ctx: RunContext, optics: OpticalConfig, pupil: PupilGrid
) -> Tuple[PhaseMask, Dict[str, Any]]:
    """Mask from --mask, else --zernike, else the configured coefficients, else flat."""
    args = ctx.args
    if getattr(args, "mask", None):
        mask, mask_optics = load_mask(args.mask)
        _check_optics(mask_optics, optics, f"mask {args.mask}")
        return mask, {"file": str(args.mask)}
    pairs = parse_pairs(args.zernike) if getattr(args, "zernike", None) else ctx.config.get_mask_zernike()
    if pairs:
        return zernike_mask(pairs, optics, pupil), {"zernike": [list(p) for p in pairs]}
    return PhaseMask.flat(pupil), {"flat": True}


def _print_plot(lines: List[str]) -> None:
    if lines:
        print("\n".join(lines))


def cmd_simulate(ctx: RunContext) -> int:
    args = ctx.args
    optics = ctx.config.get_optical_config()
    pupil = build_pupil(optics)
    spec = replace(ctx.config.get_scene_spec(), seed=ctx.seed)
    if args.kind:
        spec = replace(spec, kind=args.kind)
    if args.frames:
        spec = replace(spec, frames=args.frames)
    mask, mask_source = _resolve_mask(ctx, optics, pupil)

    sweep = spec.kind == "density-sweep" or args.density_sweep
    counts = density_sweep_counts(*spec.sweep) if sweep else [spec.resolved_count]
    written: List[str] = []
    for count in counts:
        scene = with_count(spec, count)
        target = ctx.out / f"density_{count:03d}" if sweep else ctx.out
        frames, truth = simulate_frames(scene, pupil, mask, threads=ctx.threads)
        manifest = ctx.manifest(
            details={
                "scene": scene.to_dict(),
                "count": count,
                "density": count / scene.area_um2,
                "mask": mask_source,
            },
        )
        manifest.wall_time = time.perf_counter() - ctx.started
        write_dataset(target, frames, truth, mask, optics, manifest)
        written.append(str(target))
        console.print(f"[green]dataset[/green] {target}: {len(frames)} frame(s), {count} emitters/FOV")

    if sweep:
        ctx.finish(ctx.manifest(details={"datasets": written, "counts": counts}), ctx.out)
    return 0


def _load_dataset(path: str) -> Dataset:
    directory = Path(path)
    return DatasetStore(directory.parent).load(directory)


def _load_decoder(path: str, dataset: Dataset) -> DecoderParams:
    """Decoder from a checkpoint directory or a bare ``decoder.bin``."""
    source = Path(path)
    if source.is_dir():
        state, optics = TrainState.load(source)
        _check_optics(optics, dataset.optics, f"checkpoint {source}")
        if not np.array_equal(state.mask.phase, dataset.mask.phase):
            AppLogger().logger.warning(f"checkpoint {source} was trained with a different mask than the dataset")
        return state.decoder
    return load_decoder(source, dataset.optics)


def _localize_dataset(ctx: RunContext, dataset: Dataset) -> LocalizationList:
    args = ctx.args
    frames = list(enumerate(dataset.frames))
    fn: Callable[[Tuple[int, Any]], LocalizationList]
    if args.method == "decoder":
        settings = ctx.config.get_decoder_settings()
        checkpoint = args.checkpoint or settings["checkpoint"]
        if not checkpoint:
            raise ConfigurationError("the decoder method needs --checkpoint")
        decoder = _load_decoder(checkpoint, dataset)
        height, width = dataset.frames[0].shape
        spec = GridSpec.for_frame(
            dataset.optics, height, width, decoder.depth * decoder.voxel_z, decoder.voxel_z
        )
        threshold = args.peak_threshold if args.peak_threshold is not None else settings["peak_threshold"]

        def decode(item: Tuple[int, Any]) -> LocalizationList:
            return decoder_localize(decoder, item[1], spec, threshold, settings["peak_radius"], item[0])

        fn = decode
    else:
        pupil = build_pupil(dataset.optics)
        dictionary = build_dictionary(pupil, dataset.mask, z_step=ctx.config.get_mp_z_step())
        mp_cfg = ctx.config.get_mp_config()
        if args.calibrate:
            first = dataset.frames[0]
            level = calibrate_correlation_threshold(dictionary, first.background, first.shape, seed=ctx.seed)
            mp_cfg = replace(mp_cfg, correlation_threshold=float(np.clip(level, 1e-6, 1.0)))
            console.print(f"calibrated correlation threshold: {mp_cfg.correlation_threshold:.4f}")

        def pursue(item: Tuple[int, Any]) -> LocalizationList:
            frame = item[1]
            background = frame.background if frame.background > 0 else None
            return mp_localize(frame, dictionary, mp_cfg, background, item[0])

        fn = pursue

    found = run_frames(fn, frames, ctx.threads)
    return LocalizationList.concatenate(found).sorted()


def cmd_localize(ctx: RunContext) -> int:
    dataset = _load_dataset(ctx.args.dataset)
    locs = _localize_dataset(ctx, dataset)
    save_localizations(ctx.out / "localizations.csv", locs)
    manifest = ctx.manifest(
        inputs=[ctx.args.dataset], details={"method": ctx.args.method, "count": len(locs)}
    )
    ctx.finish(manifest, ctx.out)
    console.print(f"{len(locs)} localizations in {len(dataset.frames)} frame(s) -> {ctx.out}")
    return 0


def _summary(row: EvaluationRow, settings: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "jaccard": row.jaccard,
        "jaccard_2dp": f"{row.jaccard:.2f}",
        "rmse_lateral_nm": row.rmse_lateral,
        "rmse_axial_nm": row.rmse_axial,
        "tp": row.tp,
        "fp": row.fp,
        "fn": row.fn,
        **settings,
    }


def _report_table(rows: Sequence[EvaluationRow]) -> Table:
    table = Table(title="evaluation")
    for column in ("density", "jaccard", "RMSE lat (nm)", "RMSE ax (nm)", "TP", "FP", "FN"):
        table.add_column(column, justify="right")
    for r in rows:
        table.add_row(
            f"{r.density:.4g}",
            f"{r.jaccard:.2f}",
            "-" if r.rmse_lateral is None else f"{r.rmse_lateral:.1f}",
            "-" if r.rmse_axial is None else f"{r.rmse_axial:.1f}",
            str(r.tp),
            str(r.fp),
            str(r.fn),
        )
    return table


def _evaluation_settings(ctx: RunContext) -> Dict[str, Any]:
    settings = dict(ctx.config.get_evaluation_settings())
    if ctx.args.threshold is not None:
        settings["threshold"] = ctx.args.threshold
    if ctx.args.lateral_only:
        settings["lateral_only"] = True
    if ctx.args.min_photons is not None:
        settings["min_photons"] = ctx.args.min_photons
    return settings


def cmd_evaluate(ctx: RunContext) -> int:
    args = ctx.args
    settings = _evaluation_settings(ctx)
    gt = load_localizations(args.gt)
    pred = load_localizations(args.pred)
    row = evaluate(
        gt, pred, float(settings["threshold"]), bool(settings["lateral_only"]), float(settings["min_photons"])
    )
    save_report(ctx.out / "report.csv", [row], _summary(row, settings))
    ctx.finish(ctx.manifest(inputs=[args.gt, args.pred]), ctx.out)
    console.print(_report_table([row]))
    return 0


def cmd_learn_psf(ctx: RunContext) -> int:
    args = ctx.args
    optics = ctx.config.get_optical_config()
    cfg = replace(ctx.config.get_train_config(), threads=ctx.threads)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)

    init_mask: Optional[PhaseMask] = None
    if args.init_mask:
        init_mask, mask_optics = load_mask(args.init_mask)
        _check_optics(mask_optics, optics, f"initial mask {args.init_mask}")
    seeds = args.seeds or [ctx.seed]
    if args.resume and len(seeds) > 1:
        raise ConfigurationError("--resume continues a single run; pass one seed")

    for seed in seeds:
        run_dir = ctx.out / f"seed_{seed}" if len(seeds) > 1 else ctx.out
        resume: Optional[TrainState] = None
        if args.resume:
            resume, resume_optics = TrainState.load(args.resume)
            _check_optics(resume_optics, optics, f"checkpoint {args.resume}")
            seed = resume.seed
        run_cfg = replace(cfg, seed=seed)

        with Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            task = progress.add_task(f"seed {seed}", total=run_cfg.steps, completed=resume.step if resume else 0)

            def on_step(step: int, loss: float) -> None:
                progress.update(task, completed=step, description=f"seed {seed} loss {loss:.4g}")

            _, _, history = learn_psf(run_cfg, optics, run_dir, init_mask, resume, on_step)

        manifest = ctx.manifest(
            inputs=[p for p in (args.init_mask, args.resume) if p],
            seeds={"seed": seed},
            details={"train_config": run_cfg.to_dict(), "final_loss": history[-1] if history else None},
        )
        ctx.finish(manifest, run_dir)
        _print_plot(build_loss_plot(history))

    if len(seeds) > 1:
        ctx.finish(ctx.manifest(seeds={f"seed_{s}": s for s in seeds}), ctx.out)
    return 0


def cmd_gradcheck(ctx: RunContext) -> int:
    report = gradcheck(seed=ctx.seed, samples=ctx.args.samples)
    table = Table(title="gradient audit")
    table.add_column("audit")
    table.add_column("entries", justify="right")
    table.add_column("max rel. error", justify="right")
    for audit in report.audits():
        count = sum(1 for e in report.entries if e.audit == audit)
        table.add_row(audit, str(count), f"{report.max_error(audit):.2e}")
    console.print(table)

    ctx.out.mkdir(parents=True, exist_ok=True)
    entries = [
        {
            "audit": e.audit,
            "index": list(e.index),
            "analytic": e.analytic,
            "numeric": e.numeric,
            "rel_error": e.rel_error,
        }
        for e in report.entries
    ]
    (ctx.out / "gradcheck.json").write_text(canonical_json({"entries": entries}), encoding="utf-8")
    worst = report.max_error()
    ctx.finish(ctx.manifest(details={"max_rel_error": worst, "tolerance": ctx.args.tolerance}), ctx.out)
    if worst > ctx.args.tolerance:
        failing = max(report.entries, key=lambda e: e.rel_error)
        raise NumericalError(
            f"gradient audit failed: {failing.audit} at {failing.index} has relative error {worst:.2e}",
            parameter=failing.audit,
        )
    return 0


def cmd_crlb(ctx: RunContext) -> int:
    args = ctx.args
    optics = ctx.config.get_optical_config()
    pupil = build_pupil(optics)
    half = optics.axial_range / 2.0
    z_min = args.z_min if args.z_min is not None else -half
    z_max = args.z_max if args.z_max is not None else half
    zs = np.arange(z_min, z_max + 0.5 * args.z_step, args.z_step)
    mask, mask_source = _resolve_mask(ctx, optics, pupil)
    details: Dict[str, Any] = {"mask": mask_source, "photons": args.photons, "background": args.background}

    if args.optimize:
        design_zs = np.linspace(z_min, z_max, args.design_samples)
        design = design_mask_crlb(
            args.basis,
            design_zs,
            args.photons,
            args.background,
            optics,
            iterations=args.iterations,
            seed=ctx.seed,
        )
        mask = design.mask
        save_mask(ctx.out / "mask.bin", mask, optics)
        (ctx.out / "crlb_design.json").write_text(
            canonical_json(
                {
                    "coefficients": [list(c) for c in design.coefficients],
                    "objective": design.objective,
                    "initial_objective": design.initial_objective,
                    "history": design.history,
                }
            ),
            encoding="utf-8",
        )
        details["objective"] = design.objective
        console.print(f"CRLB design: objective {design.initial_objective:.4g} -> {design.objective:.4g}")

    sweep = crlb_sweep(pupil, mask, zs, args.photons, args.background)
    save_crlb_sweep(ctx.out / "crlb.csv", sweep)
    details["degenerate_z"] = [z for z, report in sweep if report is None]
    ctx.finish(ctx.manifest(inputs=[args.mask] if args.mask else [], details=details), ctx.out)
    _print_plot(build_crlb_plot(sweep))
    return 0


def cmd_render(ctx: RunContext) -> int:
    args = ctx.args
    settings = ctx.config.get_render_settings()
    locs = load_localizations(args.localizations)
    inputs = [args.localizations]

    dataset: Optional[Dataset] = None
    if args.dataset:
        dataset = _load_dataset(args.dataset)
        inputs.append(args.dataset)
    optics = dataset.optics if dataset else ctx.config.get_optical_config()
    extent = None
    if dataset is not None:
        height, width = dataset.frames[0].shape
        extent = (width * optics.camera_pixel, height * optics.camera_pixel)

    render_ash(
        locs,
        ctx.out / "ash.png",
        bin_nm=args.bin if args.bin is not None else float(settings["bin_nm"]),
        shifts=args.shifts if args.shifts is not None else int(settings["shifts"]),
        axial_range=optics.axial_range,
        colormap=args.colormap or settings["colormap"],
        extent=extent,
    )

    if args.regenerate:
        if dataset is None:
            raise ConfigurationError("--regenerate needs --dataset for the mask, optics and frame size")
        regenerated = regenerate_frames(
            locs,
            build_pupil(optics),
            dataset.mask,
            dataset.frames[0].shape,
            frames=[args.frame] if args.frame is not None else None,
            uniform_photons=args.uniform_photons,
        )
        if not regenerated:
            raise DataError("no frames to regenerate")
        save_frames(ctx.out / "regenerated.bin", regenerated)
        for frame in regenerated:
            index = int(frame.metadata["frame"])
            save_png16(ctx.out / f"regenerated_{index:04d}.png", frame.pixels)
            if 0 <= index < len(dataset.frames):
                save_overlay(ctx.out / f"overlay_{index:04d}.png", dataset.frames[index], frame)

    ctx.finish(ctx.manifest(inputs=inputs), ctx.out)
    console.print(f"render written to {ctx.out}")
    return 0


def cmd_benchmark(ctx: RunContext) -> int:
    args = ctx.args
    root = Path(args.datasets or ctx.config.get_path("datasets"))
    store = DatasetStore(root)
    directories = store.list_datasets()
    if not directories:
        raise DataError(f"no datasets found below {root}")
    settings = _evaluation_settings(ctx)

    rows: List[EvaluationRow] = []
    for directory in directories:
        dataset = store.load(directory)
        locs = _localize_dataset(ctx, dataset)
        save_localizations(ctx.out / f"localizations_{directory.name}.csv", locs)
        rows.append(
            evaluate(
                dataset.ground_truth,
                locs,
                float(settings["threshold"]),
                bool(settings["lateral_only"]),
                float(settings["min_photons"]),
                density=float(dataset.manifest.details.get("density", 0.0)),
            )
        )
    rows.sort(key=lambda r: r.density)
    correlation = density_correlation(rows)
    summary = {
        "method": args.method,
        "datasets": [str(d) for d in directories],
        "density_jaccard_spearman": correlation,
        **settings,
    }
    save_report(ctx.out / "report.csv", rows, summary)
    ctx.finish(ctx.manifest(inputs=[str(d) for d in directories], details=summary), ctx.out)
    console.print(_report_table(rows))
    if correlation is not None:
        console.print(f"Spearman(density, jaccard) = {correlation:.3f}")
    return 0


COMMANDS: Dict[str, Callable[[RunContext], int]] = {
    "simulate": cmd_simulate,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
    "learn-psf": cmd_learn_psf,
    "gradcheck": cmd_gradcheck,
    "crlb": cmd_crlb,
    "render": cmd_render,
    "benchmark": cmd_benchmark,
}


def _add_mask_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mask", help="Phase mask file (mask.bin)")
    parser.add_argument("--zernike", nargs="+", metavar="NOLL=RAD", help="Mask from Zernike coefficients")


def _add_evaluation_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threshold", type=float, help="Match distance in nm (default: 150)")
    parser.add_argument("--lateral-only", action="store_true", help="Match on x, y only")
    parser.add_argument("--min-photons", type=float, help="Ignore entries below this photon count")


def _add_localize_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=["mp", "decoder"], default="mp")
    parser.add_argument("--checkpoint", help="Checkpoint directory or decoder.bin for --method decoder")
    parser.add_argument("--peak-threshold", type=float, help="Grid peak threshold for the decoder")
    parser.add_argument("--calibrate", action="store_true", help="Calibrate the MP correlation threshold first")


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="smlm", description="3D localization microscopy simulation, localization and PSF design"
    )
    parser.add_argument("--config", "-c", default="config.yaml", help="Path to config file (default: config.yaml)")
    parser.add_argument("--seed", type=int, help="Base seed (overrides SMLM_SEED and run.seed)")
    parser.add_argument("--threads", type=int, help="Worker threads for frame-parallel steps")
    parser.add_argument("--out", "-o", help="Output directory (default: <run.out>/<command>)")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="Write a synthetic dataset")
    simulate.add_argument("--kind", choices=["uniform", "ellipsoid", "nucleus", "density-sweep"])
    simulate.add_argument("--frames", type=int, help="Frames per dataset")
    simulate.add_argument("--density-sweep", action="store_true", help="One dataset per sweep density")
    _add_mask_options(simulate)

    localize = sub.add_parser("localize", help="Localize the frames of a dataset")
    localize.add_argument("dataset", help="Dataset directory")
    _add_localize_options(localize)

    evaluate_parser = sub.add_parser("evaluate", help="Score predictions against ground truth")
    evaluate_parser.add_argument("gt", help="Ground-truth localization CSV")
    evaluate_parser.add_argument("pred", help="Predicted localization CSV")
    _add_evaluation_options(evaluate_parser)

    learn = sub.add_parser("learn-psf", help="Jointly train the phase mask and decoder")
    learn.add_argument("--steps", type=int, help="Override training.steps")
    learn.add_argument("--init-mask", help="Start from this mask file")
    learn.add_argument("--seeds", type=int, nargs="+", help="Independent runs, written to seed_<s>/")
    learn.add_argument("--resume", help="Continue from a checkpoint directory")

    check = sub.add_parser("gradcheck", help="Finite-difference audit of every gradient")
    check.add_argument("--samples", type=int, default=10, help="Entries per audit")
    check.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)

    bound = sub.add_parser("crlb", help="CRLB sweep over z, optionally designing the mask first")
    _add_mask_options(bound)
    bound.add_argument("--photons", type=float, default=30000.0)
    bound.add_argument("--background", type=float, default=150.0)
    bound.add_argument("--z-min", type=float)
    bound.add_argument("--z-max", type=float)
    bound.add_argument("--z-step", type=float, default=100.0)
    bound.add_argument("--optimize", action="store_true", help="Design a mask by minimizing the CRLB")
    bound.add_argument("--basis", type=int, default=10, help="Zernike modes used by --optimize")
    bound.add_argument("--iterations", type=int, default=30)
    bound.add_argument("--design-samples", type=int, default=9, help="z samples in the design objective")

    render = sub.add_parser("render", help="Average shifted histogram render of localizations")
    render.add_argument("localizations", help="Localization CSV")
    render.add_argument("--bin", type=float, help="Histogram bin in nm (default: 20)")
    render.add_argument("--shifts", type=int, help="Shifts per axis (default: 4)")
    render.add_argument("--colormap", help="r,g,b table with 256 rows")
    render.add_argument("--dataset", help="Dataset the localizations came from")
    render.add_argument("--regenerate", action="store_true", help="Render localizations back into camera frames")
    render.add_argument("--frame", type=int, help="Regenerate only this frame")
    render.add_argument("--uniform-photons", type=float, help="Photon count used for every regenerated emitter")

    bench = sub.add_parser("benchmark", help="Localize and score every dataset below a root")
    bench.add_argument("--datasets", help="Root directory (default: paths.datasets)")
    _add_localize_options(bench)
    _add_evaluation_options(bench)

    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = parse_arguments(argv)
    app_logger = AppLogger()

    try:
        config = Config(args.config)
        logging_settings = config.get_logging_settings()
        app_logger.set_level(args.log_level or logging_settings["level"])
        app_logger.setup_file_logging(config.get_path("logs"), logging_settings["file_logging_enabled"])

        ctx = RunContext(args, config)
        return COMMANDS[args.command](ctx)

    except FileNotFoundError as e:
        console.print(f"[red]Error:[/red] {e}")
        console.print("usage: smlm [--config PATH] [--seed N] [--threads N] [--out DIR] <command> ...")
        return exit_code_for(e)
    except KeyboardInterrupt as e:
        console.print("\nInterrupted.")
        return exit_code_for(e)
    except (ConfigurationError, DataError, NumericalError) as e:
        app_logger.logger.error(f"{type(e).__name__}: {e}")
        return exit_code_for(e)
    except json.JSONDecodeError as e:
        app_logger.logger.error(f"unreadable JSON: {e}")
        return exit_code_for(DataError(str(e)))
    except Exception as e:
        app_logger.logger.error(f"An error occurred: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
