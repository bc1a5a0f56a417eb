from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from data.codecs import read_pnm, write_pfm
from data.connectors.directory import DirectoryConnector
from data.exports import depth_to_pointcloud, export_heatmap
from data.samples import DepthSample
from data.splits import DatasetSplit, split_dataset
from data.synthetic import generate_splits, shifted_scene_config
from ml.autodiff.tensor import Tensor, no_grad
from ml.config import (
    CameraIntrinsics,
    ExperimentConfig,
    FusionLocation,
    MixerKind,
    config_hash,
    dump_config,
    load_config,
)
from ml.errors import ConfigError, TEDepthError
from ml.evaluation.evaluate import (
    collect_predictions,
    ensemble_depth,
    evaluate_models,
    mixer_name,
    model_cost,
    predictor_name,
    range_rows,
)
from ml.evaluation.gradient_suite import run_gradcheck_suite, suite_passed
from ml.experiment_tracking import RunTracker
from ml.mixers.fusion import MixerModel, mixer_features
from ml.monitoring.diversity import DIVERSITY_COLUMNS, DiversityAnalyzer
from ml.predictors.toy import BasePredictorModel
from ml.reporting import (
    ABLATION_CSV,
    ABLATION_CSV_COLUMNS,
    DIVERSITY_CSV,
    RunManifest,
    emit_report,
    load_manifest,
    write_manifest,
    write_rows,
)
from ml.training.algorithm import (
    TrainedMixer,
    train_base_predictors,
    train_mixer,
)
from ml.training.checkpoint import load_mixer, load_predictor, save_mixer, save_predictor
from ml.utils.data import (
    SPLITS,
    dataset_dir,
    load_split,
    load_split_samples,
    save_split,
    save_split_samples,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

RESOLVED_CONFIG = "config.resolved.cfg"
CHECKPOINT_DIR = "checkpoints"
TRAINING_CSV = "training.csv"


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this CLI reserves 2 for runtime failures."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv(kind: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(text: str) -> List[Any]:
        try:
            return [kind(item.strip()) for item in text.split(",") if item.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"invalid list '{text}': {exc}") from exc

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment config file (key = value lines)")
    common.add_argument("--out", help="Output directory (overridden by TEDK_OUT)")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    parser = _ArgumentParser(
        prog="tedepth", description="Two-level depth ensemble: train, fuse, evaluate, export"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    sub.add_parser("synth", parents=[common], help="Generate the synthetic dataset")

    p = sub.add_parser("train-base", parents=[common], help="Train the base predictors")
    p.add_argument("--jobs", type=int, help="Concurrent predictor trainings")

    p = sub.add_parser("train-mixer", parents=[common], help="Train the mixer on frozen predictors")
    p.add_argument("--kind", choices=[k.value for k in MixerKind])
    p.add_argument("--location", choices=[loc.value for loc in FusionLocation])
    p.add_argument("--subset", type=_csv(int), help="Predictor indices, e.g. 0,2")
    p.add_argument("--order", type=_csv(int), help="Explicit fusion order over the subset")

    p = sub.add_parser("eval", parents=[common], help="Write metrics, range and diversity CSVs")
    p.add_argument("--split", choices=["test", "shifted"], default="test")
    p.add_argument("--caps", type=_csv(float), help="Depth band edges, e.g. 2,4,6,8,10")

    p = sub.add_parser("fuse", parents=[common], help="Run the trained ensemble on one image")
    p.add_argument("--input", type=Path, required=True, help="RGB image (binary PPM)")
    p.add_argument("--output", type=Path, required=True, help="Depth map (PFM)")

    p = sub.add_parser("gradcheck", parents=[common], help="Run the gradient-check suite")
    p.add_argument("--seeds", type=int, default=10)

    p = sub.add_parser("ablate", parents=[common], help="Sweep mixer kinds x locations x counts")
    p.add_argument("--mixers", type=_csv(MixerKind), help="e.g. uwf,cgf,cbf,rbf")
    p.add_argument("--locations", type=_csv(FusionLocation), help="e.g. pl,fl")
    p.add_argument("--counts", type=_csv(int), help="Predictor counts, e.g. 2,3")
    p.add_argument(
        "--seeds",
        type=int,
        default=0,
        help="Rerun the whole protocol in memory for seeds 0..N-1 instead of using checkpoints",
    )

    p = sub.add_parser("export-heatmap", parents=[common], help="PCA feature heatmap as PGM")
    p.add_argument("--sample", required=True)
    p.add_argument("--model", default="mixer", help="predictor_<i> or mixer")
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("export-pointcloud", parents=[common], help="Depth map as a PLY cloud")
    p.add_argument("--sample", required=True)
    p.add_argument("--source", choices=["gt", "mixer"], default="gt")
    p.add_argument("--output", type=Path, required=True)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {"output_dir": args.out}
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    if getattr(args, "kind", None):
        overrides["mixer.kind"] = args.kind
    if getattr(args, "location", None):
        overrides["mixer.location"] = args.location
    if getattr(args, "subset", None):
        overrides["mixer.subset"] = args.subset
    if getattr(args, "order", None):
        overrides["mixer.order"] = args.order
    if getattr(args, "caps", None):
        overrides["eval.caps"] = args.caps
    return overrides


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


# --- run directory helpers ----------------------------------------------------------------


def _prepare_run(cfg: ExperimentConfig) -> Tuple[Path, RunManifest]:
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / RESOLVED_CONFIG).write_text(dump_config(cfg), encoding="utf-8")
    manifest = load_manifest(run_dir) or RunManifest(
        run_id=cfg.run_name, config_hash=config_hash(cfg)
    )
    manifest.config_hash = config_hash(cfg)
    return run_dir, manifest


def _checkpoint_path(run_dir: Path, name: str) -> Path:
    return run_dir / CHECKPOINT_DIR / f"{name}.tedk"


def _relative(run_dir: Path, path: Path) -> str:
    return path.relative_to(run_dir).as_posix()


def _load_predictors(run_dir: Path) -> Tuple[List[BasePredictorModel], List[Dict[str, str]]]:
    paths = sorted(
        (run_dir / CHECKPOINT_DIR).glob("predictor_*.tedk"),
        key=lambda p: int(p.stem.split("_", 1)[1]),
    )
    if not paths:
        raise FileNotFoundError(f"No predictor checkpoints under {run_dir}; run train-base first")
    indices = [int(p.stem.split("_", 1)[1]) for p in paths]
    if indices != list(range(len(paths))):
        raise FileNotFoundError(f"Predictor checkpoints are not numbered 0..K-1: {indices}")
    loaded = [load_predictor(p) for p in paths]
    return [model for model, _ in loaded], [meta for _, meta in loaded]


def _load_trained_mixer(run_dir: Path) -> Tuple[Optional[MixerModel], List[int]]:
    path = _checkpoint_path(run_dir, "mixer")
    if not path.exists():
        return None, []
    mixer, meta = load_mixer(path)
    subset = [int(i) for i in meta.get("subset", "").split(",") if i]
    return mixer, subset or list(range(mixer.num_predictors))


def _intrinsics(cfg: ExperimentConfig, split: str) -> CameraIntrinsics:
    scene = cfg.scene
    if split == "shifted":
        scene = shifted_scene_config(cfg.scene, cfg.shift)
    return CameraIntrinsics.for_image(scene.height, scene.width, scene.focal_scale)


def _find_sample(run_dir: Path, sample_id: str) -> Tuple[DepthSample, str]:
    split = sample_id.split("_", 1)[0]
    if split not in SPLITS:
        raise ValueError(f"Sample id '{sample_id}' does not name a split ({', '.join(SPLITS)})")
    connector = DirectoryConnector(dataset_dir(run_dir, split))
    if sample_id not in connector.list_ids():
        raise ValueError(f"Sample '{sample_id}' is not in the {split} split")
    return connector.load_sample(sample_id), split


# --- subcommands --------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir, manifest = _prepare_run(cfg)
    train, test, shifted = generate_splits(cfg.scene, cfg.shift)
    save_split_samples(run_dir, "train", train)
    save_split_samples(run_dir, "test", test)
    if shifted:
        save_split_samples(run_dir, "shifted", shifted)
    split = split_dataset(train, seed=cfg.train.seed, test=test)
    save_split(run_dir, split)
    write_manifest(run_dir, manifest)
    logger.info(
        "Synthesized %d train (%d base / %d mixer), %d test, %d shifted samples in %s",
        len(train),
        len(split.train_base),
        len(split.train_mixer),
        len(test),
        len(shifted),
        run_dir,
    )
    return EXIT_OK


def _training_rows(name: str, history: Sequence[float]) -> List[Dict[str, Any]]:
    return [{"model": name, "epoch": i + 1, "loss": loss} for i, loss in enumerate(history)]


def cmd_train_base(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir, manifest = _prepare_run(cfg)
    samples = load_split_samples(run_dir, "train")
    split = load_split(run_dir)
    with RunTracker(cfg.tracking, run_dir) as tracker:
        params = {"predictors": len(cfg.predictor), **cfg.train.model_dump(exclude={"loss"})}
        tracker.start_training_run("train-base", params)
        trained = train_base_predictors(split, samples, cfg.predictor, cfg, jobs=cfg.jobs)
        rows = []
        for result in trained:
            name = predictor_name(result.index)
            path = save_predictor(
                _checkpoint_path(run_dir, name),
                result.model,
                {
                    "initial_loss": repr(result.initial_loss),
                    "final_loss": repr(result.final_loss),
                    "val_rmse": repr(result.val_rmse),
                    "epochs": str(len(result.loss_history)),
                },
            )
            manifest.checkpoints[name] = _relative(run_dir, path)
            rows.extend(_training_rows(name, result.loss_history))
            for epoch, loss in enumerate(result.loss_history):
                tracker.log_epoch(epoch, {f"{name}.loss": loss})
            tracker.log_artifact(path)
    write_rows(run_dir / TRAINING_CSV, rows, ["model", "epoch", "loss"])
    manifest.csvs["training"] = TRAINING_CSV
    write_manifest(run_dir, manifest)
    return EXIT_OK


def _save_trained_mixer(run_dir: Path, manifest: RunManifest, result: TrainedMixer) -> Path:
    path = save_mixer(
        _checkpoint_path(run_dir, "mixer"),
        result.mixer,
        {
            "subset": ",".join(str(i) for i in result.subset),
            "initial_loss": repr(result.initial_loss),
            "final_loss": repr(result.final_loss),
            "selected_epoch": str(result.selected_epoch),
            "holdout_rmse": repr(result.holdout_rmse),
        },
    )
    manifest.checkpoints["mixer"] = _relative(run_dir, path)
    return path


def cmd_train_mixer(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir, manifest = _prepare_run(cfg)
    models, metas = _load_predictors(run_dir)
    samples = load_split_samples(run_dir, "train")
    test = load_split_samples(run_dir, "test")
    split = load_split(run_dir)
    val_rmse = None
    if all("val_rmse" in meta for meta in metas):
        val_rmse = [float(meta["val_rmse"]) for meta in metas]
    with RunTracker(cfg.tracking, run_dir) as tracker:
        tracker.start_training_run("train-mixer", cfg.mixer.model_dump(mode="json"))
        result = train_mixer(models, split, samples, cfg, val_rmse=val_rmse, test_samples=test)
        for epoch, loss in enumerate(result.loss_history):
            tracker.log_epoch(epoch, {"mixer.loss": loss})
        if result.test_report is not None:
            tracker.log_report(mixer_name(result.mixer), result.test_report)
        tracker.log_artifact(_save_trained_mixer(run_dir, manifest, result))
    write_manifest(run_dir, manifest)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir, manifest = _prepare_run(cfg)
    models, _ = _load_predictors(run_dir)
    mixer, subset = _load_trained_mixer(run_dir)
    samples = load_split_samples(run_dir, args.split)
    predictions = collect_predictions(models, mixer, samples, subset)
    reports = evaluate_models(models, mixer, samples, cfg, subset, predictions=predictions)

    manifest.split = args.split
    manifest.reports = {}
    manifest.params = {}
    params = {predictor_name(i): model.params.count() for i, model in enumerate(models)}
    if mixer is not None:
        params[mixer_name(mixer)] = mixer.params.count()
    for name, report in reports.items():
        manifest.add_report(name, report, params[name])
    manifest.ranges = [
        {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()}
        for row in range_rows(predictions, cfg.eval.caps, cfg.eval.min_depth)
    ]
    if not manifest.ranges:
        manifest.csvs.pop("ranges", None)
    emit_report(manifest, run_dir)

    rows, _ = DiversityAnalyzer().compare(predictions)
    write_rows(run_dir / DIVERSITY_CSV, rows, DIVERSITY_COLUMNS)
    manifest.csvs["diversity"] = DIVERSITY_CSV
    write_manifest(run_dir, manifest)

    with RunTracker(cfg.tracking, run_dir) as tracker:
        tracker.start_training_run(f"eval-{args.split}")
        for name, report in reports.items():
            tracker.log_report(name, report)
    for name, report in reports.items():
        logger.info(
            "%s: abs_rel %.4f rmse %.4f d1 %.4f", name, report.abs_rel, report.rmse, report.delta1
        )
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir = cfg.run_dir
    models, _ = _load_predictors(run_dir)
    mixer, subset = _load_trained_mixer(run_dir)
    if mixer is None:
        raise FileNotFoundError(f"No mixer checkpoint under {run_dir}; run train-mixer first")
    rgb = read_pnm(args.input)
    if rgb.shape[0] != 3:
        raise ValueError(f"{args.input} is not a color image")
    depth = ensemble_depth(models, mixer, rgb[None], subset)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(args.output, depth[0])
    logger.info("Wrote fused depth %s", args.output)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    reports = run_gradcheck_suite(seeds=range(args.seeds))
    for report in reports:
        status = "ok" if report.passed else "FAIL"
        print(f"{report.name:48s} {report.max_rel_error:.3e} {status}")
    failed = sum(1 for r in reports if not r.passed)
    logger.info("%d gradient checks, %d failed", len(reports), failed)
    return EXIT_OK if suite_passed(reports) else EXIT_FAILURE


def _ablation_rows(
    seed: int,
    models: Sequence[BasePredictorModel],
    val_rmse: Sequence[float],
    split: DatasetSplit,
    train: Sequence[DepthSample],
    test: Sequence[DepthSample],
    cfg: ExperimentConfig,
    kinds: Sequence[MixerKind],
    locations: Sequence[FusionLocation],
    counts: Sequence[int],
) -> List[Dict[str, Any]]:
    height, width = test[0].depth.shape[-2:]
    base = evaluate_models(models, None, test, cfg)
    rows = []
    for count in counts:
        if not 1 <= count <= len(models):
            raise ValueError(f"Predictor count {count} outside 1..{len(models)}")
        subset = list(range(count))
        best_base = min(base[predictor_name(i)].rmse for i in subset)
        ensemble_params = sum(models[i].params.count() for i in subset)
        ensemble_macs = sum(model_cost(models[i], height, width)["macs"] for i in subset)
        for kind in kinds:
            for location in locations:
                mixer_cfg = cfg.mixer.model_copy(
                    update={"kind": kind, "location": location, "subset": subset, "order": None}
                )
                result = train_mixer(
                    models, split, train, cfg, mixer_cfg, val_rmse=val_rmse, test_samples=test
                )
                report = result.test_report
                cost = model_cost(result.mixer, height, width)
                rows.append(
                    {
                        "seed": seed,
                        "kind": kind.value,
                        "location": location.value,
                        "count": count,
                        "params": ensemble_params + cost["params"],
                        "macs": ensemble_macs + cost["macs"],
                        **report.as_row(),
                        "best_base_rmse": best_base,
                    }
                )
                logger.info(
                    "seed %d %s/%s K=%d: rmse %.4f (best base %.4f)",
                    seed,
                    kind.value,
                    location.value,
                    count,
                    report.rmse,
                    best_base,
                )
    return rows


def _protocol_rows(seed: int, cfg: ExperimentConfig, sweep: dict) -> List[Dict[str, Any]]:
    """Generate data, train predictors and sweep mixers entirely in memory for one seed."""
    cfg = cfg.model_copy(
        update={
            "scene": cfg.scene.model_copy(update={"seed": seed}),
            "train": cfg.train.model_copy(update={"seed": seed}),
        }
    )
    train, test, _ = generate_splits(cfg.scene)
    split = split_dataset(train, seed=seed, test=test)
    trained = train_base_predictors(split, train, cfg.predictor, cfg, jobs=cfg.jobs)
    for result in trained:
        if not result.final_loss < result.initial_loss:
            logger.warning("seed %d predictor %d did not converge", seed, result.index)
    models = [result.model for result in trained]
    val_rmse = [result.val_rmse for result in trained]
    return _ablation_rows(seed, models, val_rmse, split, train, test, cfg, **sweep)


def summarize_ablation(
    rows: Sequence[Dict[str, Any]]
) -> Dict[Tuple[str, str, int], Tuple[int, int]]:
    """(wins, seeds) per mixer setting, a win being rmse <= the best base predictor's rmse."""
    summary: Dict[Tuple[str, str, int], Tuple[int, int]] = {}
    for row in rows:
        key = (row["kind"], row["location"], int(row["count"]))
        wins, total = summary.get(key, (0, 0))
        summary[key] = (wins + int(row["rmse"] <= row["best_base_rmse"]), total + 1)
    return summary


def cmd_ablate(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir, manifest = _prepare_run(cfg)
    sweep = {
        "kinds": args.mixers or list(MixerKind),
        "locations": args.locations or list(FusionLocation),
        "counts": args.counts or [len(cfg.predictor)],
    }
    if args.seeds > 0:
        rows = []
        for seed in range(args.seeds):
            rows.extend(_protocol_rows(seed, cfg, sweep))
    else:
        models, metas = _load_predictors(run_dir)
        train = load_split_samples(run_dir, "train")
        test = load_split_samples(run_dir, "test")
        val_rmse = [float(meta["val_rmse"]) for meta in metas]
        rows = _ablation_rows(
            cfg.train.seed, models, val_rmse, load_split(run_dir), train, test, cfg, **sweep
        )
    write_rows(run_dir / ABLATION_CSV, rows, ABLATION_CSV_COLUMNS)
    manifest.csvs["ablation"] = ABLATION_CSV
    write_manifest(run_dir, manifest)
    for (kind, location, count), (wins, total) in summarize_ablation(rows).items():
        logger.info(
            "%s/%s K=%d beats the best base predictor in %d/%d seeds",
            kind,
            location,
            count,
            wins,
            total,
        )
    return EXIT_OK


def _heatmap_features(
    name: str,
    models: Sequence[BasePredictorModel],
    mixer: Optional[MixerModel],
    subset: Sequence[int],
    sample: DepthSample,
) -> np.ndarray:
    with no_grad():
        rgb = Tensor(sample.rgb[None])
        if name == "mixer":
            if mixer is None:
                raise FileNotFoundError("No mixer checkpoint; run train-mixer first")
            outputs = [models[i].forward(rgb) for i in subset]
            return mixer_features(mixer, outputs).data[0]
        index = int(name.split("_", 1)[1]) if name.startswith("predictor_") else -1
        if not 0 <= index < len(models):
            raise ValueError(f"Unknown model '{name}', expected predictor_<i> or mixer")
        return models[index].forward(rgb).features.data[0]


def cmd_export_heatmap(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir = cfg.run_dir
    sample, _ = _find_sample(run_dir, args.sample)
    models, _ = _load_predictors(run_dir)
    mixer, subset = _load_trained_mixer(run_dir)
    features = _heatmap_features(args.model, models, mixer, subset, sample)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    export_heatmap(args.output, features)
    logger.info("Wrote %s heatmap of %s to %s", args.model, args.sample, args.output)
    return EXIT_OK


def cmd_export_pointcloud(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    run_dir = cfg.run_dir
    sample, split = _find_sample(run_dir, args.sample)
    depth = sample.depth
    if args.source == "mixer":
        models, _ = _load_predictors(run_dir)
        mixer, subset = _load_trained_mixer(run_dir)
        if mixer is None:
            raise FileNotFoundError("No mixer checkpoint; run train-mixer first")
        depth = ensemble_depth(models, mixer, sample.rgb[None], subset)[0]
    args.output.parent.mkdir(parents=True, exist_ok=True)
    count = depth_to_pointcloud(
        depth, sample.rgb, _intrinsics(cfg, split), args.output, mask=sample.mask
    )
    logger.info("Wrote %d points to %s", count, args.output)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, ExperimentConfig], int]] = {
    "synth": cmd_synth,
    "train-base": cmd_train_base,
    "train-mixer": cmd_train_mixer,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-heatmap": cmd_export_heatmap,
    "export-pointcloud": cmd_export_pointcloud,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args.verbose)
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_USAGE
    except (TEDepthError, OSError, ValueError, RuntimeError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
