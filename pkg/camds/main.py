"""CLI entry-point and integration layer for camds."""

import argparse
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from pythonjsonlogger.json import JsonFormatter
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from camds import __version__
from camds.agreement import krippendorff_alpha, load_gold, load_ratings, rater_metrics
from camds.checkpoint import load_checkpoint
from camds.config import ConfigManager
from camds.dataset import (
    LABEL_NAMES,
    LABELS,
    ROLES,
    FoldCounts,
    FrameRecord,
    filter_informative,
    fold_counts,
    fold_leaks,
    get_fold,
    load_folds,
    load_frame_set,
    load_manifest,
    patient_labels,
    resolve_path,
    save_folds,
    select,
    split_folds,
)
from camds.errors import CamdsError, ConfigurationError, DatasetError, UsageError
from camds.heatmap import export_cam, mean_activation_ratio
from camds.images import load_image, load_mask, prepare_frame
from camds.metrics import (
    FoldMetrics,
    PredictionRow,
    auc,
    confusion,
    fold_report,
    metrics,
    operating_point,
    patient_failures,
    patient_predictions,
    read_predictions,
    read_report_csv,
    roc,
    write_predictions,
    write_report_csv,
    write_roc_csv,
    write_roc_pgm,
)
from camds.model import ABNORMAL, HEADS, Model, build_model, positive_cam, predict_frames
from camds.synthetic import generate_synthetic, mask_path
from camds.tensor import no_grad
from camds.training import Trainer

console = Console()
logger = logging.getLogger("camds")

LOG_FILE = "camds.log"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _setup_logging(
    level: str,
    log_file: Optional[Path],
    log_max_size: int = 10,
    log_backup_count: int = 3,
) -> None:
    handlers: list[logging.Handler] = [RichHandler(rich_tracebacks=True, show_path=False)]

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_path,
            maxBytes=log_max_size * 1024 * 1024,
            backupCount=log_backup_count,
            encoding="utf-8",
        )
        file_handler.setFormatter(JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        handlers.append(file_handler)

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(message)s",
        datefmt="[%X]",
        handlers=handlers,
        force=True,
    )


def _start_logging(
    args: argparse.Namespace, cfg: ConfigManager, out_dir: Optional[Path] = None
) -> ConfigManager:
    """Start logging (to ``out_dir/camds.log`` when given) once flags and config are valid."""
    if args.log_level:
        cfg.override("system", log_level=args.log_level)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    _setup_logging(
        cfg.log_level,
        out_dir / LOG_FILE if out_dir is not None else None,
        log_max_size=cfg.system["log_max_size"],
        log_backup_count=cfg.system["log_backup_count"],
    )
    cfg.log_effective()
    return cfg


def _prepare(args: argparse.Namespace, out_dir: Optional[Path] = None) -> ConfigManager:
    return _start_logging(args, ConfigManager(config_path=args.config), out_dir)


def _fold_records(
    manifest: Path, folds_file: Path, fold: int, roles: Sequence[str]
) -> tuple[list[list[FrameRecord]], Path]:
    """Informative frames of each requested role of one fold, plus the frame root."""
    records, _ = filter_informative(load_manifest(manifest))
    split = get_fold(load_folds(folds_file), fold)
    return [select(records, split.members(role)) for role in roles], manifest.parent


# -- synth ---------------------------------------------------------------------


def _cmd_synth(args: argparse.Namespace) -> None:
    out = Path(args.out)
    cfg = ConfigManager(config_path=args.config)
    if args.spec:
        cfg.merge_file(args.spec)
    cfg.override(
        "synthetic",
        seed=args.seed,
        patients_per_class=args.patients_per_class,
        image_size=args.image_size,
    )
    if args.frames is not None:
        cfg.override("synthetic", frames_per_patient=[args.frames, args.frames])
    spec = cfg.synthetic_spec()
    _start_logging(args, cfg, out)

    corpus = generate_synthetic(spec, out)
    labels = patient_labels(corpus.records)
    abnormal = sum(labels.values())
    informative = sum(r.informative for r in corpus.records)
    console.print(f"[green]Manifest:[/] {corpus.manifest_path}")
    console.print(
        f"{len(labels)} patients ({len(labels) - abnormal} normal, {abnormal} abnormal), "
        f"{len(corpus.records)} frames ({informative} informative)"
    )
    console.print(f"Corpus digest: {corpus.digest}")


# -- split ---------------------------------------------------------------------


def _counts_table(title: str, counts: list[FoldCounts], kind: str) -> Table:
    table = Table(title=title)
    table.add_column("Fold", justify="right")
    for role in ROLES:
        for name in LABEL_NAMES:
            table.add_column(f"{role} {name}", justify="right")
        table.add_column(f"{role}", justify="right", style="bold")
    for entry in counts:
        values = entry.patients if kind == "patients" else entry.frames
        cells = []
        for role in ROLES:
            cells += [str(values.get(f"{role}_{name}", 0)) for name in LABEL_NAMES]
            cells.append(str(values.get(role, 0)))
        table.add_row(str(entry.fold), *cells)
    return table


def _cmd_split(args: argparse.Namespace) -> None:
    if args.folds < 1:
        raise UsageError(f"--folds must be >= 1, got {args.folds}")
    ratios = _parse_floats(args.ratios, "--ratios")
    if len(ratios) != 3:
        raise UsageError("--ratios needs three comma-separated values")
    _prepare(args)

    records = load_manifest(args.manifest)
    informative, _ = filter_informative(records)
    labels = patient_labels(informative)
    folds = split_folds(labels, args.folds, ratios, args.seed, stratify=args.stratify)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_folds(folds, out)

    counts = fold_counts(folds, informative)
    console.print(_counts_table("Number of patients per fold", counts, "patients"))
    console.print(_counts_table("Number of frames per fold", counts, "frames"))
    leaks = fold_leaks(folds, informative)
    for leak in leaks:
        logger.error("Leak: %s", leak)
    console.print(f"Leak check: {len(leaks)} violation(s)")
    console.print(f"[green]Folds written to[/] {out}")
    if leaks:
        raise DatasetError(f"{len(leaks)} fold leak(s) detected")


# -- train ---------------------------------------------------------------------


def _cmd_train(args: argparse.Namespace) -> None:
    out = Path(args.out)
    cfg = ConfigManager(config_path=args.config)
    cfg.override("model", head=args.head, seed=args.seed)
    cfg.override(
        "training",
        max_iterations=args.max_iterations,
        seed=args.seed,
        batch_size=args.batch_size,
        base_lr=args.base_lr,
    )
    model_config = cfg.model_config()
    train_config = cfg.train_config()
    threads = cfg.threads
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and args.head and resume.model.config.head != args.head:
        raise ConfigurationError(
            f"--resume checkpoint has head {resume.model.config.head}, requested {args.head}"
        )
    _start_logging(args, cfg, out)

    model = resume.model if resume is not None else build_model(model_config)

    manifest, folds_file = Path(args.manifest), Path(args.folds_file)
    (train_records, val_records), root = _fold_records(
        manifest, folds_file, args.fold, ("train", "val")
    )
    if not train_records:
        raise DatasetError(f"fold {args.fold} has no informative training frames")
    size = model.config.input_size
    train_set = load_frame_set(train_records, root, size, threads)
    val_set = load_frame_set(val_records, root, size, threads) if val_records else None

    result = Trainer(model, train_config, out).fit(train_set, val_set, resume)
    last_val = result.history.validation[-1].val_accuracy if result.history.validation else None
    console.print(
        f"[green]Trained[/] {model.config.head} for {result.checkpoint.iteration} iterations"
    )
    if last_val is not None:
        console.print(f"Validation accuracy: {last_val:.4f}")
    console.print(f"Final checkpoint: {result.final_path} (sha256 {result.digest})")


# -- eval ----------------------------------------------------------------------


def _localization_ratio(model: Model, images: np.ndarray, masks: list[np.ndarray]) -> float:
    cams = []
    with no_grad():
        for start in range(0, len(images), 32):
            output = model.forward(images[start : start + 32], mode="eval")
            cams.extend(positive_cam(output, 0, ABNORMAL))
    return mean_activation_ratio(cams, masks)


def _prepared_mask(path: Path, size: int) -> np.ndarray:
    mask = load_mask(path).astype(np.float32)
    return prepare_frame(np.repeat(mask[None], 3, axis=0), size)[0] > 0.5


def _cmd_eval(args: argparse.Namespace) -> None:
    out = Path(args.out)
    cfg = ConfigManager(config_path=args.config)
    cfg.override("evaluation", threshold=args.threshold)
    threshold = float(cfg.evaluation["threshold"])
    threads = cfg.threads
    _start_logging(args, cfg, out)

    model = load_checkpoint(args.checkpoint).model
    (records,), root = _fold_records(
        Path(args.manifest), Path(args.folds_file), args.fold, (args.split,)
    )
    if not records:
        raise DatasetError(f"fold {args.fold} {args.split} split has no informative frames")
    frames = load_frame_set(records, root, model.config.input_size, threads)
    probs = predict_frames(model, frames.images, int(cfg.evaluation["batch_size"]))

    rows = [
        PredictionRow(r.patient_id, r.frame_index, float(p), r.label)
        for r, p in zip(records, probs)
    ]
    write_predictions(rows, out / "predictions.csv")

    frame_metrics = metrics(confusion(probs, frames.labels, threshold))
    patients = patient_predictions(rows, threshold)
    patient_metrics = metrics(
        confusion([p.aggregate for p in patients], [p.label for p in patients], threshold)
    )
    with open(out / "patients.csv", "w", encoding="utf-8") as f:
        f.write("patient_id,aggregate,predicted,label,frames\n")
        for p in patients:
            f.write(
                f"{p.patient_id},{p.aggregate!r},{LABEL_NAMES[p.predicted]},"
                f"{LABEL_NAMES[p.label]},{len(p.frame_probs)}\n"
            )
    failures = patient_failures(patients)
    with open(out / "failures.csv", "w", encoding="utf-8") as f:
        f.write("patient_id,aggregate,direction\n")
        for failure in failures:
            f.write(
                f"{failure.prediction.patient_id},{failure.prediction.aggregate!r},"
                f"{failure.direction}\n"
            )
    write_report_csv([FoldMetrics.from_metrics(args.fold, frame_metrics)], out / "report.csv")

    table = Table(title=f"Fold {args.fold} ({args.split}): {len(records)} frames")
    table.add_column("Metric")
    table.add_column("Frames", justify="right")
    table.add_column("Patients", justify="right")
    for name, value in frame_metrics.as_dict().items():
        table.add_row(name, f"{value:.4f}", f"{patient_metrics.as_dict()[name]:.4f}")
    console.print(table)
    if failures:
        console.print(f"[yellow]{len(failures)} misclassified patient(s):[/]")
        for failure in failures:
            console.print(
                f"  {failure.prediction.patient_id}  {failure.direction}  "
                f"(aggregate {failure.prediction.aggregate:.3f})"
            )
    else:
        console.print("All patients classified correctly.")

    if model.cam_heads:
        abnormal = [
            (i, resolve_path(root, str(mask_path(r.path))))
            for i, r in enumerate(records)
            if r.label == LABELS["abnormal"]
        ]
        abnormal = [(i, m) for i, m in abnormal if m.exists()]
        if abnormal:
            size = model.config.input_size
            ratio = _localization_ratio(
                model,
                frames.images[[i for i, _ in abnormal]],
                [_prepared_mask(m, size) for _, m in abnormal],
            )
            logger.info("Localization ratio over %d masked frames: %.3f", len(abnormal), ratio)
            console.print(
                f"CAM localization (inside/outside mask, {len(abnormal)} frames): {ratio:.3f}"
            )


# -- roc -----------------------------------------------------------------------


def _cmd_roc(args: argparse.Namespace) -> None:
    cfg = ConfigManager(config_path=args.config)
    if args.operating_sens is not None:
        targets = _parse_floats(args.operating_sens, "--operating-sens")
    else:
        targets = [float(t) for t in cfg.evaluation["operating_sensitivities"]]
    if any(not 0.0 <= t <= 1.0 for t in targets):
        raise UsageError("operating sensitivities must lie in [0, 1]")
    out = Path(args.out)
    _start_logging(args, cfg, out)

    pooled: list[PredictionRow] = []
    for path in args.predictions:
        rows = read_predictions(path)
        console.print(f"{path}: {len(rows)} frames")
        pooled.extend(rows)
    console.print(f"Pooled: {len(pooled)} frames")
    curve = roc([r.prob for r in pooled], [r.label for r in pooled])
    area = auc(curve)
    write_roc_csv(curve, out / "roc.csv")
    write_roc_pgm(curve, out / "roc.pgm")

    console.print(f"[bold]AUC[/] {area:.4f} over {len(curve)} ROC points")
    table = Table(title="Operating points")
    for column in ("target sensitivity", "threshold", "sensitivity", "specificity"):
        table.add_column(column, justify="right")
    for target in targets:
        point = operating_point(curve, target)
        table.add_row(
            f"{target:.2f}", f"{point.threshold:.4f}",
            f"{point.sensitivity:.4f}", f"{point.specificity:.4f}",
        )
    console.print(table)


# -- agreement -----------------------------------------------------------------


def _cmd_agreement(args: argparse.Namespace) -> None:
    out = Path(args.out) if args.out else None
    _prepare(args, out)

    matrix = load_ratings(args.ratings)
    alpha = krippendorff_alpha(matrix)
    console.print(
        f"Krippendorff's alpha ({len(matrix.raters)} raters, {len(matrix.items)} items): "
        f"{alpha:.4f}"
    )
    if args.gold:
        table = Table(title="Raters against gold labels")
        table.add_column("Rater")
        for column in ("sensitivity", "specificity", "accuracy", "f1"):
            table.add_column(column, justify="right")
        for rater, m in rater_metrics(matrix, load_gold(args.gold)).items():
            table.add_row(rater, *(f"{v:.4f}" for v in m.as_dict().values()))
        console.print(table)


# -- cam -----------------------------------------------------------------------


def _cmd_cam(args: argparse.Namespace) -> None:
    if args.resolution is not None and args.resolution < 1:
        raise UsageError(f"--resolution must be >= 1, got {args.resolution}")
    model = load_checkpoint(args.checkpoint).model
    if not model.cam_heads:
        raise UsageError(f"a {model.config.head} checkpoint has no class activation maps")
    available = model.head_resolutions
    resolution = available[0] if args.resolution is None else args.resolution
    if resolution not in available:
        listed = ", ".join(str(r) for r in available)
        raise UsageError(f"--resolution {resolution} has no CAM head (available: {listed})")
    out = Path(args.out)
    _prepare(args, out)

    size = model.config.input_size
    image = prepare_frame(load_image(args.image), size)
    with no_grad():
        output = model.forward(image[None], mode="eval")
    t = available.index(resolution)
    c = LABELS[args.class_name]
    cam = positive_cam(output, t, c)[0]
    gray = export_cam(
        cam, out / "heatmap.pgm", size=size, image=image, overlay_path=out / "overlay.ppm"
    )

    unclamped_mean = float(np.mean(output.cams[t].data[0, c], dtype=np.float64))
    side_score = float(output.side_scores[t].data[0, c])
    console.print(
        f"Resolution {resolution} ({cam.shape[0]}x{cam.shape[1]}), "
        f"class {args.class_name}: heatmap max {int(gray.max())}"
    )
    console.print(
        f"GAP check: CAM mean {unclamped_mean:.6f} vs side score {side_score:.6f} "
        f"(diff {abs(unclamped_mean - side_score):.2e})"
    )


# -- report --------------------------------------------------------------------


def _cmd_report(args: argparse.Namespace) -> None:
    out = Path(args.out)
    _prepare(args, out)

    rows: list[FoldMetrics] = []
    for path in args.reports:
        rows.extend(read_report_csv(path))
    report = fold_report(rows)
    write_report_csv(report, out / "report.csv")

    table = Table(title="Frame classification over the testing set of each fold")
    table.add_column("Metric")
    for row in report[:-1]:
        table.add_column(f"Fold {row.fold}", justify="right")
    table.add_column("Average", justify="right", style="bold")
    for index, name in enumerate(("Sensitivity", "Specificity", "Accuracy", "F1 score")):
        table.add_row(name, *(f"{100 * r.values()[index]:.1f}%" for r in report))
    console.print(table)


# -- parser --------------------------------------------------------------------


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camds",
        description="Class activation maps with deep supervision for frame classification",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-c", "--config", default=None, help="Path to config YAML file")
    parser.add_argument(
        "--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic corpus")
    p.add_argument("--spec", default=None, help="YAML file with synthetic settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--patients-per-class", type=int, default=None)
    p.add_argument("--frames", type=int, default=None, help="Frames per patient")
    p.add_argument("--image-size", type=int, default=None)

    p = sub.add_parser("split", help="Split patients into folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--stratify", action="store_true")
    p.add_argument("--out", required=True, help="Fold file to write")

    p = sub.add_parser("train", help="Train one head on one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds-file", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--head", choices=HEADS, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="Checkpoint to continue from")

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a fold split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds-file", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--split", choices=ROLES, default="test")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("roc", help="Pooled ROC curve and operating points")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--operating-sens", default=None, help="Comma-separated targets (default: from config)"
    )

    p = sub.add_parser("agreement", help="Inter-rater agreement")
    p.add_argument("--ratings", required=True)
    p.add_argument("--gold", default=None)
    p.add_argument("--out", default=None, help="Directory for the log file")

    p = sub.add_parser("cam", help="Export a class activation heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_name", choices=LABEL_NAMES, default="abnormal")
    p.add_argument(
        "--resolution", type=int, default=None, help="1 = highest; default: highest with a head"
    )
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="Merge per-fold reports with an average row")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)

    return parser


DISPATCH: dict[str, Callable[[argparse.Namespace], None]] = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "roc": _cmd_roc,
    "agreement": _cmd_agreement,
    "cam": _cmd_cam,
    "report": _cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        DISPATCH[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        console.print(f"[red]Usage error:[/] {exc}")
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (CamdsError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        console.print(f"[red]Error:[/] {exc}")
        return EXIT_FAILURE
    return EXIT_OK


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
