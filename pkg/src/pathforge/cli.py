"""Command-line entry point: ``pathforge <subcommand> ...``.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 on runtime
failure. With ``--json`` errors go to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

from .errors import PathforgeError, UsageError, ValidationError

WORKERS_ENV = "PATHFORGE_WORKERS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"{WORKERS_ENV} must be >= 1")
    return value


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# subcommands


def cmd_segment(args) -> int:
    from .slide_io import open_slide
    from .tissue_seg import SegParams, export_geojson, mask_to_polygons, segment_tissue

    out = Path(args.out_dir)
    stem = Path(args.slide).stem
    mask_path, geo_path = out / "masks" / f"{stem}.png", out / "masks" / f"{stem}.geojson"
    if args.skip_existing and mask_path.exists() and geo_path.exists():
        _emit({"slide": args.slide, "status": "skipped_existing"})
        return 0
    params = SegParams(
        thumb_max_dim=args.thumb_max_dim,
        use_otsu=args.fixed_threshold is None,
        fixed_threshold=args.fixed_threshold if args.fixed_threshold is not None else 20,
    )
    slide = open_slide(args.slide)
    mask = segment_tissue(slide, params)
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    mask.save(mask_path)
    polys = mask_to_polygons(mask)
    export_geojson(polys, geo_path)
    _emit({"slide": args.slide, "mask": mask_path, "geojson": geo_path, "regions": len(polys.polygons)})
    return 0


def cmd_patch(args) -> int:
    from .patch_grid import PatchParams, plan_grid, save_grid
    from .slide_io import infer_magnification, open_slide
    from .tissue_seg import SegParams, TissueMask, import_geojson, segment_tissue

    out = Path(args.out_dir) / "patches" / f"{Path(args.slide).stem}.pgrd"
    if args.skip_existing and out.exists():
        _emit({"slide": args.slide, "status": "skipped_existing"})
        return 0
    slide = open_slide(args.slide, args.mag_override)
    if args.mask and args.mask.endswith(".geojson"):
        mask = import_geojson(args.mask, slide)
    elif args.mask:
        mask = TissueMask.load(args.mask)
    else:
        mask = segment_tissue(slide, SegParams())
    params = PatchParams(args.patch_size, args.mag, args.overlap, args.min_tissue)
    grid = plan_grid(slide, mask, infer_magnification(slide), params)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(grid, out)
    _emit({"slide": args.slide, "grid": out, "patches": len(grid), "step": grid.step, "read_level": grid.read_level})
    return 0


def cmd_extract(args) -> int:
    from .features import BatchPipeline, run_batch
    from .patch_grid import PatchParams

    pipeline = BatchPipeline(
        out_dir=args.out_dir,
        encoder=args.encoder,
        patch=PatchParams(args.patch_size, args.mag, args.overlap, args.min_tissue),
        mag_override=args.mag_override,
        batch_size=args.batch_size,
        skip_existing=args.skip_existing,
        geojson_dir=args.geojson_dir,
    )
    report = run_batch(args.slides, pipeline, args.workers or _default_workers())
    _emit({"counts": report.counts, "failed": report.reasons, "wall_time": report.wall_time})
    return 2 if report.counts["failed"] else 0


def _read_labels(path, label_kind):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"labels file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    need = ["patient_id"] + (["time", "event"] if label_kind == "survival" else ["label"])
    missing = [c for c in need if c not in cols]
    if missing:
        raise ValidationError(f"{path}: missing columns {', '.join(missing)}")
    labels, slides = {}, defaultdict(list)
    for i, row in enumerate(rows):
        p = row["patient_id"]
        if label_kind == "survival":
            try:
                value = (float(row["time"]), row["event"].strip().lower() in ("1", "true", "yes"))
            except ValueError:
                raise ValidationError(f"{path}: row {i + 2}: time must be numeric") from None
        else:
            value = row["label"]
        if p in labels and labels[p] != value:
            raise ValidationError(f"{path}: row {i + 2}: patient {p} has conflicting labels")
        labels[p] = value
        slides[p].append(row.get("slide_id") or p)
    return labels, dict(slides)


def cmd_make_task(args) -> int:
    from .task_splits import make_task, write_task

    labels, slides = _read_labels(args.labels, args.label_kind)
    spec, table = make_task(
        args.task_id,
        labels,
        slides,
        label_kind=args.label_kind,
        metric=args.metric,
        level=args.level,
        scheme=args.scheme,
        n_folds=args.folds,
        seed=args.seed,
        stratify=not args.no_stratify,
    )
    out = Path(args.out_dir) / "tasks"
    csv_path, yaml_path = out / f"{args.task_id}.csv", out / f"{args.task_id}.yaml"
    if args.skip_existing and csv_path.exists() and yaml_path.exists():
        _emit({"task": yaml_path, "status": "skipped_existing"})
        return 0
    write_task(spec, table, csv_path, yaml_path)
    _emit({"csv": csv_path, "yaml": yaml_path, "rows": len(table), "folds": table.n_folds})
    return 0


def cmd_run(args) -> int:
    from .evaluation import evaluate_task, load_feature_dir
    from .task_splits import parse_task

    csv_path = args.csv or str(Path(args.task).with_suffix(".csv"))
    spec, table = parse_task(csv_path, args.task)
    try:
        hyper = json.loads(args.hyper) if args.hyper else {}
    except json.JSONDecodeError as exc:
        raise ValidationError(f"--hyper is not valid JSON: {exc}") from None
    if not isinstance(hyper, dict):
        raise ValidationError("--hyper must be a JSON object")
    model = args.model or Path(args.features).name
    out = Path(args.out_dir) / "results" / f"{spec.task_id}__{model}__{args.framework}.csv"
    if args.skip_existing and out.exists():
        _emit({"result": out, "status": "skipped_existing"})
        return 0
    features = load_feature_dir(args.features)
    result = evaluate_task(
        spec, table, features, args.framework, hyper, seed=args.seed, model_name=model, k_shots=args.k_shots
    )
    result.save(out)
    _emit({"result": out, "metric": result.metric, "folds": result.fold_values, "mean": result.mean, "std": result.std})
    return 0


def cmd_sweep(args) -> int:
    from .sweep import SweepConfig, run_sweep, status

    config = SweepConfig.load(args.config)
    if args.workers:
        config.workers = args.workers
    elif WORKERS_ENV in os.environ:
        config.workers = _default_workers()
    if args.out_dir_given:
        config.out_dir = args.out_dir
    if args.seed is not None:
        config.seed = args.seed
    ledger = run_sweep(config, max_runs=args.max_runs, retry_failed=args.retry_failed)
    _emit(status(ledger.path).as_dict())
    return 0


def _ledger_path(args) -> Path:
    from .sweep import LEDGER_NAME

    return Path(args.ledger) if args.ledger else Path(args.out_dir) / LEDGER_NAME


def cmd_status(args) -> int:
    from .sweep import status

    _emit(status(_ledger_path(args)).as_dict())
    return 0


def cmd_gather(args) -> int:
    from .sweep import gather_results

    path = gather_results(args.out_dir, args.output)
    _emit({"results": path})
    return 0


def cmd_synth(args) -> int:
    from .synth import synth_cohort

    root = Path(args.out_dir)
    if args.skip_existing and (root / f"{args.task_id}.yaml").exists():
        _emit({"root": root, "status": "skipped_existing"})
        return 0
    cohort = synth_cohort(
        root, args.slides, args.classes, args.seed, signal_fraction=args.signal_fraction, n_folds=args.folds,
        task_id=args.task_id,
    )
    _emit({"root": root, "slides": len(cohort.slide_paths), "task_csv": cohort.task_csv, "task_yaml": cohort.task_yaml})
    return 0


# --------------------------------------------------------------------------
# parser


def _add_patch_flags(p) -> None:
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--mag", type=float, default=20, help="target magnification")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--min-tissue", type=float, default=0.25, help="minimum tissue fraction per patch")
    p.add_argument("--mag-override", type=float, default=None, help="level-0 magnification when metadata lacks it")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", default=".", help="root for all outputs (default: current directory)")
    common.add_argument("--json", action="store_true", help="report errors as JSON on stderr")
    common.add_argument("--skip-existing", action=argparse.BooleanOptionalAction, default=True)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pathforge", description="Slide-to-benchmark pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("segment", parents=[common], help="tissue mask and GeoJSON outline for a slide")
    p.add_argument("slide")
    p.add_argument("--thumb-max-dim", type=int, default=1024)
    p.add_argument("--fixed-threshold", type=int, default=None, help="saturation cut instead of Otsu")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("patch", parents=[common], help="plan the patch grid for a slide")
    p.add_argument("slide")
    p.add_argument("--mask", help="tissue mask PNG or GeoJSON outline (default: segment now)")
    _add_patch_flags(p)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("extract", parents=[common], help="batch feature extraction")
    p.add_argument("slides", nargs="+")
    p.add_argument("--encoder", default="stub-stats-64")
    p.add_argument("--workers", type=int, default=None, help=f"process count (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--geojson-dir", default=None, help="directory of <stem>.geojson outlines to use as masks")
    _add_patch_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("make-task", parents=[common], help="generate patient-grouped splits")
    p.add_argument("--labels", required=True, help="CSV with patient_id[,slide_id] and label or time,event")
    p.add_argument("--task-id", required=True)
    p.add_argument("--label-kind", choices=("categorical", "ordinal", "survival"), default="categorical")
    p.add_argument("--metric", default=None)
    p.add_argument("--level", choices=("patient", "slide"), default="patient")
    p.add_argument("--scheme", choices=("kfold", "monte_carlo"), default="kfold")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-stratify", action="store_true")
    p.set_defaults(func=cmd_make_task)

    p = sub.add_parser("run", parents=[common], help="evaluate one (task, features, framework)")
    p.add_argument("--task", required=True, help="task YAML (CSV alongside unless --csv)")
    p.add_argument("--csv", default=None)
    p.add_argument("--features", required=True, help="directory of .fstr files")
    p.add_argument("--framework", required=True, choices=("linprobe", "cox", "mil", "retrieval"))
    p.add_argument("--model", default=None, help="model name for the results (default: features dir name)")
    p.add_argument("--hyper", default=None, help="JSON object of framework hyperparameters")
    p.add_argument("--k-shots", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="run an experiment sweep from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-runs", type=int, default=None, help="stop after launching this many runs")
    p.add_argument("--retry-failed", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("status", parents=[common], help="progress of a sweep")
    p.add_argument("--ledger", default=None, help="ledger path (default: <out-dir>/ledger.jsonl)")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("gather", parents=[common], help="collect sweep results into one CSV")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_gather)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort with a planted signal")
    p.add_argument("--slides", type=int, default=20)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--signal-fraction", type=float, default=0.6)
    p.add_argument("--task-id", default="synth")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
        args.out_dir_given = any(a == "--out-dir" or a.startswith("--out-dir=") for a in argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (PathforgeError, OSError, ValueError) as exc:
        code = 1 if isinstance(exc, (ValidationError, FileNotFoundError, ValueError)) else 2
        if as_json:
            sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
        else:
            sys.stderr.write(f"pathforge: {type(exc).__name__}: {exc}\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
