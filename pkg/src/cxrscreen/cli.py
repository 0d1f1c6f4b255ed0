"""Command-line entry point.

Subcommands: catalog (ingest a corpus), split (stratified k-fold plan),
run (full experiment from a config file), report (render tables and ROC
figures for a completed run). Exit codes: 0 success, 1 partial backbone
failure, 2 usage or input error. Device selection comes from the
CXRSCREEN_DEVICE environment variable; everything else lives in the config.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .catalog import (
    Label,
    ingest_directory,
    read_manifest,
    write_manifest,
    write_report,
)
from .splits import (
    SCHEME_LABELS,
    carve_validation,
    render_count_table,
    split_counts,
    stratified_kfold,
    validate_plan,
    write_plan,
)
from .util import CxrscreenError

logger = logging.getLogger(__name__)

CLASS_ALIASES = {
    "covid": Label.COVID19,
    "covid19": Label.COVID19,
    "covid-19": Label.COVID19,
    "normal": Label.NORMAL,
    "viral": Label.VIRAL_PNEUMONIA,
    "viral_pneumonia": Label.VIRAL_PNEUMONIA,
    "viral pneumonia": Label.VIRAL_PNEUMONIA,
    "pneumonia": Label.VIRAL_PNEUMONIA,
}

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


class UsageError(CxrscreenError):
    pass


def _parse_class_option(value: str) -> dict[str, Label]:
    layout = {}
    for pair in value.split(","):
        if "=" not in pair:
            raise UsageError(f"bad --classes entry {pair!r}; expected subdir=LABEL")
        subdir, label = pair.split("=", 1)
        try:
            layout[subdir.strip()] = Label(label.strip())
        except ValueError:
            raise UsageError(f"unknown label {label!r}; valid: {[l.value for l in Label]}")
    return layout


def _auto_class_layout(root: Path) -> dict[str, Label]:
    layout = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        label = CLASS_ALIASES.get(sub.name.lower())
        if label is None:
            logger.warning("ignoring unmapped subdirectory %s", sub)
        else:
            layout[sub.name] = label
    return layout


def cmd_catalog(args: argparse.Namespace) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise UsageError(f"corpus root is not a readable directory: {root}")
    layout = _parse_class_option(args.classes) if args.classes else _auto_class_layout(root)
    if not layout:
        logger.warning("no class directories found under %s; writing an empty manifest", root)
    manifest, findings = ingest_directory(root, layout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out / "manifest.tsv")
    write_report(findings, out / "ingest_report.tsv")
    counts = manifest.class_counts
    print(
        "cataloged "
        + ", ".join(f"{label.value}={counts[label]}" for label in counts)
        + f" -> {out / 'manifest.tsv'}"
    )
    for finding in findings:
        print(finding.as_line(), file=sys.stderr)
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest)
    if args.scheme not in SCHEME_LABELS:
        raise UsageError(f"unknown scheme {args.scheme!r}; valid: {sorted(SCHEME_LABELS)}")
    used = manifest.restrict(SCHEME_LABELS[args.scheme])
    plan = stratified_kfold(used, args.k, args.seed, scheme=args.scheme)
    plan = carve_validation(plan, args.val_fraction, used)
    validate_plan(plan, used)
    table = split_counts(plan, used)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_plan(plan, out / "plan.json")
    rendered = render_count_table(table)
    (out / "counts.txt").write_text(rendered, encoding="utf-8")
    print(rendered, end="")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    from .experiment import (
        ExperimentError,
        RunLock,
        create_run_dir,
        describe_plan,
        load_run_config,
        run_experiment,
    )

    try:
        config = load_run_config(args.config)
    except (ExperimentError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}")
    root = Path(config.corpus_root)
    if not root.is_dir():
        raise UsageError(f"corpus root is not a readable directory: {root}")
    manifest, findings = ingest_directory(root, config.class_layout)
    if args.dry_run:
        print(describe_plan(config, manifest))
        return EXIT_OK
    run_dir = create_run_dir(config)
    print(f"run directory: {run_dir}")
    with RunLock(run_dir):
        report = run_experiment(manifest, config, run_dir, ingest_findings=findings)
    failed = [name for name, entry in report["backbones"].items() if entry["status"] != "ok"]
    for name, entry in report["backbones"].items():
        if entry["status"] == "ok":
            weighted = entry["weighted"]
            print(
                f"{name}: accuracy {100 * weighted['accuracy']:.2f}%  "
                f"(confusion total {sum(map(sum, entry['confusion_matrix']))})"
            )
        else:
            print(f"{name}: FAILED ({entry['error']})")
    if failed:
        logger.error("failed backbones: %s", ", ".join(failed))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .reporting import ReportError, render_run_report

    try:
        table_path = render_run_report(args.run_dir)
    except ReportError as exc:
        raise UsageError(str(exc))
    print(table_path.read_text(encoding="utf-8"), end="")
    print(f"\nreport rendered under {table_path.parent}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrscreen",
        description="Chest X-ray screening experiments: catalog, split, run, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_catalog = sub.add_parser("catalog", help="ingest a labeled corpus into a manifest")
    p_catalog.add_argument("--root", required=True, help="corpus root with one subdirectory per class")
    p_catalog.add_argument("--out", required=True, help="output directory for manifest and report")
    p_catalog.add_argument(
        "--classes",
        help="comma-separated subdir=LABEL pairs (default: well-known directory names)",
    )
    p_catalog.set_defaults(func=cmd_catalog)

    p_split = sub.add_parser("split", help="stratified k-fold split plan from a manifest")
    p_split.add_argument("--manifest", required=True)
    p_split.add_argument("--scheme", default="THREE_CLASS", help="TWO_CLASS or THREE_CLASS")
    p_split.add_argument("--k", type=int, default=5)
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--val-fraction", type=float, default=0.10, dest="val_fraction")
    p_split.add_argument("--out", required=True)
    p_split.set_defaults(func=cmd_split)

    p_run = sub.add_parser("run", help="run a full experiment from a YAML config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--dry-run", action="store_true", dest="dry_run")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="render tables and ROC figures for a run")
    p_report.add_argument("--run-dir", required=True, dest="run_dir")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CxrscreenError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
