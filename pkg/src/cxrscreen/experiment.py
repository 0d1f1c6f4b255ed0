"""Experiment orchestration: catalog -> split -> augment -> train -> evaluate
-> explain, producing a self-describing run directory.

Each arm (scheme × augmentation) trains every configured backbone over k
folds, accumulates all test-fold predictions into one confusion matrix per
backbone, and persists metrics, ROC points, model artifacts and a checksummed
run report. Unaugmented arms balance every class down to the smallest class
population; augmented arms use the full corpus (the two-class scheme always
drops the viral class first).
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .augment import AugmentationSpec, check_leakage, expand_training_fold, materialize
from .catalog import (
    Label,
    Manifest,
    balance_subsample,
    write_manifest,
    write_report,
)
from .metrics import (
    METRIC_ORDER,
    accumulate,
    aggregate,
    empty_confusion,
    multiclass_roc,
    per_class_metrics,
)
from .reporting import plot_roc, render_metrics_table, write_metrics_document, write_roc_points
from .splits import (
    SCHEME_LABELS,
    SplitPlan,
    carve_validation,
    render_count_table,
    split_counts,
    stratified_kfold,
    validate_plan,
    write_plan,
)
from .util import CxrscreenError, sha256_file

if TYPE_CHECKING:
    from .training import TrainingConfig

logger = logging.getLogger(__name__)

DEVICE_ENV = "CXRSCREEN_DEVICE"

DEFAULT_CLASS_LAYOUT = {
    "covid": Label.COVID19,
    "normal": Label.NORMAL,
    "viral": Label.VIRAL_PNEUMONIA,
}


class ExperimentError(CxrscreenError):
    pass


@dataclass(frozen=True)
class RunConfig:
    corpus_root: str
    scheme: str = "THREE_CLASS"
    augment: bool = True
    balance: str = "auto"  # auto: balance unaugmented arms only | always | never
    backbones: tuple[str, ...] = ("DenseNet201",)
    k: int = 5
    seed: int = 0
    val_fraction: float = 0.10
    output_dir: str = "runs"
    per_class_count: int | None = None  # balance target; defaults to the smallest class
    class_layout: Mapping[str, Label] = field(default_factory=lambda: dict(DEFAULT_CLASS_LAYOUT))
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    training: "TrainingConfig" = None  # type: ignore[assignment]
    explain_layers: tuple[str, ...] = ()  # empty: pick first/middle/last conv automatically
    explain: bool = True
    materialize_augmented: bool = False  # debug: write augmented PNGs under <run>/aug/

    def __post_init__(self) -> None:
        from .backbones import BACKBONE_SPECS

        if self.scheme not in SCHEME_LABELS:
            raise ExperimentError(f"unknown scheme {self.scheme!r}")
        if self.k < 2:
            raise ExperimentError("k must be at least 2")
        if self.balance not in ("auto", "always", "never"):
            raise ExperimentError(f"unknown balance mode {self.balance!r}")
        for name in self.backbones:
            if name not in BACKBONE_SPECS:
                raise ExperimentError(f"unknown backbone {name!r}")
        if self.training is None:
            from .training import TrainingConfig

            object.__setattr__(self, "training", TrainingConfig(seed=self.seed))


def load_run_config(path: Path | str) -> RunConfig:
    """RunConfig from a YAML document; absent keys take the reference defaults."""
    from .training import TrainingConfig

    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if "corpus_root" not in doc:
        raise ExperimentError("config must set corpus_root")

    aug_doc = doc.pop("augmentation", {}) or {}
    if "rotation_degrees" in aug_doc:
        aug_doc["rotation_degrees"] = tuple(float(a) for a in aug_doc["rotation_degrees"])
    if "translation_range" in aug_doc:
        aug_doc["translation_range"] = tuple(float(t) for t in aug_doc["translation_range"])
    if "copies_per_class" in aug_doc:
        aug_doc["copies_per_class"] = {
            str(kk): int(vv) for kk, vv in aug_doc["copies_per_class"].items()
        }
    train_doc = doc.pop("training", {}) or {}
    layout_doc = doc.pop("class_layout", None)
    layout = (
        {name: Label(value) for name, value in layout_doc.items()}
        if layout_doc
        else dict(DEFAULT_CLASS_LAYOUT)
    )
    seed = int(doc.get("seed", 0))
    aug_doc.setdefault("seed", seed)
    train_doc.setdefault("seed", seed)
    device = os.environ.get(DEVICE_ENV)
    if device:
        train_doc["device"] = device

    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
    if "backbones" in doc:
        doc["backbones"] = tuple(doc["backbones"])
    if "explain_layers" in doc:
        doc["explain_layers"] = tuple(doc["explain_layers"])
    return RunConfig(
        class_layout=layout,
        augmentation=AugmentationSpec(**aug_doc),
        training=TrainingConfig(**train_doc),
        **doc,
    )


def config_snapshot(config: RunConfig) -> dict:
    snap = dataclasses.asdict(config)
    snap["class_layout"] = {kk: vv.value for kk, vv in config.class_layout.items()}
    snap["augmentation"]["copies_per_class"] = dict(config.augmentation.copies_per_class)
    return snap


def create_run_dir(config: RunConfig) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    arm = "aug" if config.augment else "noaug"
    base = Path(config.output_dir)
    base.mkdir(parents=True, exist_ok=True)
    candidate = base / f"{stamp}-{config.scheme.lower()}-{arm}"
    counter = 1
    while candidate.exists():
        counter += 1
        candidate = base / f"{stamp}-{config.scheme.lower()}-{arm}-{counter}"
    for sub in ("manifest", "splits", "models", "metrics", "explain", "report"):
        (candidate / sub).mkdir(parents=True)
    return candidate


class RunLock:
    """One CLI process per run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ExperimentError(f"run directory is locked by another process: {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *_exc):
        self.path.unlink(missing_ok=True)


def prepare_manifest(manifest: Manifest, config: RunConfig) -> Manifest:
    """Scheme restriction plus the arm's balancing policy."""
    used = manifest.restrict(SCHEME_LABELS[config.scheme])
    do_balance = config.balance == "always" or (config.balance == "auto" and not config.augment)
    if do_balance:
        counts = [n for n in used.class_counts.values() if n > 0]
        if not counts:
            return used
        target = config.per_class_count or min(counts)
        used = balance_subsample(used, target, config.seed)
    return used


def _pick_explain_layers(model, requested: Sequence[str]) -> list[str]:
    from .activations import conv_layer_names

    if requested:
        return list(requested)
    convs = conv_layer_names(model)
    if not convs:
        return []
    picks = {convs[0], convs[len(convs) // 2], convs[-1]}
    return [c for c in convs if c in picks]


def _experiment_plan(manifest: Manifest, config: RunConfig) -> SplitPlan:
    plan = stratified_kfold(manifest, config.k, config.seed, scheme=config.scheme)
    plan = carve_validation(plan, config.val_fraction, manifest)
    validate_plan(plan, manifest)
    return plan


def run_experiment(
    manifest: Manifest,
    config: RunConfig,
    run_dir: Path | str,
    ingest_findings: Sequence = (),
) -> dict:
    """Train every configured backbone over all folds and persist the report.

    A fold failure marks that backbone failed and the remaining backbones
    still run. Returns the report document (also written to
    <run>/report/report.json).
    """
    from .backbones import build_classifier, input_spec
    from .training import FoldModel, predict, predicted_labels, save_fold_model, train_fold

    run_dir = Path(run_dir)
    started = time.time()
    if not config.backbones:
        logger.warning("no backbones configured; producing an empty report")
    class_labels = [label.value for label in SCHEME_LABELS[config.scheme]]

    used = prepare_manifest(manifest, config)
    write_manifest(manifest, run_dir / "manifest" / "manifest.tsv")
    write_manifest(used, run_dir / "manifest" / "used.tsv")
    write_report(list(ingest_findings), run_dir / "manifest" / "ingest_report.tsv")

    plan = _experiment_plan(used, config)
    plan_path = run_dir / "splits" / "plan.json"
    write_plan(plan, plan_path)
    table = split_counts(plan, used)

    records_by_id = used.by_id()
    labels_by_id = {r.record_id: r.label for r in used.records}

    fold_augmented: list[list] = []
    for fold_index, fold in enumerate(plan.folds):
        if config.augment:
            augmented = expand_training_fold(
                fold, used, config.augmentation, fold_index, count_table=table
            )
            check_leakage(augmented, fold)
            if config.materialize_augmented:
                materialize(augmented, used, run_dir, fold_index)
        else:
            augmented = []
        fold_augmented.append(augmented)
    (run_dir / "splits" / "counts.txt").write_text(render_count_table(table), encoding="utf-8")

    backbone_entries: dict[str, dict] = {}
    summary_rows: list[tuple[str, object]] = []
    for name in config.backbones:
        entry: dict = {"status": "ok", "error": None}
        try:
            spec = input_spec(name)
            cm = empty_confusion(class_labels)
            pooled_scores: list[np.ndarray] = []
            pooled_truth: list[str] = []
            model_dirs: list[str] = []
            best_epochs: list[int] = []
            first_fold_model: FoldModel | None = None
            for fold_index, fold in enumerate(plan.folds):
                classifier = build_classifier(
                    name,
                    len(class_labels),
                    weights_policy=config.training.weights,
                    seed=config.seed,
                )
                train_items = [records_by_id[rid] for rid in fold.train] + fold_augmented[fold_index]
                val_items = [records_by_id[rid] for rid in fold.validation]
                fold_model = train_fold(
                    classifier,
                    train_items,
                    val_items,
                    config.training,
                    class_labels,
                    records_by_id,
                    fold_index=fold_index,
                )
                test_records = [records_by_id[rid] for rid in fold.test]
                probs = predict(fold_model, test_records, records_by_id)
                preds = predicted_labels(probs, class_labels)
                truth = [labels_by_id[r.record_id].value for r in test_records]
                cm = accumulate(cm, truth, preds)
                pooled_scores.append(probs)
                pooled_truth.extend(truth)
                model_dir = run_dir / "models" / name / f"fold{fold_index}"
                save_fold_model(fold_model, model_dir, config.training)
                model_dirs.append(str(model_dir.relative_to(run_dir)))
                best_epochs.append(fold_model.best_epoch)
                if first_fold_model is None:
                    first_fold_model = fold_model

            per_class = per_class_metrics(cm)
            aggregates = aggregate(per_class, cm.supports)
            summary_rows.append((name, aggregates))
            scores = np.concatenate(pooled_scores, axis=0)
            curves, micro = multiclass_roc(scores, pooled_truth, class_labels)
            curves_with_micro = dict(curves)
            curves_with_micro["micro"] = micro

            metrics_dir = run_dir / "metrics" / name
            metrics_dir.mkdir(parents=True, exist_ok=True)
            roc_relpaths = {}
            for cls, curve in curves_with_micro.items():
                rel = Path("metrics") / name / f"roc_{cls}.tsv"
                write_roc_points(curve, run_dir / rel)
                roc_relpaths[cls] = str(rel)
            aucs = {cls: curve.auc for cls, curve in curves_with_micro.items()}
            write_metrics_document(
                metrics_dir / "report.txt", name, cm, per_class, aggregates, aucs
            )
            plot_roc(
                curves_with_micro,
                metrics_dir / "roc.png",
                f"{name} ({config.scheme}, {'with' if config.augment else 'without'} augmentation)",
            )

            entry.update(
                {
                    "pretrain_corpus_used": first_fold_model.pretrain_corpus_used,
                    "normalization_mean": list(spec.normalization_mean),
                    "normalization_std": list(spec.normalization_std),
                    "confusion_matrix": cm.counts.tolist(),
                    "supports": list(cm.supports),
                    "per_class": {m: list(per_class.of(m)) for m in METRIC_ORDER},
                    "degenerate": list(per_class.degenerate),
                    "weighted": dict(aggregates.weighted),
                    "macro": dict(aggregates.macro),
                    "auc": aucs,
                    "roc_points": roc_relpaths,
                    "models": model_dirs,
                    "best_epochs": best_epochs,
                }
            )

            if config.explain and first_fold_model is not None:
                explain_rel = _render_explain_panel(
                    first_fold_model, plan, used, config, run_dir, name
                )
                entry["explain"] = explain_rel
        except Exception as exc:  # a failed backbone must not sink the others
            logger.exception("backbone %s failed", name)
            entry["status"] = "failed"
            entry["error"] = f"{type(exc).__name__}: {exc}"
        backbone_entries[name] = entry

    if summary_rows:
        arm = f"{config.scheme}, {'with' if config.augment else 'without'} augmentation"
        summary = (
            f"Weighted average performance metrics ({arm})\n\n"
            + render_metrics_table(summary_rows, "weighted")
            + f"\nMacro average performance metrics ({arm})\n\n"
            + render_metrics_table(summary_rows, "macro")
        )
        (run_dir / "metrics" / "summary.txt").write_text(summary, encoding="utf-8")

    report = {
        "tool_version": __version__,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "scheme": config.scheme,
        "augment": config.augment,
        "class_labels": class_labels,
        "config": config_snapshot(config),
        "device": config.training.device,
        "manifest_checksum": sha256_file(run_dir / "manifest" / "used.tsv"),
        "split_checksum": sha256_file(plan_path),
        "population": {label.value: n for label, n in used.class_counts.items()},
        "backbones": backbone_entries,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    report["files"] = _collect_file_checksums(run_dir)
    report_path = run_dir / "report" / "report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def _render_explain_panel(
    fold_model, plan: SplitPlan, used: Manifest, config: RunConfig, run_dir: Path, name: str
) -> str | None:
    from .activations import render_panel

    labels_by_id = {r.record_id: r.label for r in used.records}
    records_by_id = used.by_id()
    chosen = []
    for label in SCHEME_LABELS[config.scheme]:
        ids = sorted(rid for rid in plan.folds[0].test if labels_by_id[rid] == label)
        if ids:
            chosen.append(records_by_id[ids[0]])
    layers = _pick_explain_layers(fold_model.model, config.explain_layers)
    if not chosen or not layers:
        return None
    rel = Path("explain") / f"panel-{name}.png"
    render_panel(chosen, fold_model, layers, run_dir / rel)
    return str(rel)


def _collect_file_checksums(run_dir: Path) -> dict[str, str]:
    checksums = {}
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file() or path.name == ".lock":
            continue
        rel = path.relative_to(run_dir).as_posix()
        if rel == "report/report.json":
            continue
        checksums[rel] = sha256_file(path)
    return checksums


def describe_plan(config: RunConfig, manifest: Manifest) -> str:
    """Dry-run description: stages and counts, nothing written."""
    used = prepare_manifest(manifest, config)
    plan = _experiment_plan(used, config)
    table = split_counts(plan, used)
    if config.augment:
        for fold_index, fold in enumerate(plan.folds):
            expand_training_fold(fold, used, config.augmentation, fold_index, count_table=table)
    lines = [
        f"scheme: {config.scheme}   augment: {config.augment}   k: {config.k}   seed: {config.seed}",
        f"backbones: {', '.join(config.backbones)}",
        "population: "
        + ", ".join(f"{label.value}={n}" for label, n in used.class_counts.items() if n),
        "",
        render_count_table(table),
        "stages: catalog -> split -> "
        + ("augment -> " if config.augment else "")
        + "train -> evaluate"
        + (" -> explain" if config.explain else ""),
    ]
    return "\n".join(lines)
