"""Rendered outputs: metric tables in the reference column order
(Accuracy, Precision, Sensitivity, F1, Specificity), per-experiment metric
documents, ROC point files and ROC figures.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import METRIC_ORDER, AggregateMetrics, ClassMetrics, ConfusionMatrix, RocCurve
from .util import CxrscreenError, format_percent, sha256_file

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("Accuracy", "Precision (PPV)", "Sensitivity (Recall)", "F1 Score", "Specificity")


class ReportError(CxrscreenError):
    pass


def render_metrics_table(
    rows: Sequence[tuple[str, AggregateMetrics]], variant: str = "weighted"
) -> str:
    """One line per backbone, percentages with two decimals, half-up."""
    header = f"{'Model':<14}" + "".join(f"{col:>22}" for col in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for name, agg in rows:
        values = getattr(agg, variant)
        cells = "".join(f"{format_percent(values[m]):>22}" for m in METRIC_ORDER)
        lines.append(f"{name:<14}" + cells)
    return "\n".join(lines) + "\n"


def render_confusion(cm: ConfusionMatrix) -> str:
    width = max(12, max(len(l) for l in cm.labels) + 2)
    lines = ["Confusion matrix (rows = true, columns = predicted)"]
    lines.append(" " * width + "".join(f"{l:>{width}}" for l in cm.labels))
    for i, label in enumerate(cm.labels):
        lines.append(f"{label:>{width}}" + "".join(f"{int(n):>{width}}" for n in cm.counts[i]))
    return "\n".join(lines) + "\n"


def write_metrics_document(
    path: Path | str,
    backbone: str,
    cm: ConfusionMatrix,
    per_class: ClassMetrics,
    aggregates: AggregateMetrics,
    aucs: Mapping[str, float],
) -> None:
    """Structured text document for one experiment arm and backbone."""
    lines = [f"Backbone: {backbone}", ""]
    lines.append(render_confusion(cm))
    lines.append("Per-class metrics (%):")
    header = f"{'Class':<18}" + "".join(f"{col:>22}" for col in TABLE_COLUMNS)
    lines.append(header)
    for i, label in enumerate(per_class.labels):
        cells = "".join(f"{format_percent(per_class.of(m)[i]):>22}" for m in METRIC_ORDER)
        lines.append(f"{label:<18}" + cells)
    if per_class.degenerate:
        lines.append(f"Degenerate (zero-denominator) metrics: {', '.join(per_class.degenerate)}")
    lines.append("")
    lines.append("Aggregates (%):")
    lines.append(f"{'Variant':<18}" + "".join(f"{col:>22}" for col in TABLE_COLUMNS))
    for variant in ("weighted", "macro"):
        values = getattr(aggregates, variant)
        cells = "".join(f"{format_percent(values[m]):>22}" for m in METRIC_ORDER)
        lines.append(f"{variant:<18}" + cells)
    lines.append("")
    lines.append("Notes: weighted accuracy is the overall accuracy (= weighted recall);")
    lines.append("the reference tables' specificity column follows the macro mean.")
    lines.append("")
    lines.append("One-vs-rest AUC:")
    for name, value in aucs.items():
        lines.append(f"  {name:<18}{value:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_roc_points(curve: RocCurve, path: Path | str) -> None:
    lines = ["fpr\ttpr"]
    lines += [f"{f:.10g}\t{t:.10g}" for f, t in zip(curve.fpr, curve.tpr)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_roc_points(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    pts = np.array([[float(x) for x in row.split("\t")] for row in rows])
    return pts[:, 0], pts[:, 1]


def plot_roc(
    curves: Mapping[str, RocCurve], out_path: Path | str, title: str
) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    for name in curves:
        curve = curves[name]
        ax.plot(curve.fpr, curve.tpr, label=f"{name} (AUC {curve.auc:.4f})", linewidth=1.4)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title, fontsize=10)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def validate_run_files(run_dir: Path, report: Mapping) -> None:
    """Re-hash every artifact recorded in the report; mismatch is fatal."""
    for rel, expected in report.get("files", {}).items():
        target = run_dir / rel
        if not target.is_file():
            raise ReportError(f"missing artifact: {rel}")
        actual = sha256_file(target)
        if actual != expected:
            raise ReportError(f"checksum mismatch for {rel}: expected {expected}, found {actual}")


def render_run_report(run_dir: Path | str, out_dir: Path | str | None = None) -> Path:
    """Render a completed run: validate checksums, then write the aggregate
    table and one ROC figure per backbone into <run>/report/."""
    run_dir = Path(run_dir)
    report_path = run_dir / "report" / "report.json"
    if not report_path.is_file():
        raise ReportError(f"no report.json under {run_dir}")
    try:
        report = json.loads(report_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportError(f"corrupt report.json: {exc}")
    validate_run_files(run_dir, report)

    out_dir = Path(out_dir) if out_dir is not None else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    arm = f"{report['scheme']}, {'with' if report['augment'] else 'without'} augmentation"
    lines = [f"Weighted average performance metrics ({arm})", ""]
    header = f"{'Model':<14}" + "".join(f"{col:>22}" for col in TABLE_COLUMNS)
    lines += [header, "-" * len(header)]
    macro_lines = [f"Macro average performance metrics ({arm})", "", header, "-" * len(header)]
    for name, entry in report["backbones"].items():
        if entry["status"] != "ok":
            lines.append(f"{name:<14}  FAILED: {entry.get('error', 'unknown error')}")
            macro_lines.append(f"{name:<14}  FAILED")
            continue
        for target, variant in ((lines, "weighted"), (macro_lines, "macro")):
            cells = "".join(
                f"{format_percent(entry[variant][m]):>22}" for m in METRIC_ORDER
            )
            target.append(f"{name:<14}" + cells)

        curves = {}
        for cls, rel in entry.get("roc_points", {}).items():
            fpr, tpr = read_roc_points(run_dir / rel)
            curves[cls] = RocCurve(
                positive_label=cls, fpr=fpr, tpr=tpr, auc=entry["auc"][cls]
            )
        if curves:
            plot_roc(curves, out_dir / f"roc_{name}.png", f"{name} ({arm})")

    table_path = out_dir / "tables.txt"
    table_path.write_text(
        "\n".join(lines) + "\n\n" + "\n".join(macro_lines) + "\n", encoding="utf-8"
    )
    return table_path
