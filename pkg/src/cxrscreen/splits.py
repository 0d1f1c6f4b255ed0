"""Stratified k-fold train/validation/test assignment.

Within each class the records are shuffled once from a class sub-seed and
dealt round-robin into k test buckets; each fold's non-test records form its
training pool, from which a stratified validation slice is carved. All
sub-streams hash (seed, class[, fold]) so adding a class never reshuffles
the others.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .catalog import CLASS_ORDER, Label, Manifest
from .util import CxrscreenError, rng_for

TWO_CLASS = "TWO_CLASS"
THREE_CLASS = "THREE_CLASS"

SCHEME_LABELS: dict[str, tuple[Label, ...]] = {
    TWO_CLASS: (Label.COVID19, Label.NORMAL),
    THREE_CLASS: CLASS_ORDER,
}


class SplitError(CxrscreenError):
    pass


@dataclass(frozen=True)
class FoldAssignment:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    k: int
    seed: int
    scheme: str
    folds: tuple[FoldAssignment, ...]


@dataclass
class SplitCountTable:
    """Per class × per fold counts; augmented column stays zero until the
    augmentation engine fills it."""

    labels: tuple[Label, ...]
    k: int
    train: np.ndarray  # (num_labels, k) int64
    validation: np.ndarray
    test: np.ndarray
    augmented_train: np.ndarray

    def row(self, label: Label, fold: int) -> tuple[int, int, int, int]:
        i = self.labels.index(label)
        return (
            int(self.train[i, fold]),
            int(self.validation[i, fold]),
            int(self.test[i, fold]),
            int(self.augmented_train[i, fold]),
        )


def stratified_kfold(manifest: Manifest, k: int, seed: int, scheme: str = THREE_CLASS) -> SplitPlan:
    """Assign every record to exactly one test fold, stratified per class.

    Validation sets start empty; use carve_validation afterwards.
    """
    if k < 2:
        raise SplitError(f"k must be at least 2, got {k}")
    counts = manifest.class_counts
    present = [label for label in CLASS_ORDER if counts[label] > 0]
    for label in present:
        if counts[label] < k:
            raise SplitError(f"class {label} has {counts[label]} records, fewer than k={k}")

    test_buckets: list[list[str]] = [[] for _ in range(k)]
    for label in present:
        members = [r.record_id for r in manifest.records if r.label == label]
        order = rng_for("kfold", seed, label.value).permutation(len(members))
        for i, idx in enumerate(order):
            test_buckets[i % k].append(members[idx])

    all_ids = {r.record_id for r in manifest.records}
    folds = []
    for fold_test in test_buckets:
        test = tuple(sorted(fold_test))
        train = tuple(sorted(all_ids.difference(fold_test)))
        folds.append(FoldAssignment(train=train, validation=(), test=test))
    return SplitPlan(k=k, seed=seed, scheme=scheme, folds=tuple(folds))


def carve_validation(plan: SplitPlan, fraction: float, manifest: Manifest) -> SplitPlan:
    """Move round(fraction × pool) records per class per fold from train to
    validation, selected from the plan's seed."""
    if not 0 < fraction < 1:
        raise SplitError(f"validation fraction must be in (0, 1), got {fraction}")
    for fold in plan.folds:
        if fold.validation:
            raise SplitError("plan already has validation sets")

    labels_by_id = {r.record_id: r.label for r in manifest.records}
    folds = []
    for fold_index, fold in enumerate(plan.folds):
        train: list[str] = []
        validation: list[str] = []
        for label in CLASS_ORDER:
            pool = sorted(rid for rid in fold.train if labels_by_id[rid] == label)
            if not pool:
                continue
            # half-up so an exact .5 never starves a fold of validation records
            n_val = int(np.floor(fraction * len(pool) + 0.5))
            if n_val >= len(pool):
                raise SplitError(
                    f"fraction {fraction} empties the {label} training pool of fold {fold_index}"
                )
            order = rng_for("carve", plan.seed, label.value, fold_index).permutation(len(pool))
            chosen = {pool[i] for i in order[:n_val]}
            validation.extend(chosen)
            train.extend(rid for rid in pool if rid not in chosen)
        folds.append(
            FoldAssignment(train=tuple(sorted(train)), validation=tuple(sorted(validation)), test=fold.test)
        )
    return replace(plan, folds=tuple(folds))


def split_counts(plan: SplitPlan, manifest: Manifest) -> SplitCountTable:
    labels_by_id = {r.record_id: r.label for r in manifest.records}
    labels = SCHEME_LABELS[plan.scheme]
    shape = (len(labels), plan.k)
    table = SplitCountTable(
        labels=labels,
        k=plan.k,
        train=np.zeros(shape, dtype=np.int64),
        validation=np.zeros(shape, dtype=np.int64),
        test=np.zeros(shape, dtype=np.int64),
        augmented_train=np.zeros(shape, dtype=np.int64),
    )
    index = {label: i for i, label in enumerate(labels)}
    for fold_index, fold in enumerate(plan.folds):
        for role, counts in (("train", table.train), ("validation", table.validation), ("test", table.test)):
            for rid in getattr(fold, role):
                counts[index[labels_by_id[rid]], fold_index] += 1
    return table


def validate_plan(plan: SplitPlan, manifest: Manifest) -> None:
    """Raise SplitError on any violated plan invariant."""
    all_ids = {r.record_id for r in manifest.records}
    seen_test: list[str] = []
    for fold_index, fold in enumerate(plan.folds):
        train, val, test = set(fold.train), set(fold.validation), set(fold.test)
        if train & val or train & test or val & test:
            raise SplitError(f"fold {fold_index}: roles overlap")
        if train | val | test != all_ids:
            raise SplitError(f"fold {fold_index}: roles do not cover the manifest")
        seen_test.extend(fold.test)
    if sorted(seen_test) != sorted(all_ids):
        raise SplitError("test sets across folds do not partition the manifest")

    labels_by_id = {r.record_id: r.label for r in manifest.records}
    counts = manifest.class_counts
    for label in CLASS_ORDER:
        population = counts[label]
        if population == 0:
            continue
        for fold_index, fold in enumerate(plan.folds):
            n_test = sum(1 for rid in fold.test if labels_by_id[rid] == label)
            if abs(n_test - population / plan.k) > 1:
                raise SplitError(
                    f"fold {fold_index}: {label} test count {n_test} deviates from "
                    f"{population}/{plan.k} by more than 1"
                )


# --- file formats ---------------------------------------------------------------


def write_plan(plan: SplitPlan, path: Path | str) -> None:
    doc = {
        "k": plan.k,
        "seed": plan.seed,
        "scheme": plan.scheme,
        "folds": [
            {"train": list(f.train), "validation": list(f.validation), "test": list(f.test)}
            for f in plan.folds
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_plan(path: Path | str) -> SplitPlan:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    folds = tuple(
        FoldAssignment(
            train=tuple(f["train"]), validation=tuple(f["validation"]), test=tuple(f["test"])
        )
        for f in doc["folds"]
    )
    return SplitPlan(k=doc["k"], seed=doc["seed"], scheme=doc["scheme"], folds=folds)


def render_count_table(table: SplitCountTable) -> str:
    """Text table of per-class, per-fold counts (training, augmented,
    validation, test column order)."""
    header = f"{'Class':<16}{'Fold':>6}{'Train':>8}{'Augmented':>11}{'Val':>7}{'Test':>7}"
    lines = [header, "-" * len(header)]
    for i, label in enumerate(table.labels):
        for fold in range(table.k):
            lines.append(
                f"{label.value:<16}{fold:>6}{table.train[i, fold]:>8}"
                f"{table.augmented_train[i, fold]:>11}{table.validation[i, fold]:>7}"
                f"{table.test[i, fold]:>7}"
            )
    return "\n".join(lines) + "\n"
