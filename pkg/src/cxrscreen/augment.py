"""Training-fold expansion by center rotation and sub-pixel translation.

Per training record the engine derives a descriptor list (exact angle and
translation parameters), deterministic in (seed, fold, record). Images are
rendered lazily from descriptors during training; a materialization helper
writes PNGs for debugging. Only training-role records are ever expanded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .catalog import Label, Manifest
from .splits import FoldAssignment, SplitCountTable
from .util import CxrscreenError, rng_for

logger = logging.getLogger(__name__)

ROTATE_TRANSLATE = "rotate+translate"
TRANSLATE = "translate"


class AugmentError(CxrscreenError):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: tuple[float, ...] = (5.0, -5.0, 10.0, -10.0, 15.0, -15.0)
    translation_range: tuple[float, float] = (-0.05, 0.05)
    copies_per_class: Mapping[str, int] = field(
        default_factory=lambda: {
            Label.COVID19.value: 6,
            Label.NORMAL.value: 1,
            Label.VIRAL_PNEUMONIA.value: 1,
        }
    )
    fill_value: float = 0.0
    seed: int = 0
    interpolation: str = "bilinear"

    def __post_init__(self) -> None:
        lo, hi = self.translation_range
        if not (-0.5 <= lo <= hi <= 0.5):
            raise AugmentError(f"translation range {self.translation_range} outside [-0.5, 0.5]")
        for label, copies in self.copies_per_class.items():
            if copies < 0:
                raise AugmentError(f"negative copy count for {label}")
        if self.interpolation != "bilinear":
            raise AugmentError("only bilinear interpolation is supported")


@dataclass(frozen=True)
class TransformDescriptor:
    kind: str  # ROTATE_TRANSLATE | TRANSLATE
    angle: float  # degrees, counter-clockwise positive; 0 for pure translation
    dx: float  # fraction of width, positive shifts right
    dy: float  # fraction of height, positive shifts down

    def parameter_string(self) -> str:
        return f"angle={self.angle};dx={self.dx!r};dy={self.dy!r}"


@dataclass(frozen=True)
class AugmentedRecord:
    parent_record_id: str
    derived_id: str
    label: Label
    transform: TransformDescriptor


def _restore_dtype(out: np.ndarray, dtype: np.dtype) -> np.ndarray:
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(dtype)
    return out.astype(dtype)


def _per_plane(image: np.ndarray, fn) -> np.ndarray:
    if image.ndim == 2:
        return fn(image)
    if image.ndim == 3:
        return np.stack([fn(image[:, :, c]) for c in range(image.shape[2])], axis=2)
    raise AugmentError(f"unsupported image shape {image.shape}")


def rotate(image: np.ndarray, degrees: float, fill_value: float = 0.0) -> np.ndarray:
    """Bilinear rotation about the image center; positive = counter-clockwise.

    Output has the input's shape and dtype; regions rotated in from outside
    the frame take `fill_value`.
    """
    if abs(degrees) > 45:
        raise AugmentError(f"|degrees| must be at most 45, got {degrees}")
    if image.size == 0:
        raise AugmentError("empty image")

    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    # output -> source map in (row, col) coordinates; visually counter-clockwise
    matrix = np.array([[cos, sin], [-sin, cos]], dtype=np.float64)

    def _one(plane: np.ndarray) -> np.ndarray:
        center = (np.asarray(plane.shape, dtype=np.float64) - 1) / 2
        offset = center - matrix @ center
        return ndimage.affine_transform(
            plane.astype(np.float64),
            matrix,
            offset=offset,
            order=1,
            mode="grid-constant",
            cval=fill_value,
        )

    return _restore_dtype(_per_plane(image, _one), image.dtype)


def translate(image: np.ndarray, dx: float, dy: float, fill_value: float = 0.0) -> np.ndarray:
    """Sub-pixel shift by (dx × width, dy × height) with bilinear sampling.

    Positive dx shifts content right, positive dy shifts it down; vacated
    pixels take `fill_value`.
    """
    if abs(dx) > 0.5 or abs(dy) > 0.5:
        raise AugmentError(f"|dx| and |dy| must be at most 0.5, got ({dx}, {dy})")
    if image.size == 0:
        raise AugmentError("empty image")

    def _one(plane: np.ndarray) -> np.ndarray:
        h, w = plane.shape
        return ndimage.shift(
            plane.astype(np.float64),
            (dy * h, dx * w),
            order=1,
            mode="grid-constant",
            cval=fill_value,
        )

    return _restore_dtype(_per_plane(image, _one), image.dtype)


def apply_descriptor(image: np.ndarray, desc: TransformDescriptor, fill_value: float = 0.0) -> np.ndarray:
    if desc.kind == ROTATE_TRANSLATE:
        return translate(rotate(image, desc.angle, fill_value), desc.dx, desc.dy, fill_value)
    if desc.kind == TRANSLATE:
        return translate(image, desc.dx, desc.dy, fill_value)
    raise AugmentError(f"unknown transform kind {desc.kind!r}")


def expand_training_fold(
    fold: FoldAssignment,
    manifest: Manifest,
    spec: AugmentationSpec,
    fold_index: int,
    count_table: SplitCountTable | None = None,
) -> list[AugmentedRecord]:
    """Descriptor list for one fold's training records.

    A class with copy count c > 1 cycles through the configured rotation
    angles, each composed with an independent uniform translation draw; c == 1
    yields a single translation draw. Validation and test records are never
    touched. When a count table is given, its augmented column for this fold
    is set to originals × (1 + copies).
    """
    if not fold.train:
        raise AugmentError(f"fold {fold_index} has no training records")
    records_by_id = manifest.by_id()
    present = {r.label.value for r in manifest.records}
    for label in spec.copies_per_class:
        if label not in present:
            logger.warning("copy count for %s ignored: class absent from manifest", label)

    held_out = set(fold.validation) | set(fold.test)
    augmented: list[AugmentedRecord] = []
    lo, hi = spec.translation_range
    for rid in fold.train:
        if rid in held_out:
            raise AugmentError(f"record {rid} appears in training and a held-out role")
        record = records_by_id[rid]
        copies = spec.copies_per_class.get(record.label.value, 0)
        if copies == 0:
            continue
        rng = rng_for("augment", spec.seed, fold_index, rid)
        for i in range(copies):
            dx = float(rng.uniform(lo, hi))
            dy = float(rng.uniform(lo, hi))
            if copies == 1:
                desc = TransformDescriptor(kind=TRANSLATE, angle=0.0, dx=dx, dy=dy)
            else:
                angle = spec.rotation_degrees[i % len(spec.rotation_degrees)]
                desc = TransformDescriptor(kind=ROTATE_TRANSLATE, angle=angle, dx=dx, dy=dy)
            augmented.append(
                AugmentedRecord(
                    parent_record_id=rid,
                    derived_id=f"{rid}-aug{i}",
                    label=record.label,
                    transform=desc,
                )
            )

    if count_table is not None:
        labels_by_id = {r.record_id: r.label for r in manifest.records}
        for i, label in enumerate(count_table.labels):
            n_train = sum(1 for rid in fold.train if labels_by_id[rid] == label)
            copies = spec.copies_per_class.get(label.value, 0)
            count_table.augmented_train[i, fold_index] = n_train * (1 + copies)
    return augmented


def check_leakage(augmented: Iterable[AugmentedRecord], fold: FoldAssignment) -> None:
    """Raise if any augmented parent escapes the fold's training set."""
    parents = {a.parent_record_id for a in augmented}
    if not parents.issubset(set(fold.train)):
        raise AugmentError("augmented parent outside the training set")
    leaked = parents & (set(fold.validation) | set(fold.test))
    if leaked:
        raise AugmentError(f"augmented parents leak into held-out roles: {sorted(leaked)[:5]}")


def write_descriptor_sidecar(records: Sequence[AugmentedRecord], path: Path | str) -> None:
    lines = ["derived_id\tparent_record_id\tkind\tparameters"]
    lines += [
        f"{a.derived_id}\t{a.parent_record_id}\t{a.transform.kind}\t{a.transform.parameter_string()}"
        for a in records
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def materialize(
    records: Sequence[AugmentedRecord],
    manifest: Manifest,
    out_dir: Path | str,
    fold_index: int,
) -> Path:
    """Write augmented images under <out>/aug/<fold>/<class>/<derived_id>.png
    plus the descriptor sidecar; for debugging only, training renders lazily."""
    from PIL import Image

    from .catalog import decode_raster

    records_by_id = manifest.by_id()
    base = Path(out_dir) / "aug" / f"fold{fold_index}"
    for aug in records:
        parent = records_by_id[aug.parent_record_id]
        raster = apply_descriptor(decode_raster(parent), aug.transform)
        target = base / parent.label.value
        target.mkdir(parents=True, exist_ok=True)
        if raster.ndim == 2:
            Image.fromarray(raster).save(target / f"{aug.derived_id}.png")
        else:
            Image.fromarray(raster, mode="RGB").save(target / f"{aug.derived_id}.png")
    write_descriptor_sidecar(records, base / "descriptors.tsv")
    return base
