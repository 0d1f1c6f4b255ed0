"""Image catalog: ingest a labeled directory tree into a checksummed manifest
and turn records into model-ready arrays.

The manifest file is UTF-8 tab-separated with a fixed header, rows sorted by
path, so identical corpora always serialize to identical bytes.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .util import CxrscreenError, sha256_file

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("record_id", "path", "label", "checksum", "width", "height", "source_tag")
MANIFEST_SCHEMA_VERSION = 1

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class Label(str, Enum):
    COVID19 = "COVID19"
    NORMAL = "NORMAL"
    VIRAL_PNEUMONIA = "VIRAL_PNEUMONIA"

    def __str__(self) -> str:  # TSV cell, not the enum repr
        return self.value


#: Canonical class order used for confusion matrices, plans and reports.
CLASS_ORDER: tuple[Label, ...] = (Label.COVID19, Label.NORMAL, Label.VIRAL_PNEUMONIA)


class CatalogError(CxrscreenError):
    """Unrecoverable catalog problem (unreadable root, bad manifest file)."""


class DecodeError(CatalogError):
    def __init__(self, record_id: str, detail: str):
        super().__init__(f"cannot decode image for record {record_id}: {detail}")
        self.record_id = record_id


@dataclass(frozen=True)
class ImageRecord:
    record_id: str
    path: str  # POSIX-style absolute path
    label: Label
    checksum: str  # sha256 over raw file bytes
    width: int
    height: int
    source_tag: str


@dataclass(frozen=True)
class Manifest:
    records: tuple[ImageRecord, ...]
    created_at: str
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self) -> None:
        paths = [r.path for r in self.records]
        if paths != sorted(paths):
            raise CatalogError("manifest records must be sorted by path")
        seen: dict[str, str] = {}
        for r in self.records:
            if r.checksum in seen:
                raise CatalogError(
                    f"duplicate checksum in manifest: {r.record_id} repeats {seen[r.checksum]}"
                )
            seen[r.checksum] = r.record_id

    @property
    def class_counts(self) -> dict[Label, int]:
        counts = {label: 0 for label in CLASS_ORDER}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.record_id: r for r in self.records}

    def restrict(self, labels: Iterable[Label]) -> "Manifest":
        """Manifest view holding only the given classes (order preserved)."""
        keep = set(labels)
        return Manifest(
            records=tuple(r for r in self.records if r.label in keep),
            created_at=self.created_at,
            schema_version=self.schema_version,
        )


@dataclass(frozen=True)
class Finding:
    severity: str  # "error" | "warning"
    record_id: str  # "-" when no record is involved
    code: str
    detail: str

    def as_line(self) -> str:
        return f"{self.severity}\t{self.record_id}\t{self.code}\t{self.detail}"


@dataclass(frozen=True)
class BackboneInputSpec:
    backbone_name: str
    input_side: int
    channel_count: int = 3
    normalization_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    normalization_std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self) -> None:
        if self.input_side not in (224, 227, 299):
            raise ValueError(f"unsupported input side {self.input_side}")


def _now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _record_id(rel_path: str, checksum: str) -> str:
    return hashlib.sha256(f"{rel_path}\n{checksum}".encode()).hexdigest()[:16]


def _probe_image(path: Path) -> tuple[int, int]:
    """Return (width, height); raises if the file is not a decodable raster."""
    with Image.open(path) as img:
        img.load()
        return img.width, img.height


def ingest_directory(
    root: Path | str,
    class_layout: Mapping[str, Label],
    max_workers: int = 8,
) -> tuple[Manifest, list[Finding]]:
    """Scan mapped subdirectories of `root` into a manifest.

    Non-image files are skipped and logged; undecodable images and duplicate
    contents are excluded and listed in the returned findings. Files are
    hashed in parallel but merged in sorted-path order, so the result is
    deterministic.
    """
    root = Path(root)
    if not root.is_dir():
        raise CatalogError(f"corpus root is not a readable directory: {root}")

    candidates: list[tuple[Path, Label, str]] = []
    findings: list[Finding] = []
    for subdir_name in sorted(class_layout):
        label = class_layout[subdir_name]
        subdir = root / subdir_name
        if not subdir.is_dir():
            raise CatalogError(f"mapped class directory missing: {subdir}")
        files = sorted(p for p in subdir.rglob("*") if p.is_file())
        images = []
        for p in files:
            if p.suffix.lower() in IMAGE_SUFFIXES:
                images.append(p)
            else:
                logger.info("skipping non-image file %s", p)
        if not images:
            logger.warning("class directory %s has no image files", subdir)
            findings.append(
                Finding("warning", "-", "empty-class", f"{subdir_name}: no image files for {label}")
            )
        candidates.extend((p, label, subdir_name) for p in images)

    candidates.sort(key=lambda item: item[0].resolve().as_posix())

    def _examine(item: tuple[Path, Label, str]):
        path, label, tag = item
        checksum = sha256_file(path)
        try:
            width, height = _probe_image(path)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            return path, label, tag, checksum, None, str(exc)
        return path, label, tag, checksum, (width, height), None

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        examined = list(pool.map(_examine, candidates))

    records: list[ImageRecord] = []
    seen_checksums: dict[str, str] = {}
    for path, label, tag, checksum, dims, decode_err in examined:
        abspath = path.resolve().as_posix()
        rel = path.resolve().relative_to(root.resolve()).as_posix()
        rid = _record_id(rel, checksum)
        if decode_err is not None:
            findings.append(Finding("error", rid, "undecodable", f"{abspath}: {decode_err}"))
            continue
        if checksum in seen_checksums:
            findings.append(
                Finding(
                    "warning",
                    rid,
                    "duplicate",
                    f"{abspath}: identical content to record {seen_checksums[checksum]}",
                )
            )
            continue
        seen_checksums[checksum] = rid
        records.append(
            ImageRecord(
                record_id=rid,
                path=abspath,
                label=label,
                checksum=checksum,
                width=dims[0],
                height=dims[1],
                source_tag=tag,
            )
        )

    manifest = Manifest(records=tuple(records), created_at=_now_iso())
    return manifest, findings


def verify_manifest(manifest: Manifest, max_workers: int = 8) -> list[Finding]:
    """Re-hash and re-decode every file; empty result means fully valid."""

    def _check(record: ImageRecord) -> Finding | None:
        path = Path(record.path)
        if not path.is_file():
            return Finding("error", record.record_id, "missing", record.path)
        checksum = sha256_file(path)
        if checksum != record.checksum:
            return Finding(
                "error",
                record.record_id,
                "checksum-drift",
                f"{record.path}: expected {record.checksum}, found {checksum}",
            )
        try:
            _probe_image(path)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            return Finding("error", record.record_id, "undecodable", f"{record.path}: {exc}")
        return None

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(_check, manifest.records))
    return [f for f in results if f is not None]


def balance_subsample(manifest: Manifest, per_class_count: int, seed: int) -> Manifest:
    """Uniform random per-class subsample to exactly `per_class_count` records.

    Selection depends only on (manifest, per_class_count, seed); classes
    already at the target count pass through whole. Sub-streams are derived
    per class, so adding a class never changes another class's selection.
    """
    from .util import rng_for

    counts = manifest.class_counts
    kept: list[ImageRecord] = []
    for label in CLASS_ORDER:
        members = [r for r in manifest.records if r.label == label]
        if not members:
            continue
        if counts[label] < per_class_count:
            raise CatalogError(
                f"class {label} has {counts[label]} records, fewer than requested {per_class_count}"
            )
        if counts[label] == per_class_count:
            kept.extend(members)
            continue
        rng = rng_for("balance", seed, label.value)
        picked = rng.permutation(len(members))[:per_class_count]
        kept.extend(members[i] for i in sorted(picked))
    kept.sort(key=lambda r: r.path)
    return Manifest(records=tuple(kept), created_at=manifest.created_at)


# --- model input preparation --------------------------------------------------


def decode_raster(record: ImageRecord) -> np.ndarray:
    """Decode to uint8: (H, W) for single-channel sources, (H, W, 3) otherwise."""
    try:
        with Image.open(record.path) as img:
            img.load()
            if img.mode in ("L", "I;16", "I", "1"):
                return np.asarray(img.convert("L"), dtype=np.uint8)
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(record.record_id, str(exc)) from exc


def resize_bilinear(plane: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of one 2-D plane to side×side, float32."""
    img = Image.fromarray(np.asarray(plane, dtype=np.float32), mode="F")
    return np.asarray(img.resize((side, side), Image.BILINEAR), dtype=np.float32)


def prepare_model_array(raster: np.ndarray, spec: BackboneInputSpec) -> np.ndarray:
    """Raster (grayscale or RGB, any size) -> standardized (3, side, side) float32.

    Steps: replicate grayscale to 3 channels, bilinear resize, scale to [0,1],
    per-channel standardization with the spec's statistics.
    """
    if raster.ndim == 2:
        channels = [raster, raster, raster]
    elif raster.ndim == 3 and raster.shape[2] == 3:
        channels = [raster[:, :, i] for i in range(3)]
    else:
        raise ValueError(f"unsupported raster shape {raster.shape}")
    side = spec.input_side
    out = np.empty((3, side, side), dtype=np.float32)
    for i, plane in enumerate(channels):
        scaled = resize_bilinear(plane, side) / 255.0
        out[i] = (scaled - spec.normalization_mean[i]) / spec.normalization_std[i]
    return out


def load_model_input(record: ImageRecord, spec: BackboneInputSpec) -> np.ndarray:
    return prepare_model_array(decode_raster(record), spec)


# --- file formats --------------------------------------------------------------


def write_manifest(manifest: Manifest, path: Path | str) -> None:
    lines = ["\t".join(MANIFEST_HEADER)]
    for r in manifest.records:
        lines.append(
            "\t".join(
                (r.record_id, r.path, r.label.value, r.checksum, str(r.width), str(r.height), r.source_tag)
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_manifest(path: Path | str) -> Manifest:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln]
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise CatalogError(f"not a manifest file (bad header): {path}")
    records = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        if len(cells) != len(MANIFEST_HEADER):
            raise CatalogError(f"malformed manifest row: {ln!r}")
        rid, fpath, label, checksum, width, height, tag = cells
        records.append(
            ImageRecord(
                record_id=rid,
                path=fpath,
                label=Label(label),
                checksum=checksum,
                width=int(width),
                height=int(height),
                source_tag=tag,
            )
        )
    return Manifest(records=tuple(records), created_at=_now_iso())


def write_report(findings: Sequence[Finding], path: Path | str) -> None:
    body = "".join(f.as_line() + "\n" for f in findings)
    Path(path).write_text(body, encoding="utf-8", newline="\n")
