from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))  # for the oracle helpers

from cxrscreen.catalog import ImageRecord, Label, Manifest, ingest_directory

TOY_PER_CLASS = 25


def _disc_image(rng, side):
    """Bright centered disc on a dark field (stands in for the covid class)."""
    img = rng.normal(30, 6, (side, side))
    yy, xx = np.mgrid[0:side, 0:side]
    r = np.hypot(yy - side / 2, xx - side / 2)
    img[r < side * 0.32] = rng.normal(210, 8, (r < side * 0.32).sum())
    return img


def _gradient_image(rng, side):
    """Dim smooth vertical gradient (stands in for the normal class)."""
    base = np.linspace(35, 100, side)[:, None] * np.ones((1, side))
    return base + rng.normal(0, 5, (side, side))


def _stripe_image(rng, side):
    """Mid-bright vertical stripes (stands in for the viral class)."""
    xx = np.tile(np.arange(side), (side, 1))
    img = np.where((xx // 7) % 2 == 0, 165.0, 95.0)
    return img + rng.normal(0, 6, (side, side))


_GENERATORS = {
    "covid": _disc_image,
    "normal": _gradient_image,
    "viral": _stripe_image,
}


def write_toy_corpus(root: Path, per_class: int = TOY_PER_CLASS, seed: int = 7) -> Path:
    rng = np.random.default_rng(seed)
    for cls, gen in _GENERATORS.items():
        sub = root / cls
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            side = int(rng.integers(88, 120))
            arr = np.clip(gen(rng, side), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(sub / f"{cls}_{i:03d}.png")
    return root


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory) -> Path:
    return write_toy_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def toy_layout() -> dict[str, Label]:
    return {"covid": Label.COVID19, "normal": Label.NORMAL, "viral": Label.VIRAL_PNEUMONIA}


@pytest.fixture(scope="session")
def toy_manifest(toy_corpus, toy_layout) -> Manifest:
    manifest, findings = ingest_directory(toy_corpus, toy_layout)
    assert not findings
    return manifest


def synthetic_manifest(counts: dict[Label, int]) -> Manifest:
    """File-less manifest for split/metric logic that never touches disk."""
    records = []
    for label, n in counts.items():
        stem = label.value.lower()
        for i in range(n):
            records.append(
                ImageRecord(
                    record_id=f"{stem[:3]}{i:05d}",
                    path=f"/corpus/{stem}/{i:05d}.png",
                    label=label,
                    checksum=f"{stem}{i:05d}",
                    width=64,
                    height=64,
                    source_tag=stem,
                )
            )
    records.sort(key=lambda r: r.path)
    return Manifest(records=tuple(records), created_at="1970-01-01T00:00:00+00:00")


@pytest.fixture
def make_manifest():
    return synthetic_manifest
