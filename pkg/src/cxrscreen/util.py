"""Shared helpers: stable seeding, hashing, percent formatting."""

from __future__ import annotations

import hashlib
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

HASH_CHUNK = 1024 * 1024


class CxrscreenError(Exception):
    """Base class for all domain errors; the CLI maps these to exit code 2."""


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(HASH_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def stable_seed(*parts: object) -> int:
    """Derive a 64-bit seed from parts by content hashing.

    Independent of PYTHONHASHSEED, stable across runs and platforms, so
    per-class/per-fold sub-streams never depend on each other.
    """
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def rng_for(*parts: object) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


def format_percent(ratio: float, decimals: int = 2) -> str:
    """Format a [0,1] ratio as a percentage, half-up to `decimals` places."""
    q = Decimal(1).scaleb(-decimals)
    return str((Decimal(repr(ratio)) * 100).quantize(q, rounding=ROUND_HALF_UP))
