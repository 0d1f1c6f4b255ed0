"""Intermediate convolutional activation capture and comparison panels.

Activations at a named layer are grabbed with a forward hook, min-max
normalized per channel, and the channel with the largest mean absolute
activation is rendered next to the original image, one row per class.
"""

from __future__ import annotations

import difflib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .catalog import ImageRecord, decode_raster, load_model_input, resize_bilinear
from .training import FoldModel
from .util import CxrscreenError

logger = logging.getLogger(__name__)

PANEL_COLORMAP = "inferno"


class ActivationError(CxrscreenError):
    pass


class UnknownLayerError(ActivationError):
    def __init__(self, layer: str, candidates: Sequence[str]):
        near = difflib.get_close_matches(layer, candidates, n=5, cutoff=0.3)
        hint = f"; nearest: {', '.join(near)}" if near else ""
        super().__init__(f"layer {layer!r} not found{hint}")
        self.nearest = tuple(near)


@dataclass(frozen=True)
class ActivationMap:
    layer_identifier: str
    values: np.ndarray  # (channels, h, w) float32
    source_record_id: str
    constant_channels: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ActivationError(f"activation values must be (C, H, W), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ActivationError("activation map contains non-finite values")

    @property
    def channel_count(self) -> int:
        return int(self.values.shape[0])


def layer_inventory(model: torch.nn.Module) -> list[str]:
    return [name for name, _ in model.named_modules() if name]


def conv_layer_names(model: torch.nn.Module) -> list[str]:
    """Convolutional layers in forward-definition order, so ordinal references
    like "the 14th convolutional layer" can be resolved and documented."""
    return [
        name for name, mod in model.named_modules() if isinstance(mod, torch.nn.Conv2d)
    ]


def capture_activations(
    fold_model: FoldModel, record: ImageRecord, layer_identifier: str
) -> ActivationMap:
    """One forward pass with a hook on the named layer; the model is left
    untouched (eval mode, no gradients, hook removed afterwards)."""
    model = fold_model.model
    names = layer_inventory(model)
    if layer_identifier not in names:
        raise UnknownLayerError(layer_identifier, names)
    module = model.get_submodule(layer_identifier)

    captured: list[torch.Tensor] = []

    def _hook(_mod, _inputs, output):
        captured.append(output.detach())

    handle = module.register_forward_hook(_hook)
    try:
        array = load_model_input(record, fold_model.input_spec)
        model.eval()
        with torch.no_grad():
            model(torch.from_numpy(array).unsqueeze(0))
    finally:
        handle.remove()
    if not captured:
        raise ActivationError(f"layer {layer_identifier!r} produced no output")
    values = captured[0].squeeze(0).cpu().numpy().astype(np.float32)
    if values.ndim == 1:  # fully-connected layer: treat as C maps of 1x1
        values = values[:, None, None]
    return ActivationMap(
        layer_identifier=layer_identifier, values=values, source_record_id=record.record_id
    )


def normalize_map(activation: ActivationMap) -> ActivationMap:
    """Per-channel min-max rescale to [0, 1]; constant channels become zeros
    and are flagged. Idempotent on non-constant channels."""
    values = activation.values.astype(np.float32).copy()
    constant: list[int] = []
    for c in range(values.shape[0]):
        lo = values[c].min()
        hi = values[c].max()
        if hi > lo:
            values[c] = (values[c] - lo) / (hi - lo)
        else:
            values[c] = 0.0
            constant.append(c)
    return ActivationMap(
        layer_identifier=activation.layer_identifier,
        values=values,
        source_record_id=activation.source_record_id,
        constant_channels=tuple(constant),
    )


def strongest_channel(activation: ActivationMap) -> int:
    """Index of the channel with maximal mean absolute activation; ties break
    toward the lowest index."""
    if activation.channel_count < 1:
        raise ActivationError("activation map has no channels")
    strength = np.abs(activation.values).mean(axis=(1, 2))
    return int(strength.argmax())


def parameter_checksum(model: torch.nn.Module) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.cpu().numpy().tobytes())
    return digest.hexdigest()


def render_panel(
    records: Sequence[ImageRecord],
    fold_model: FoldModel,
    layer_identifiers: Sequence[str],
    out_path: Path | str,
) -> Path:
    """Grid PNG: one row per record (class), columns are the original image
    followed by each layer's strongest-channel normalized map upsampled to the
    original size. A failed cell renders as a placeholder; the file is still
    produced. A metadata sidecar lists the channel chosen per cell."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not layer_identifiers:
        raise ActivationError("need at least one layer to render")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    n_rows = len(records)
    n_cols = 1 + len(layer_identifiers)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.4 * n_cols, 2.4 * n_rows), squeeze=False)
    cells = []
    for r, record in enumerate(records):
        raster = decode_raster(record)
        gray = raster if raster.ndim == 2 else raster.mean(axis=2)
        axes[r][0].imshow(gray, cmap="gray", interpolation="nearest")
        axes[r][0].set_ylabel(record.label.value, fontsize=8)
        axes[r][0].set_xticks([])
        axes[r][0].set_yticks([])
        if r == 0:
            axes[r][0].set_title("original", fontsize=8)
        for c, layer in enumerate(layer_identifiers, start=1):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(layer, fontsize=7)
            try:
                amap = normalize_map(capture_activations(fold_model, record, layer))
                channel = strongest_channel(amap)
                upsampled = resize_bilinear(amap.values[channel], max(gray.shape))
                ax.imshow(upsampled, cmap=PANEL_COLORMAP, vmin=0.0, vmax=1.0, interpolation="nearest")
                cells.append(
                    {
                        "record_id": record.record_id,
                        "layer_identifier": layer,
                        "channel": channel,
                    }
                )
            except (ActivationError, OSError) as exc:
                logger.warning("panel cell failed (%s / %s): %s", record.record_id, layer, exc)
                ax.imshow(np.full((8, 8), 0.5), cmap="gray", vmin=0, vmax=1)
                ax.text(0.5, 0.5, "error", ha="center", va="center", transform=ax.transAxes, fontsize=8)
                cells.append(
                    {
                        "record_id": record.record_id,
                        "layer_identifier": layer,
                        "channel": None,
                        "error": str(exc),
                    }
                )
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    out_path.with_suffix(".json").write_text(json.dumps(cells, indent=2) + "\n", encoding="utf-8")
    return out_path
