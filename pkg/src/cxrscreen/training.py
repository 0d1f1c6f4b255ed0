"""Fine-tuning loop: mini-batch SGD with momentum on cross-entropy loss,
per-epoch validation tracking, best-validation-loss checkpointing.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .augment import AugmentedRecord, apply_descriptor
from .backbones import BuiltClassifier, build_classifier, input_spec as backbone_input_spec
from .catalog import BackboneInputSpec, ImageRecord, Label, decode_raster, prepare_model_array
from .util import CxrscreenError, sha256_file, stable_seed

logger = logging.getLogger(__name__)

TrainItem = ImageRecord | AugmentedRecord


class TrainingError(CxrscreenError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, backbone: str, epoch: int, batch: int):
        super().__init__(f"non-finite loss in {backbone}: epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    checkpoint_policy: str = "best_val_loss"
    weights: str = "pretrained"  # pretrained | auto | random
    head_only: bool = False
    deterministic: bool = True
    device: str = "cpu"
    loss: str = "categorical_cross_entropy"

    def __post_init__(self) -> None:
        # zero learning rate stays allowed as a no-op training diagnostic
        if self.learning_rate < 0 or self.momentum < 0:
            raise TrainingError("learning rate and momentum must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("batch size and epochs must be at least 1")
        if self.checkpoint_policy != "best_val_loss":
            raise TrainingError(f"unknown checkpoint policy {self.checkpoint_policy!r}")
        if self.loss != "categorical_cross_entropy":
            raise TrainingError("only categorical cross-entropy is supported")


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class FoldModel:
    backbone_name: str
    fold_index: int
    model: nn.Module
    class_labels: tuple[str, ...]
    input_spec: BackboneInputSpec
    history: tuple[HistoryRow, ...]
    best_epoch: int
    pretrain_corpus_used: str
    artifact_dir: Path | None = None


class XrayDataset(Dataset):
    """Tensors from (record, descriptor) pairs: decode, apply the transform
    descriptor if any, then resize and standardize for the backbone."""

    def __init__(
        self,
        items: Sequence[tuple[ImageRecord, object]],
        input_spec: BackboneInputSpec,
        class_labels: Sequence[str],
        fill_value: float = 0.0,
    ):
        self.items = [
            (item, None) if isinstance(item, ImageRecord) else tuple(item) for item in items
        ]
        self.input_spec = input_spec
        self.class_index = {label: i for i, label in enumerate(class_labels)}
        self.fill_value = fill_value

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, idx: int):
        record, descriptor = self.items[idx]
        raster = decode_raster(record)
        if descriptor is not None:
            raster = apply_descriptor(raster, descriptor, self.fill_value)
        array = prepare_model_array(raster, self.input_spec)
        label = record.label.value if isinstance(record.label, Label) else str(record.label)
        return torch.from_numpy(array), self.class_index[label]


def resolve_items(
    items: Sequence[TrainItem], records_by_id: dict[str, ImageRecord]
) -> list[tuple[ImageRecord, object]]:
    """Normalize a mixed record/augmented-record stream to (record, descriptor)."""
    resolved = []
    for item in items:
        if isinstance(item, AugmentedRecord):
            resolved.append((records_by_id[item.parent_record_id], item.transform))
        else:
            resolved.append((item, None))
    return resolved


def _epoch_pass(
    model: nn.Module,
    loader: DataLoader,
    criterion: nn.Module,
    device: torch.device,
    optimizer: torch.optim.Optimizer | None,
    backbone: str,
    epoch: int,
) -> tuple[float, float]:
    training = optimizer is not None
    model.train(training)
    loss_sum, correct, seen = 0.0, 0, 0
    with torch.set_grad_enabled(training):
        for batch_index, (inputs, targets) in enumerate(loader):
            inputs = inputs.to(device)
            targets = targets.to(device)
            if training:
                optimizer.zero_grad()
            outputs = model(inputs)
            loss = criterion(outputs, targets)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(backbone, epoch, batch_index)
            if training:
                loss.backward()
                optimizer.step()
            loss_sum += loss.item() * len(targets)
            correct += int((outputs.argmax(dim=1) == targets).sum())
            seen += len(targets)
    return loss_sum / seen, correct / seen


def train_fold(
    classifier: BuiltClassifier,
    train_items: Sequence[TrainItem],
    val_items: Sequence[TrainItem],
    config: TrainingConfig,
    class_labels: Sequence[str],
    records_by_id: dict[str, ImageRecord],
    fold_index: int = 0,
) -> FoldModel:
    """Run exactly config.epochs epochs of SGD-with-momentum fine-tuning and
    return the checkpoint with minimum validation loss.

    Batch order is reshuffled each epoch from the run seed; a fold whose loss
    goes non-finite aborts with the offending epoch and batch.
    """
    if not train_items or not val_items:
        raise TrainingError("training and validation streams must be non-empty")
    train_parents = {
        i.parent_record_id if isinstance(i, AugmentedRecord) else i.record_id for i in train_items
    }
    val_parents = {
        i.parent_record_id if isinstance(i, AugmentedRecord) else i.record_id for i in val_items
    }
    if train_parents & val_parents:
        raise TrainingError("training and validation overlap by parent record")

    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(stable_seed("train", config.seed, classifier.name, fold_index) % 2**63)
    device = torch.device(config.device)
    model = classifier.model.to(device)

    if config.head_only:
        head_prefix = classifier.spec.head_location
        for name, p in model.named_parameters():
            p.requires_grad_(name.startswith(head_prefix))
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    criterion = nn.CrossEntropyLoss()

    spec = backbone_input_spec(classifier.name)
    train_ds = XrayDataset(resolve_items(train_items, records_by_id), spec, class_labels)
    val_ds = XrayDataset(resolve_items(val_items, records_by_id), spec, class_labels)
    shuffle_gen = torch.Generator()
    shuffle_gen.manual_seed(stable_seed("shuffle", config.seed, classifier.name, fold_index) % 2**63)
    train_loader = DataLoader(
        train_ds, batch_size=config.batch_size, shuffle=True, generator=shuffle_gen, num_workers=0
    )
    val_loader = DataLoader(val_ds, batch_size=config.batch_size, shuffle=False, num_workers=0)

    history: list[HistoryRow] = []
    best_state: dict | None = None
    best_loss = float("inf")
    best_epoch = -1
    for epoch in range(config.epochs):
        train_loss, train_acc = _epoch_pass(
            model, train_loader, criterion, device, optimizer, classifier.name, epoch
        )
        val_loss, val_acc = _epoch_pass(
            model, val_loader, criterion, device, None, classifier.name, epoch
        )
        history.append(HistoryRow(epoch, train_loss, train_acc, val_loss, val_acc))
        logger.info(
            "%s fold %d epoch %d: train %.4f/%.3f val %.4f/%.3f",
            classifier.name, fold_index, epoch, train_loss, train_acc, val_loss, val_acc,
        )
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    return FoldModel(
        backbone_name=classifier.name,
        fold_index=fold_index,
        model=model,
        class_labels=tuple(class_labels),
        input_spec=spec,
        history=tuple(history),
        best_epoch=best_epoch,
        pretrain_corpus_used=classifier.pretrain_corpus_used,
    )


def predict(
    fold_model: FoldModel,
    items: Sequence[TrainItem],
    records_by_id: dict[str, ImageRecord],
    batch_size: int = 32,
) -> np.ndarray:
    """Per-record probability vectors (softmax over class scores), row sum 1."""
    ds = XrayDataset(
        resolve_items(items, records_by_id), fold_model.input_spec, fold_model.class_labels
    )
    loader = DataLoader(ds, batch_size=batch_size, shuffle=False, num_workers=0)
    device = next(fold_model.model.parameters()).device
    fold_model.model.eval()
    chunks = []
    side = fold_model.input_spec.input_side
    with torch.no_grad():
        for inputs, _ in loader:
            if inputs.shape[-2:] != (side, side):
                raise TrainingError(
                    f"{fold_model.backbone_name} expects {side}x{side} input, got {tuple(inputs.shape[-2:])}"
                )
            logits = fold_model.model(inputs.to(device))
            chunks.append(torch.softmax(logits, dim=1).cpu().numpy())
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, len(fold_model.class_labels)))


def predicted_labels(probabilities: np.ndarray, class_labels: Sequence[str]) -> list[str]:
    # argmax breaks ties toward the lowest class index
    return [class_labels[i] for i in probabilities.argmax(axis=1)]


# --- persistence -------------------------------------------------------------------


def save_fold_model(fold_model: FoldModel, directory: Path | str, config: TrainingConfig) -> Path:
    """Weights plus metadata sidecar and per-epoch history table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights_path = directory / "weights.pt"
    torch.save(fold_model.model.state_dict(), weights_path)
    history_path = directory / "history.tsv"
    rows = ["epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc"]
    rows += [
        f"{h.epoch}\t{h.train_loss!r}\t{h.train_acc!r}\t{h.val_loss!r}\t{h.val_acc!r}"
        for h in fold_model.history
    ]
    history_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    metadata = {
        "backbone": fold_model.backbone_name,
        "fold_index": fold_model.fold_index,
        "num_classes": len(fold_model.class_labels),
        "class_labels": list(fold_model.class_labels),
        "best_epoch": fold_model.best_epoch,
        "pretrain_corpus_used": fold_model.pretrain_corpus_used,
        "config": asdict(config),
        "weights_checksum": sha256_file(weights_path),
    }
    (directory / "metadata.json").write_text(json.dumps(metadata, indent=2) + "\n", encoding="utf-8")
    fold_model.artifact_dir = directory
    return directory


def load_fold_model(directory: Path | str) -> FoldModel:
    """Rebuild the architecture and load saved weights; the result predicts
    identically to the model that was saved."""
    directory = Path(directory)
    metadata = json.loads((directory / "metadata.json").read_text(encoding="utf-8"))
    weights_path = directory / "weights.pt"
    checksum = sha256_file(weights_path)
    if checksum != metadata["weights_checksum"]:
        raise TrainingError(f"weight file {weights_path} does not match its recorded checksum")
    classifier = build_classifier(
        metadata["backbone"], metadata["num_classes"], weights_policy="random"
    )
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    classifier.model.load_state_dict(state)
    history = []
    for line in (directory / "history.tsv").read_text(encoding="utf-8").splitlines()[1:]:
        epoch, tl, ta, vl, va = line.split("\t")
        history.append(HistoryRow(int(epoch), float(tl), float(ta), float(vl), float(va)))
    return FoldModel(
        backbone_name=metadata["backbone"],
        fold_index=metadata["fold_index"],
        model=classifier.model,
        class_labels=tuple(metadata["class_labels"]),
        input_spec=backbone_input_spec(metadata["backbone"]),
        history=tuple(history),
        best_epoch=metadata["best_epoch"],
        pretrain_corpus_used=metadata["pretrain_corpus_used"],
        artifact_dir=directory,
    )


# --- gradient sanity ----------------------------------------------------------------


def head_gradient_check(
    seed: int = 0,
    n_samples: int = 12,
    n_features: int = 7,
    hidden: int = 5,
    num_classes: int = 3,
    step: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-finite-difference
    gradients of cross-entropy on a 2-layer head over frozen random features.

    Exercises the loss/backward plumbing without any heavy backbone.
    """
    gen = torch.Generator().manual_seed(seed)
    features = torch.randn(n_samples, n_features, generator=gen, dtype=torch.float64)
    targets = torch.randint(0, num_classes, (n_samples,), generator=gen)
    head = nn.Sequential(
        nn.Linear(n_features, hidden), nn.ReLU(), nn.Linear(hidden, num_classes)
    ).double()
    criterion = nn.CrossEntropyLoss()

    loss = criterion(head(features), targets)
    loss.backward()

    worst = 0.0
    with torch.no_grad():
        for param in head.parameters():
            analytic = param.grad
            flat = param.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                upper = criterion(head(features), targets).item()
                flat[i] = original - step
                lower = criterion(head(features), targets).item()
                flat[i] = original
                numeric = (upper - lower) / (2 * step)
                a = analytic.view(-1)[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
    return worst
