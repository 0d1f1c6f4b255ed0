"""Pretrained CNN backbone registry: construction, head replacement, input specs.

Three shallow networks (SqueezeNet, MobileNetv2, ResNet18) and five deep ones
(InceptionV3, ResNet101, CheXNet, DenseNet201, VGG19). CheXNet is a
121-layer DenseNet loaded from chest-X-ray-pretrained weights when a weight
file is configured; every other backbone pulls general-image weights from
torchvision. The `weights` policy controls what happens when a source is
unavailable: "pretrained" raises, "auto" falls back to random initialization
with a warning, "random" skips pretraining entirely (smoke and CI runs).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import torch
from torch import nn
from torchvision import models

from .catalog import BackboneInputSpec
from .util import CxrscreenError, stable_seed

logger = logging.getLogger(__name__)

GENERAL_IMAGES = "GENERAL_IMAGES"
CHEST_XRAY = "CHEST_XRAY"
RANDOM_INIT = "RANDOM_INIT"

CHEXNET_WEIGHTS_ENV = "CXRSCREEN_CHEXNET_WEIGHTS"


class BackboneError(CxrscreenError):
    pass


class PretrainedWeightsError(BackboneError):
    def __init__(self, backbone: str, source: str, detail: str):
        super().__init__(
            f"pretrained weights unavailable for {backbone} (source: {source}): {detail}"
        )
        self.backbone = backbone
        self.source = source


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_side: int
    pretrain_corpus: str
    head_location: str  # dotted module path of the classifier layer to replace


BACKBONE_SPECS: dict[str, BackboneSpec] = {
    "SqueezeNet": BackboneSpec("SqueezeNet", 227, GENERAL_IMAGES, "classifier.1"),
    "MobileNetv2": BackboneSpec("MobileNetv2", 224, GENERAL_IMAGES, "classifier.1"),
    "ResNet18": BackboneSpec("ResNet18", 224, GENERAL_IMAGES, "fc"),
    "ResNet101": BackboneSpec("ResNet101", 224, GENERAL_IMAGES, "fc"),
    "InceptionV3": BackboneSpec("InceptionV3", 299, GENERAL_IMAGES, "fc"),
    "CheXNet": BackboneSpec("CheXNet", 224, CHEST_XRAY, "classifier"),
    "DenseNet201": BackboneSpec("DenseNet201", 224, GENERAL_IMAGES, "classifier"),
    "VGG19": BackboneSpec("VGG19", 224, GENERAL_IMAGES, "classifier.6"),
}

_TORCHVISION_FACTORIES = {
    "SqueezeNet": (models.squeezenet1_1, "SqueezeNet1_1_Weights"),
    "MobileNetv2": (models.mobilenet_v2, "MobileNet_V2_Weights"),
    "ResNet18": (models.resnet18, "ResNet18_Weights"),
    "ResNet101": (models.resnet101, "ResNet101_Weights"),
    "InceptionV3": (models.inception_v3, "Inception_V3_Weights"),
    "CheXNet": (models.densenet121, "DenseNet121_Weights"),
    "DenseNet201": (models.densenet201, "DenseNet201_Weights"),
    "VGG19": (models.vgg19, "VGG19_Weights"),
}


def backbone_spec(name: str) -> BackboneSpec:
    if name not in BACKBONE_SPECS:
        raise BackboneError(f"unknown backbone {name!r}; known: {sorted(BACKBONE_SPECS)}")
    return BACKBONE_SPECS[name]


def input_spec(name: str) -> BackboneInputSpec:
    spec = backbone_spec(name)
    return BackboneInputSpec(backbone_name=spec.name, input_side=spec.input_side)


def weight_source(name: str) -> str:
    if name == "CheXNet":
        configured = os.environ.get(CHEXNET_WEIGHTS_ENV, "")
        return configured or f"${CHEXNET_WEIGHTS_ENV} (unset)"
    _, enum_name = _TORCHVISION_FACTORIES[name]
    return f"torchvision {enum_name}.IMAGENET1K_V1"


@dataclass
class BuiltClassifier:
    name: str
    model: nn.Module
    num_classes: int
    pretrain_corpus_used: str  # CHEST_XRAY | GENERAL_IMAGES | RANDOM_INIT
    spec: BackboneSpec

    @property
    def head(self) -> nn.Module:
        return self.model.get_submodule(self.spec.head_location)


def _replace_head(name: str, model: nn.Module, num_classes: int) -> None:
    if name == "SqueezeNet":
        model.classifier[1] = nn.Conv2d(512, num_classes, kernel_size=1)
        model.num_classes = num_classes
    elif name == "MobileNetv2":
        model.classifier[1] = nn.Linear(model.classifier[1].in_features, num_classes)
    elif name in ("ResNet18", "ResNet101", "InceptionV3"):
        model.fc = nn.Linear(model.fc.in_features, num_classes)
    elif name in ("CheXNet", "DenseNet201"):
        model.classifier = nn.Linear(model.classifier.in_features, num_classes)
    elif name == "VGG19":
        model.classifier[6] = nn.Linear(model.classifier[6].in_features, num_classes)
    else:
        raise BackboneError(f"no head replacement rule for {name}")


def _load_chexnet_base(weights_policy: str) -> tuple[nn.Module, str]:
    """DenseNet121 with chest-X-ray weights from the configured file, falling
    back per policy; the fallback is always reported, never silent."""
    path = os.environ.get(CHEXNET_WEIGHTS_ENV, "")
    if path:
        try:
            model = models.densenet121(weights=None)
            state = torch.load(path, map_location="cpu", weights_only=True)
            if isinstance(state, dict) and "state_dict" in state:
                state = state["state_dict"]
            # tolerate a foreign classifier head; it is replaced anyway
            model.load_state_dict({k: v for k, v in state.items() if not k.startswith("classifier")}, strict=False)
            return model, CHEST_XRAY
        except (OSError, RuntimeError, ValueError) as exc:
            if weights_policy == "pretrained":
                raise PretrainedWeightsError("CheXNet", path, str(exc))
            logger.warning("CheXNet weight file %s unusable (%s); falling back", path, exc)
    if weights_policy == "pretrained":
        raise PretrainedWeightsError(
            "CheXNet", weight_source("CheXNet"), "no chest-X-ray weight file configured"
        )
    # fall back to general-image pretraining, then to random
    try:
        model = models.densenet121(weights=models.DenseNet121_Weights.IMAGENET1K_V1)
        logger.warning("CheXNet falling back to general-image pretraining")
        return model, GENERAL_IMAGES
    except Exception as exc:
        logger.warning("CheXNet falling back to random initialization (%s)", exc)
        return models.densenet121(weights=None), RANDOM_INIT


def build_classifier(
    name: str,
    num_classes: int,
    weights_policy: str = "pretrained",
    seed: int | None = None,
) -> BuiltClassifier:
    """Pretrained backbone with its final classifier layer replaced by a fresh
    `num_classes`-way layer; all parameters left trainable.

    A fixed seed makes the freshly initialized head (and, under the random
    policy, the whole network) reproducible.
    """
    if num_classes not in (2, 3):
        raise BackboneError(f"num_classes must be 2 or 3, got {num_classes}")
    if weights_policy not in ("pretrained", "auto", "random"):
        raise BackboneError(f"unknown weights policy {weights_policy!r}")
    spec = backbone_spec(name)
    factory, enum_name = _TORCHVISION_FACTORIES[name]

    if seed is not None:
        torch.manual_seed(stable_seed("build", seed, name, num_classes) % 2**63)

    corpus_used = RANDOM_INIT
    if name == "CheXNet" and weights_policy != "random":
        model, corpus_used = _load_chexnet_base(weights_policy)
    elif weights_policy == "random":
        kwargs = {"aux_logits": False, "init_weights": True} if name == "InceptionV3" else {}
        model = factory(weights=None, **kwargs)
    else:
        weights = getattr(models, enum_name).IMAGENET1K_V1
        try:
            model = factory(weights=weights)
            corpus_used = GENERAL_IMAGES
        except Exception as exc:
            if weights_policy == "pretrained":
                raise PretrainedWeightsError(name, weight_source(name), str(exc))
            logger.warning(
                "%s pretrained weights unavailable (%s); falling back to random init", name, exc
            )
            kwargs = {"aux_logits": False, "init_weights": True} if name == "InceptionV3" else {}
            model = factory(weights=None, **kwargs)

    if name == "InceptionV3":
        # the auxiliary classifier branch is not used
        model.aux_logits = False
        model.AuxLogits = None
        model.transform_input = False

    _replace_head(name, model, num_classes)
    for p in model.parameters():
        p.requires_grad_(True)
    return BuiltClassifier(
        name=name,
        model=model,
        num_classes=num_classes,
        pretrain_corpus_used=corpus_used,
        spec=spec,
    )
