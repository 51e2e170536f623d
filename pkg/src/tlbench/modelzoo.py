"""Backbone registry, freeze policy, classification head, optimizer and loss factories."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import torch
from torch import nn

from .errors import BackboneUnavailableError, ConfigError, RangeError, RegistryError

BACKBONES = (
    "VGG16",
    "ResNet50",
    "DenseNet121",
    "MobileNet",
    "MobileNetV2",
    "NASNetMobile",
    "EfficientNetB0",
    "EfficientNetV2B0",
    "ConvNeXtTiny",
    "SyntheticTiny",
)
OPTIMIZERS = ("sgd", "rmsprop", "adam", "nadam", "adam_decoupled_wd")


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "SyntheticTiny"
    pretrained: bool = False

    def __post_init__(self):
        if self.name not in BACKBONES:
            raise RegistryError(f"unknown backbone {self.name!r}; choose from {BACKBONES}")


@dataclass(frozen=True)
class HeadConfig:
    dropout_rate: float = 0.3
    dense_units: int = 128
    l2_strength: float = 1e-4
    num_classes: int = 2

    def __post_init__(self):
        if not 0.0 < self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} not in (0, 1)")
        if self.dense_units < 1:
            raise ConfigError("dense_units must be >= 1")
        if self.l2_strength < 0:
            raise ConfigError("l2_strength must be nonnegative")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def output_units(self) -> int:
        return 1 if self.num_classes == 2 else self.num_classes


@dataclass(frozen=True)
class OptimizerSpec:
    family: str = "adam_decoupled_wd"
    learning_rate: float = 5e-5
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.family not in OPTIMIZERS:
            raise RegistryError(
                f"unknown optimizer family {self.family!r}; choose from {OPTIMIZERS}"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")


# Hand-tuned settings and the Hyperband-selected optimum for DenseNet121.
MANUAL_BEST_OPTIMIZER = OptimizerSpec("adam_decoupled_wd", 5e-5, 1e-5)
TUNED_BEST_OPTIMIZER = OptimizerSpec("adam_decoupled_wd", 3.7758e-4, 7.4855e-5)
BEST_HEAD = HeadConfig(dropout_rate=0.3, dense_units=128)


@dataclass(frozen=True)
class ModelSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head: HeadConfig = field(default_factory=HeadConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    freeze_rate: float = 0.2
    input_size: tuple[int, int] = (224, 224)
    frozen_bn_inference: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            backbone=BackboneSpec(**d["backbone"]),
            head=HeadConfig(**d["head"]),
            optimizer=OptimizerSpec(**d["optimizer"]),
            freeze_rate=d["freeze_rate"],
            input_size=tuple(d["input_size"]),
            frozen_bn_inference=d.get("frozen_bn_inference", True),
        )


def num_freeze_layers(layer_count: int, freeze_rate: float) -> int:
    """Number of leading backbone layers to freeze: floor(count * rate)."""
    if not 0.0 <= freeze_rate <= 1.0:
        raise RangeError(f"freeze_rate {freeze_rate} not in [0, 1]")
    if layer_count < 0:
        raise RangeError("layer_count must be nonnegative")
    return int(math.floor(layer_count * freeze_rate))


# ---------------------------------------------------------------------------
# Backbones


class SyntheticTiny(nn.Module):
    """Four conv-BN-ReLU blocks (~47k parameters), usable fully offline.

    The first three blocks halve the resolution, so the final feature map is
    1/8 of the input size.
    """

    out_channels = 64

    def __init__(self, widths: tuple[int, ...] = (16, 32, 48, 64)):
        super().__init__()
        blocks = []
        c_in = 3
        for i, c_out in enumerate(widths):
            layers = [
                nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=False),
            ]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            blocks.append(nn.Sequential(*layers))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = c_in

    def forward(self, x):
        return self.blocks(x)


class _Features(nn.Module):
    def __init__(self, body: nn.Module, out_channels: int, final_relu: bool = False):
        super().__init__()
        self.body = body
        self.final_relu = nn.ReLU() if final_relu else None
        self.out_channels = out_channels

    def forward(self, x):
        x = self.body(x)
        return self.final_relu(x) if self.final_relu is not None else x


def _torchvision_backbone(name: str, pretrained: bool) -> nn.Module:
    from torchvision import models

    builders: dict[str, tuple[Callable, Callable[[nn.Module], nn.Module]]] = {
        "VGG16": (models.vgg16, lambda m: _Features(m.features, 512)),
        "ResNet50": (
            models.resnet50,
            lambda m: _Features(
                nn.Sequential(m.conv1, m.bn1, m.relu, m.maxpool,
                              m.layer1, m.layer2, m.layer3, m.layer4),
                2048,
            ),
        ),
        "DenseNet121": (models.densenet121, lambda m: _Features(m.features, 1024, True)),
        "MobileNetV2": (models.mobilenet_v2, lambda m: _Features(m.features, 1280)),
        "EfficientNetB0": (models.efficientnet_b0, lambda m: _Features(m.features, 1280)),
        "ConvNeXtTiny": (models.convnext_tiny, lambda m: _Features(m.features, 768)),
    }
    if name not in builders:
        raise BackboneUnavailableError(
            f"{name} has no torchvision implementation in this build; "
            "use SyntheticTiny or one of "
            f"{sorted(builders)}"
        )
    ctor, extract = builders[name]
    try:
        model = ctor(weights="DEFAULT" if pretrained else None)
    except Exception as exc:  # network, cache or checksum failures
        raise BackboneUnavailableError(
            f"pretrained weights for {name} could not be loaded ({exc}); "
            "use BackboneSpec('SyntheticTiny') or pretrained=False for offline runs"
        ) from exc
    return extract(model)


def load_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.name == "SyntheticTiny":
        if spec.pretrained:
            raise BackboneUnavailableError("SyntheticTiny has no pretrained weights")
        return SyntheticTiny()
    return _torchvision_backbone(spec.name, spec.pretrained)


def backbone_layers(backbone: nn.Module) -> list[nn.Module]:
    """Backbone layers in registration order: modules that own parameters directly."""
    return [m for m in backbone.modules() if any(True for _ in m.parameters(recurse=False))]


# ---------------------------------------------------------------------------
# Full model


class TransferModel(nn.Module):
    """Backbone -> GAP -> BatchNorm -> Dropout -> Dense(ReLU, He init) -> output.

    ``forward`` returns logits; ``predict_proba`` applies sigmoid (one output
    unit) or softmax.
    """

    def __init__(self, backbone: nn.Module, head: HeadConfig, freeze_rate: float,
                 frozen_bn_inference: bool = True):
        super().__init__()
        self.backbone = backbone
        self.head_config = head
        channels = backbone.out_channels
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.norm = nn.BatchNorm1d(channels, eps=1e-3)
        self.dropout = nn.Dropout(head.dropout_rate)
        self.dense = nn.Linear(channels, head.dense_units)
        self.out = nn.Linear(head.dense_units, head.output_units)
        nn.init.kaiming_normal_(self.dense.weight, mode="fan_in", nonlinearity="relu")
        nn.init.zeros_(self.dense.bias)
        nn.init.xavier_uniform_(self.out.weight)
        nn.init.zeros_(self.out.bias)

        self.layers = backbone_layers(backbone)
        self.layer_count = len(self.layers)
        self.num_frozen = num_freeze_layers(self.layer_count, freeze_rate)
        self.frozen_bn_inference = frozen_bn_inference
        for layer in self.layers[: self.num_frozen]:
            for p in layer.parameters(recurse=False):
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and self.frozen_bn_inference:
            for layer in self.layers[: self.num_frozen]:
                if isinstance(layer, nn.modules.batchnorm._BatchNorm):
                    layer.eval()
        return self

    def head_parameters(self) -> list[nn.Parameter]:
        return [p for m in (self.norm, self.dense, self.out) for p in m.parameters()]

    def features(self, x):
        return self.backbone(x)

    def head(self, fmap):
        x = self.pool(fmap).flatten(1)
        x = self.norm(x)
        x = self.dropout(x)
        x = torch.relu(self.dense(x))
        return self.out(x)

    def forward(self, x):
        return self.head(self.features(x))

    def regularization_loss(self):
        return self.head_config.l2_strength * self.dense.weight.pow(2).sum()

    @torch.no_grad()
    def predict_proba(self, x):
        logits = self(x)
        if logits.shape[1] == 1:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(
    backbone: BackboneSpec | str,
    freeze_rate: float,
    head: HeadConfig = HeadConfig(),
    frozen_bn_inference: bool = True,
) -> TransferModel:
    if isinstance(backbone, str):
        backbone = BackboneSpec(backbone)
    if not 0.0 <= freeze_rate <= 1.0:
        raise RangeError(f"freeze_rate {freeze_rate} not in [0, 1]")
    return TransferModel(load_backbone(backbone), head, freeze_rate, frozen_bn_inference)


def build_from_spec(spec: ModelSpec) -> TransferModel:
    return build_model(spec.backbone, spec.freeze_rate, spec.head, spec.frozen_bn_inference)


def build_optimizer(spec: OptimizerSpec, params) -> torch.optim.Optimizer:
    """Optimizer over ``params``; only adam_decoupled_wd applies weight decay."""
    params = [p for p in params if p.requires_grad]
    lr = spec.learning_rate
    if spec.family == "sgd":
        return torch.optim.SGD(params, lr=lr)
    if spec.family == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr, alpha=0.9, eps=1e-7)
    if spec.family == "adam":
        return torch.optim.Adam(params, lr=lr, eps=1e-7)
    if spec.family == "nadam":
        return torch.optim.NAdam(params, lr=lr, eps=1e-7)
    if spec.family == "adam_decoupled_wd":
        return torch.optim.AdamW(params, lr=lr, eps=1e-7, weight_decay=spec.weight_decay)
    raise RegistryError(f"unknown optimizer family {spec.family!r}; choose from {OPTIMIZERS}")


class ClassificationLoss:
    """Binary or categorical cross-entropy.

    Calling the object takes logits; :meth:`from_probabilities` takes
    post-activation outputs.
    """

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.binary = num_classes == 2

    def __call__(self, logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if self.binary:
            return nn.functional.binary_cross_entropy_with_logits(
                logits.reshape(-1), labels.to(logits.dtype).reshape(-1)
            )
        return nn.functional.cross_entropy(logits, labels.long())

    def from_probabilities(self, probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if self.binary:
            p = probs.reshape(-1)
            y = labels.to(p.dtype).reshape(-1)
            ll = torch.special.xlogy(y, p) + torch.special.xlogy(1 - y, 1 - p)
            return -ll.mean()
        onehot = nn.functional.one_hot(labels.long(), self.num_classes).to(probs.dtype)
        return -torch.special.xlogy(onehot, probs).sum(dim=1).mean()


def build_loss(num_classes: int) -> ClassificationLoss:
    return ClassificationLoss(num_classes)


def save_checkpoint(model: TransferModel, spec: ModelSpec, path: str | Path,
                    seed: int | None = None, extra: dict | None = None) -> Path:
    """Write ``<path>`` (weights + spec) and a ``<path>.json`` provenance sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"model_spec": spec.to_dict(), "seed": seed, **(extra or {})}
    torch.save({"state_dict": model.state_dict(), **meta}, path)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path: str | Path) -> tuple[TransferModel, ModelSpec, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    spec = ModelSpec.from_dict(blob["model_spec"])
    # weights come from the checkpoint, never from a download
    offline = replace(spec, backbone=BackboneSpec(spec.backbone.name, pretrained=False))
    model = build_from_spec(offline)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = {k: v for k, v in blob.items() if k != "state_dict"}
    return model, spec, meta
