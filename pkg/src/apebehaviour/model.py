"""Two-stream ResNet-18 recognition network with LSTM heads and late fusion.

Inputs are batched sequences shaped (B, T, C, H, W) with values in [0, 1]; the
flow stream may have one channel, which is replicated to three. Normalisation
constants live in module buffers so checkpoints carry them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import torch
import torch.nn as nn
import torchvision

from .annotations import CLASS_NAMES, NUM_CLASSES
from .sampling import RGB_MEAN, RGB_STD

FEATURE_DIM = 512


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: Literal["baseline", "optimised"] = "optimised"
    fusion: Literal["late", "convolutional"] = "late"
    sequence_length: int = 20
    num_classes: int = NUM_CLASSES
    lstm_layers: int = 1
    lstm_hidden: int = FEATURE_DIM
    classifier_hidden: int = 256
    pretrained_backbone: bool = True
    dropout: float = 0.0
    conv_fusion_channels: int = 512
    input_mean: tuple[float, float, float] = RGB_MEAN
    input_std: tuple[float, float, float] = RGB_STD

    def __post_init__(self):
        if self.variant not in ("baseline", "optimised"):
            raise ModelConfigError(f"unknown variant {self.variant!r}")
        if self.fusion not in ("late", "convolutional"):
            raise ModelConfigError(f"unknown fusion {self.fusion!r}")
        if self.variant == "optimised" and self.fusion != "late":
            raise ModelConfigError("convolutional fusion is not available for the optimised (LSTM) model; "
                                   "LSTM heads emit vectors, use late fusion")
        if self.lstm_hidden != FEATURE_DIM:
            raise ModelConfigError(f"lstm_hidden must equal the per-stream feature width {FEATURE_DIM}")
        if self.sequence_length <= 0 or self.num_classes <= 0 or self.classifier_hidden <= 0:
            raise ModelConfigError("sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("input_mean", "input_std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class ResNetFeatures(nn.Module):
    """ResNet-18 trunk; returns pre-pool maps or globally pooled 512-d vectors."""

    def __init__(self):
        super().__init__()
        net = torchvision.models.resnet18(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.Sequential(net.layer1, net.layer2, net.layer3, net.layer4)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(self.stem(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.feature_maps(x)).flatten(1)

    def load_torchvision_state(self, state: dict) -> None:
        """Load a torchvision ``resnet18`` state dict (classifier weights are ignored)."""
        mapping = {"conv1": "stem.0", "bn1": "stem.1"}
        for i in range(4):
            mapping[f"layer{i + 1}"] = f"layers.{i}"
        own = {}
        for key, value in state.items():
            head, _, rest = key.partition(".")
            if head in mapping:
                own[f"{mapping[head]}.{rest}"] = value
        missing, unexpected = self.load_state_dict(own, strict=False)
        if missing or unexpected:
            raise ValueError(f"backbone weights do not match ResNet-18: missing={missing[:3]} "
                             f"unexpected={unexpected[:3]}")


def fuse_late(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Concatenate spatial (first) and temporal stream vectors along the last axis."""
    if a.shape[-1] != FEATURE_DIM or b.shape[-1] != FEATURE_DIM:
        raise ValueError(f"late fusion expects two {FEATURE_DIM}-d inputs, got {a.shape[-1]} and {b.shape[-1]}")
    return torch.cat([a, b], dim=-1)


class TwoStreamNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.spatial = ResNetFeatures()
        self.temporal = ResNetFeatures()
        if cfg.variant == "optimised":
            lstm_kw = dict(num_layers=cfg.lstm_layers, batch_first=True,
                           dropout=cfg.dropout if cfg.lstm_layers > 1 else 0.0)
            self.lstm_spatial = nn.LSTM(FEATURE_DIM, cfg.lstm_hidden, **lstm_kw)
            self.lstm_temporal = nn.LSTM(FEATURE_DIM, cfg.lstm_hidden, **lstm_kw)
        if cfg.fusion == "convolutional":
            self.fusion_conv = nn.Sequential(
                nn.Conv3d(2 * FEATURE_DIM, cfg.conv_fusion_channels, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
                nn.AdaptiveAvgPool3d(1),
            )
            fused_width = cfg.conv_fusion_channels
        else:
            fused_width = 2 * FEATURE_DIM
        self.fused_width = fused_width
        self.classifier = nn.Sequential(
            nn.Linear(fused_width, cfg.classifier_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.classifier_hidden, cfg.num_classes),
        )
        self.register_buffer("mean", torch.tensor(cfg.input_mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(cfg.input_std).view(1, 3, 1, 1))

    # -- pieces -----------------------------------------------------------------

    def _frames(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        if x.dim() == 4:
            x = x.unsqueeze(0)
        if x.dim() != 5:
            raise ValueError(f"expected (B, T, C, H, W) frames, got shape {tuple(x.shape)}")
        b, t, c, h, w = x.shape
        if c == 1:
            x = x.expand(b, t, 3, h, w)
        elif c != 3:
            raise ValueError(f"expected 1 or 3 channels, got {c}")
        x = x.reshape(b * t, 3, h, w)
        return (x - self.mean) / self.std, b, t

    def _trunk(self, stream: str) -> ResNetFeatures:
        if stream not in ("spatial", "temporal"):
            raise ValueError(f"unknown stream {stream!r}")
        return self.spatial if stream == "spatial" else self.temporal

    def per_frame_features(self, stream: str, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, C, H, W) -> (B, T, 512); an unbatched (T, C, H, W) input gives (T, 512)."""
        unbatched = frames.dim() == 4
        x, b, t = self._frames(frames)
        feats = self._trunk(stream)(x).view(b, t, FEATURE_DIM)
        return feats[0] if unbatched else feats

    def per_frame_maps(self, stream: str, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, C, H, W) -> (B, 512, T, h, w) pre-pool maps for convolutional fusion."""
        x, b, t = self._frames(frames)
        maps = self._trunk(stream).feature_maps(x)
        _, c, h, w = maps.shape
        return maps.view(b, t, c, h, w).permute(0, 2, 1, 3, 4)

    def lstm_head(self, stream: str, features: torch.Tensor) -> torch.Tensor:
        """Final hidden state of the stream's LSTM over (B, T, 512) features."""
        if self.cfg.variant != "optimised":
            raise ModelConfigError("baseline model has no LSTM heads")
        unbatched = features.dim() == 2
        if unbatched:
            features = features.unsqueeze(0)
        if features.shape[1] == 0:
            raise ValueError("LSTM head needs a non-empty sequence")
        lstm = self.lstm_spatial if stream == "spatial" else self.lstm_temporal
        _, (h_n, _) = lstm(features)
        out = h_n[-1]
        return out[0] if unbatched else out

    def classify(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.shape[-1] != self.fused_width:
            raise ValueError(f"classifier expects width {self.fused_width}, got {fused.shape[-1]}")
        return self.classifier(fused)

    # -- full pass --------------------------------------------------------------

    def forward(self, rgb: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        if rgb.shape[:2] != flow.shape[:2]:
            raise ValueError(f"stream lengths differ: rgb {tuple(rgb.shape[:2])} vs flow {tuple(flow.shape[:2])}")
        if self.cfg.fusion == "convolutional":
            maps = torch.cat([self.per_frame_maps("spatial", rgb), self.per_frame_maps("temporal", flow)], dim=1)
            return self.classify(self.fusion_conv(maps).flatten(1))
        a = self.per_frame_features("spatial", rgb)
        b = self.per_frame_features("temporal", flow)
        if self.cfg.variant == "optimised":
            a, b = self.lstm_head("spatial", a), self.lstm_head("temporal", b)
        else:
            a, b = a.mean(dim=1), b.mean(dim=1)
        return self.classify(fuse_late(a, b))


def build_model(cfg: ModelConfig, crop_size: int = 224, weights: dict | None = None) -> TwoStreamNet:
    """Construct the network; with ``pretrained_backbone`` both trunks start from the same weights."""
    model = TwoStreamNet(cfg)
    if cfg.pretrained_backbone:
        if weights is None:
            from .pretrain import backbone_weights

            weights = backbone_weights(crop_size)
        model.spatial.load_torchvision_state(weights)
        model.temporal.load_torchvision_state(weights)
    return model


def count_parameters(cfg_or_model: ModelConfig | nn.Module) -> int:
    model = TwoStreamNet(cfg_or_model) if isinstance(cfg_or_model, ModelConfig) else cfg_or_model
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def backbone_parameter_count(name: str) -> int:
    """Trainable parameters of a reference ImageNet classifier (``resnet18`` or ``vgg16``)."""
    factory = {"resnet18": torchvision.models.resnet18, "vgg16": torchvision.models.vgg16}[name]
    return sum(p.numel() for p in factory(weights=None).parameters() if p.requires_grad)


def class_order() -> list[str]:
    return list(CLASS_NAMES)
