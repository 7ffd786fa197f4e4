"""Backbone providers keyed by architecture name.

Every model is split into a feature extractor and a linear classifier head so
stages can swap, freeze, or reinitialize the head independently.
"""
from __future__ import annotations

import copy
import hashlib
import math
from typing import Callable

import torch
import torch.nn as nn


class Backbone(nn.Module):
    def __init__(self, architecture: str, features: nn.Module, head: nn.Linear, pretrained_source: str):
        super().__init__()
        self.architecture = architecture
        self.features = features
        self.head = head
        self.pretrained_source = pretrained_source

    @property
    def feature_dim(self) -> int:
        return self.head.in_features

    @property
    def n_classes(self) -> int:
        return self.head.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


BackboneHandle = Backbone

_PROVIDERS: dict[str, Callable[..., Backbone]] = {}


def register_backbone(name: str):
    def deco(fn):
        if name in _PROVIDERS:
            raise ValueError(f"backbone {name!r} already registered")
        _PROVIDERS[name] = fn
        return fn
    return deco


def available_backbones() -> list[str]:
    return sorted(_PROVIDERS)


def build_backbone(architecture: str, pretrained: bool = True, seed: int = 0) -> Backbone:
    """Instantiate ``architecture`` with its source (pre-training) head intact."""
    if architecture not in _PROVIDERS:
        raise KeyError(f"unknown architecture {architecture!r}; have {available_backbones()}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _PROVIDERS[architecture](pretrained=pretrained)


def init_head(feature_dim: int, n_classes: int, seed: int) -> nn.Linear:
    """Uniform fan-in init, U(-1/sqrt(d), 1/sqrt(d)) for weights and bias."""
    head = nn.Linear(feature_dim, n_classes)
    g = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(feature_dim)
    with torch.no_grad():
        head.weight.copy_(torch.rand(head.weight.shape, generator=g) * 2 * bound - bound)
        head.bias.copy_(torch.rand(head.bias.shape, generator=g) * 2 * bound - bound)
    return head


def reinit_classifier(model: Backbone, n_classes: int, seed: int) -> Backbone:
    """Return a copy of ``model`` with a freshly initialized ``n_classes``-way head."""
    new = copy.deepcopy(model)
    new.head = init_head(model.feature_dim, n_classes, seed).to(next(model.head.parameters()).device)
    return new


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def extractor_hash(model: Backbone) -> str:
    return state_hash(model.features)


# ---------------------------------------------------------------------------
# providers

class _TinyFeatures(nn.Sequential):
    def __init__(self, width: int = 32):
        super().__init__(
            nn.Conv2d(3, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(inplace=True),
            nn.Conv2d(16, width, 3, stride=2, padding=1), nn.BatchNorm2d(width), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.BatchNorm2d(width), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )


@register_backbone("tinycnn")
def _tinycnn(pretrained: bool = True) -> Backbone:
    # no pre-training corpus ships with the package; "pretrained" is the seeded init
    return Backbone("tinycnn", _TinyFeatures(32), nn.Linear(32, 10), "seeded-init")


def _torchvision(builder: str, weights_enum: str):
    def make(pretrained: bool = True):
        import torchvision.models as tvm

        weights = getattr(tvm, weights_enum).DEFAULT if pretrained else None
        return getattr(tvm, builder)(weights=weights), ("imagenet1k" if pretrained else "random")
    return make


def _resnet(builder, weights_enum, name):
    make = _torchvision(builder, weights_enum)

    def provider(pretrained: bool = True) -> Backbone:
        net, source = make(pretrained)
        head = net.fc
        net.fc = nn.Identity()
        return Backbone(name, net, head, source)
    return provider


def _vit(builder, weights_enum, name):
    make = _torchvision(builder, weights_enum)

    def provider(pretrained: bool = True) -> Backbone:
        net, source = make(pretrained)
        head = net.heads.head
        net.heads = nn.Identity()
        return Backbone(name, net, head, source)
    return provider


register_backbone("resnet18")(_resnet("resnet18", "ResNet18_Weights", "resnet18"))
register_backbone("resnet50")(_resnet("resnet50", "ResNet50_Weights", "resnet50"))
register_backbone("vit_b16")(_vit("vit_b_16", "ViT_B_16_Weights", "vit_b16"))
register_backbone("vit_l16")(_vit("vit_l_16", "ViT_L_16_Weights", "vit_l16"))
