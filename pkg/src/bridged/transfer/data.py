"""Manifest-backed image datasets and the ImageNet-style preprocessing."""
from __future__ import annotations

import torch
from PIL import Image
from torch.utils.data import Dataset
from torchvision import transforms as T

from ..core import SplitManifest

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def train_transform(size: int = 224, augment: str = "imagenet"):
    norm = [T.ToTensor(), T.Normalize(IMAGENET_MEAN, IMAGENET_STD)]
    if augment == "imagenet":
        return T.Compose([T.RandomResizedCrop(size), T.RandomHorizontalFlip(), *norm])
    if augment == "none":
        return T.Compose([T.Resize((size, size)), *norm])
    raise ValueError(f"unknown augmentation {augment!r}")


def eval_transform(size: int = 224):
    # 256 -> 224 centre crop, scaled for other sizes
    return T.Compose([T.Resize(round(size * 256 / 224)), T.CenterCrop(size), T.ToTensor(),
                      T.Normalize(IMAGENET_MEAN, IMAGENET_STD)])


def _load(path) -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB")


class ManifestDataset(Dataset):
    def __init__(self, manifest: SplitManifest, transform):
        self.manifest = manifest
        self.paths = [manifest.resolve(r) for r in manifest.records]
        self.labels = [r.class_index for r in manifest.records]
        self.transform = transform

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i):
        return self.transform(_load(self.paths[i])), self.labels[i]


_TENSOR_CACHE: dict = {}


def preload(manifest: SplitManifest, transform_kind: str, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode and transform a whole manifest once (deterministic transforms only).

    Results are memoized on (paths, transform, size); meant for small datasets.
    """
    if transform_kind not in ("eval", "none"):
        raise ValueError("only deterministic transforms can be preloaded")
    paths = tuple(str(manifest.resolve(r)) for r in manifest.records)
    key = (paths, transform_kind, size)
    if key not in _TENSOR_CACHE:
        tf = eval_transform(size) if transform_kind == "eval" else train_transform(size, "none")
        x = torch.stack([tf(_load(p)) for p in paths]) if paths else torch.empty(0, 3, size, size)
        _TENSOR_CACHE[key] = x
    y = torch.tensor([r.class_index for r in manifest.records], dtype=torch.long)
    return _TENSOR_CACHE[key], y


def clear_cache() -> None:
    _TENSOR_CACHE.clear()
