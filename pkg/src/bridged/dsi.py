"""Dataset Style Inversion: one learned token that captures a whole dataset's style."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import SplitManifest
from .diffusion import DenoiserInterface
from .prompts import DEFAULT_TOKEN, render_style_prompt

log = logging.getLogger(__name__)

TOKEN_MAGIC = b"BTTOKEN1"


class EmptyClassError(RuntimeError):
    pass


@dataclass
class StyleToken:
    name: str
    embedding: torch.Tensor
    dataset: str
    trained_iterations: int = 0

    def __post_init__(self):
        if self.embedding.dim() != 1:
            raise ValueError("style token embedding must be a vector")
        if not torch.isfinite(self.embedding).all():
            raise ValueError("style token embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.embedding.numel()


@dataclass
class InversionConfig:
    iterations: int = 20000
    batch_size: int = 4
    learning_rate: float = 5e-3
    token_name: str = DEFAULT_TOKEN
    init_word: str = "style"
    max_empty_resamples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class InversionResult:
    token: StyleToken
    losses: list[float] = field(default_factory=list)
    optimizer_steps: int = 0


def init_token(denoiser: DenoiserInterface, config: InversionConfig, dataset: str) -> StyleToken:
    """Start from the embedding of ``config.init_word`` if the denoiser has a vocabulary."""
    with torch.no_grad():
        if hasattr(denoiser, "word_embedding") and config.init_word:
            emb = denoiser.word_embedding(config.init_word).detach().clone()
        else:
            g = torch.Generator().manual_seed(config.seed)
            std = getattr(denoiser, "embedding_std", 1.0)
            emb = torch.randn(denoiser.embed_dim, generator=g) * std
    return StyleToken(config.token_name, emb, dataset, 0)


def dsi_loss(denoiser: DenoiserInterface, token: StyleToken, images: torch.Tensor, class_name: str,
             noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the injected noise and the denoiser's prediction.

    The condition is the embedded prompt "A {class} photo in the style of {token}",
    so gradients reach ``token.embedding`` through the conditioning slot only.
    """
    if token.embedding.numel() != denoiser.embed_dim:
        raise ValueError(f"token has dimension {token.embedding.numel()}, "
                         f"denoiser conditioning width is {denoiser.embed_dim}")
    z0 = denoiser.encode(images)
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    z_t = denoiser.add_noise(z0, noise, t)
    cond = denoiser.embed_prompt(render_style_prompt(class_name, token.name), token.name, token.embedding)
    pred = denoiser.predict_noise(z_t, t, cond)
    return ((noise - pred) ** 2).mean()


def load_class_images(manifest: SplitManifest, size: int = 64) -> dict[int, torch.Tensor]:
    """Decode a manifest into per-class tensors scaled to [-1, 1]."""
    from PIL import Image

    out: dict[int, list[torch.Tensor]] = {c: [] for c in range(manifest.dataset.n_classes)}
    for r in manifest.records:
        with Image.open(manifest.resolve(r)) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
        out[r.class_index].append(torch.from_numpy(arr).permute(2, 0, 1))
    return {c: torch.stack(v) if v else torch.empty(0, 3, size, size) for c, v in out.items()}


def train_style_token(manifest: SplitManifest | None, denoiser: DenoiserInterface, config: InversionConfig,
                      images_by_class: dict[int, torch.Tensor] | None = None,
                      class_names=None) -> InversionResult:
    """Optimize a single token embedding against the frozen denoiser.

    Every iteration draws a class uniformly, a batch of that class's real
    images, a timestep and Gaussian noise, then takes one Adam step on the
    token. Pass ``images_by_class`` to skip decoding the manifest.
    """
    if images_by_class is None:
        if manifest is None or len(manifest) == 0:
            raise ValueError("need a non-empty train manifest")
        images_by_class = load_class_images(manifest)
    if class_names is None:
        class_names = manifest.dataset.class_names
    dataset = manifest.dataset.name if manifest is not None else "custom"
    if not any(len(v) for v in images_by_class.values()):
        raise ValueError("no training images")

    params = list(denoiser.parameters()) if hasattr(denoiser, "parameters") else []
    saved_flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)

    token = init_token(denoiser, config, dataset)
    dtype = getattr(denoiser, "w1", token.embedding).dtype
    emb = token.embedding.to(dtype).clone().requires_grad_(True)
    token = StyleToken(token.name, emb, dataset, 0)
    opt = torch.optim.Adam([emb], lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    classes = sorted(images_by_class)
    losses: list[float] = []
    steps = 0
    try:
        for _ in range(config.iterations):
            misses = 0
            while True:
                c = classes[int(rng.integers(len(classes)))]
                pool = images_by_class[c]
                if len(pool):
                    break
                misses += 1
                if misses == 1:
                    log.warning("class %s has no images; resampling", class_names[c])
                if misses >= config.max_empty_resamples:
                    raise EmptyClassError(f"{misses} consecutive draws hit empty classes")
            idx = torch.from_numpy(rng.integers(len(pool), size=config.batch_size))
            x = pool[idx]
            with torch.no_grad():
                latent_shape = denoiser.encode(x[:1]).shape[1:]
            noise = torch.randn((config.batch_size, *latent_shape), generator=gen, dtype=dtype)
            t = torch.randint(0, denoiser.num_timesteps, (config.batch_size,), generator=gen)
            loss = dsi_loss(denoiser, token, x, class_names[c], noise, t)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            losses.append(loss.item())
    finally:
        for p, flag in zip(params, saved_flags):
            p.requires_grad_(flag)
    final = StyleToken(token.name, emb.detach().clone(), dataset, steps)
    return InversionResult(final, losses, steps)


# ---------------------------------------------------------------------------
# token file: magic, u32 header length, JSON header, float32 little-endian vector

def save_token(token: StyleToken, path) -> None:
    vec = np.asarray(token.embedding.detach().cpu(), dtype="<f4")
    header = json.dumps({"name": token.name, "dataset": token.dataset,
                         "trained_iterations": token.trained_iterations, "dim": int(vec.size)}).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(vec.tobytes())


def load_token(path) -> StyleToken:
    data = Path(path).read_bytes()
    if data[:8] != TOKEN_MAGIC:
        raise ValueError(f"{path} is not a style-token file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    vec = np.frombuffer(data[12 + n:], dtype="<f4")
    if vec.size != header["dim"]:
        raise ValueError(f"{path}: expected {header['dim']} floats, found {vec.size}")
    return StyleToken(header["name"], torch.from_numpy(vec.copy()), header["dataset"], header["trained_iterations"])
