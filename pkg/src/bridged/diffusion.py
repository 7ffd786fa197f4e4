"""Denoiser contract plus a tiny in-process text-conditioned denoiser.

The toy model stands in for a latent diffusion U-Net: the "encoder" is a fixed
average-pool to a small latent grid and the text side is a hashed word-embedding
table. Noise prediction is the posterior mean E[eps | z_t] under a Gaussian
latent prior N(mu(c), s^2 I) whose mean is a linear read-out of the pooled text
condition, plus a one-hidden-layer MLP residual. It is small enough for
finite-difference gradient checks yet exposes the same calls a production
denoiser would.
"""
from __future__ import annotations

import hashlib
import math
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@runtime_checkable
class DenoiserInterface(Protocol):
    num_timesteps: int
    embed_dim: int

    def encode(self, x: torch.Tensor) -> torch.Tensor: ...

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor: ...

    def embed_prompt(self, prompt: str, token_name: str | None = None,
                     token_embedding: torch.Tensor | None = None) -> torch.Tensor: ...

    def predict_noise(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor: ...


def linear_betas(num_timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> torch.Tensor:
    return torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)


def _bucket(word: str, vocab_size: int) -> int:
    return int.from_bytes(hashlib.sha1(word.lower().encode("utf-8")).digest()[:4], "little") % vocab_size


class ToyDenoiser(nn.Module):
    def __init__(self, latent_hw: int = 8, channels: int = 3, embed_dim: int = 16, hidden: int = 8,
                 vocab_size: int = 48, num_timesteps: int = 1000, time_dim: int = 8, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.latent_hw = latent_hw
        self.channels = channels
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self.num_timesteps = num_timesteps
        self.time_dim = time_dim
        self.embedding_std = 0.5
        latent = channels * latent_hw * latent_hw
        g = torch.Generator().manual_seed(seed)
        self.word_emb = nn.Parameter(torch.randn(vocab_size, embed_dim, generator=g, dtype=dtype) * self.embedding_std)
        fan1 = latent + embed_dim + time_dim
        self.w1 = nn.Parameter(torch.randn(hidden, fan1, generator=g, dtype=dtype) / math.sqrt(fan1))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.w2 = nn.Parameter(torch.randn(latent, hidden, generator=g, dtype=dtype) / math.sqrt(hidden))
        self.b2 = nn.Parameter(torch.zeros(latent, dtype=dtype))
        self.w_mu = nn.Parameter(torch.randn(latent, embed_dim, generator=g, dtype=dtype) / math.sqrt(embed_dim))
        self.b_mu = nn.Parameter(torch.zeros(latent, dtype=dtype))
        self.log_var = nn.Parameter(torch.full((), math.log(0.1), dtype=dtype))
        betas = linear_betas(num_timesteps)
        self.register_buffer("betas", betas.to(dtype))
        self.register_buffer("alphas_cumprod", torch.cumprod(1 - betas, 0).to(dtype))

    # -- text side ---------------------------------------------------------
    def word_embedding(self, word: str) -> torch.Tensor:
        return self.word_emb[_bucket(word, self.vocab_size)]

    def embed_prompt(self, prompt: str, token_name: str | None = None,
                     token_embedding: torch.Tensor | None = None) -> torch.Tensor:
        """Embed ``prompt`` word by word; the word equal to ``token_name`` takes ``token_embedding``."""
        if token_embedding is not None and token_embedding.shape != (self.embed_dim,):
            raise ValueError(f"token embedding has shape {tuple(token_embedding.shape)}, "
                             f"conditioning slot expects ({self.embed_dim},)")
        rows = []
        for w in prompt.split():
            if token_name is not None and w == token_name:
                if token_embedding is None:
                    raise ValueError(f"prompt contains {token_name} but no embedding was given")
                rows.append(token_embedding.to(self.word_emb.dtype))
            else:
                rows.append(self.word_embedding(w))
        if not rows:
            return self.word_emb.new_zeros(0, self.embed_dim)
        return torch.stack(rows)

    # -- image side --------------------------------------------------------
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(x.to(self.w1.dtype), self.latent_hw)

    def decode(self, z: torch.Tensor, size: int) -> torch.Tensor:
        return F.interpolate(z, size=(size, size), mode="bilinear", align_corners=False)

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        ab = self.alphas_cumprod[t].view(-1, *([1] * (z0.dim() - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise

    def _time_features(self, t: torch.Tensor) -> torch.Tensor:
        half = self.time_dim // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=self.w1.dtype) / half)
        ang = (t.to(self.w1.dtype) / self.num_timesteps * 1000.0)[:, None] * freqs[None]
        return torch.cat([ang.sin(), ang.cos()], dim=1)

    def predict_noise(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b = z_t.shape[0]
        if t.dim() == 0:
            t = t.expand(b)
        if cond.dim() == 2:
            pooled = cond.mean(0) if cond.shape[0] else cond.new_zeros(self.embed_dim)
            pooled = pooled.expand(b, -1)
        else:
            pooled = cond.mean(1)
        zf = z_t.reshape(b, -1)
        ab = self.alphas_cumprod[t].view(b, 1)
        mu = F.linear(pooled, self.w_mu, self.b_mu)
        gauss = (1 - ab).sqrt() * (zf - ab.sqrt() * mu) / (ab * self.log_var.exp() + 1 - ab)
        h = torch.cat([zf, pooled, self._time_features(t)], dim=1)
        h = torch.tanh(F.linear(h, self.w1, self.b1))
        return (gauss + F.linear(h, self.w2, self.b2)).view_as(z_t)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def fit_toy_denoiser(denoiser: ToyDenoiser, images_by_class: dict[int, torch.Tensor], class_names,
                     steps: int = 2000, lr: float = 3e-3, batch_size: int = 16, uncond_prob: float = 0.1,
                     seed: int = 0) -> list[float]:
    """Standard noise-prediction training of the toy denoiser on template prompts.

    Gives later inversion runs a denoiser whose text conditioning means something.
    """
    from .prompts import sample_prompt

    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    classes = [c for c, x in images_by_class.items() if len(x)]
    losses = []
    for _ in range(steps):
        c = classes[int(rng.integers(len(classes)))]
        pool = images_by_class[c]
        idx = torch.from_numpy(rng.integers(len(pool), size=batch_size))
        z0 = denoiser.encode(pool[idx])
        t = torch.randint(0, denoiser.num_timesteps, (batch_size,), generator=gen)
        noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        if rng.random() < uncond_prob:
            prompt = ""
        else:
            prompt, _ = sample_prompt(class_names[c], int(rng.integers(2**31)))
        cond = denoiser.embed_prompt(prompt)
        loss = F.mse_loss(denoiser.predict_noise(denoiser.add_noise(z0, noise, t), t, cond), noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
