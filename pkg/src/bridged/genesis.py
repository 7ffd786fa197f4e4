"""Synthetic image generation: guidance, backends, and resumable batch jobs."""
from __future__ import annotations

import base64
import errno
import hashlib
import io
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from PIL import Image

from .core import (DatasetSpec, ImageRecord, Origin, Provenance, Role, SplitManifest, header_line,
                   load_manifest, record_line)
from .prompts import render_style_prompt, sample_prompt

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class GenerationError(RuntimeError):
    def __init__(self, failed_keys: list[tuple[int, int]], manifest: SplitManifest | None = None):
        super().__init__(f"{len(failed_keys)} image(s) failed after retries: {failed_keys[:10]}")
        self.failed_keys = failed_keys
        self.manifest = manifest


class GenerationAborted(RuntimeError):
    """Unrecoverable I/O failure (e.g. disk full); the partial manifest on disk stays valid."""


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 3.5
    steps: int = 50
    resolution: int = 512
    sampler: str = "ddpm"
    negative_prompt: str | None = None

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("guidance scale must be positive")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.sampler != "ddpm":
            raise ValueError(f"unsupported sampler {self.sampler!r}")


@dataclass(frozen=True)
class ScorePair:
    conditional: object
    unconditional: object

    def __post_init__(self):
        if tuple(self.conditional.shape) != tuple(self.unconditional.shape):
            raise ValueError(f"score shapes differ: {tuple(self.conditional.shape)} vs "
                             f"{tuple(self.unconditional.shape)}")


def combine_guidance(pair: ScorePair, w: float):
    """``w * conditional + (1 - w) * unconditional``, elementwise.

    Works on numpy arrays and torch tensors alike.
    """
    if not np.isfinite(w):
        raise ValueError("guidance scale must be finite")
    return w * pair.conditional + (1 - w) * pair.unconditional


def image_seed(job_seed: int, class_index: int, image_index: int) -> int:
    return int(np.random.SeedSequence([job_seed, class_index, image_index]).generate_state(1)[0] & 0x7FFFFFFF)


# ---------------------------------------------------------------------------
# backends

@runtime_checkable
class GeneratorBackend(Protocol):
    backend_id: str
    deterministic: bool
    max_parallelism: int

    def generate(self, prompt: str, guidance: GuidanceConfig, seed: int, style=None) -> bytes: ...


def encode_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _class_hue(class_index: int, n_classes: int) -> np.ndarray:
    h = class_index / max(n_classes, 1)
    # cheap hue wheel; saturated colours
    rgb = np.clip(np.abs((h * 6 + np.array([0.0, 4.0, 2.0])) % 6 - 3) - 1, 0, 1)
    return rgb


# synthetic-domain shift: bar tilt as a fraction of the class spacing, and hue tint strength
SYNTHETIC_TILT = 0.4
SYNTHETIC_TINT = 0.3


def render_procedural(class_index: int, n_classes: int, size: int, seed: int, domain: str = "real",
                      brightness: float = 0.0, artifact: float = 1.0, jitter: float = 1.0) -> np.ndarray:
    """Seeded noise background with a class-indexed oriented bar.

    The bar orientation encodes the class. ``domain="synthetic"`` shifts the
    rendering while keeping the label: the bar is tilted by a fixed fraction
    of the class spacing and translated, the noise is smoother, and the bar
    picks up a class-correlated tint (scaled by ``artifact``), mimicking
    generator artifacts a classifier can latch onto.
    ``jitter`` scales the per-image orientation spread.
    """
    rng = np.random.default_rng(seed)
    ax = (np.arange(size) + 0.5) / size * 2 - 1
    xx, yy = np.meshgrid(ax, ax)
    spacing = np.pi / n_classes
    theta = spacing * class_index + rng.normal(0, 0.12 * jitter * spacing)
    cx, cy = rng.uniform(-0.25, 0.25, 2)
    if domain == "synthetic":
        theta += SYNTHETIC_TILT * spacing
        cx, cy = cx + 0.2, cy - 0.2
    thick = rng.uniform(0.10, 0.18)
    length = rng.uniform(0.6, 0.95)
    dx, dy = xx - cx, yy - cy
    d = np.abs(-dx * np.sin(theta) + dy * np.cos(theta))
    s = np.abs(dx * np.cos(theta) + dy * np.sin(theta))
    edge = 2.0 / size
    mask = np.clip((thick - d) / edge + 0.5, 0, 1) * np.clip((length - s) / edge + 0.5, 0, 1)

    bg_level = rng.uniform(0.3, 0.7)
    noise_sd = 0.10 if domain == "real" else 0.04
    bg = bg_level + rng.normal(0, noise_sd, (size, size, 3))
    bar = rng.uniform(0, 1, 3)
    if domain == "synthetic":
        bar = (1 - SYNTHETIC_TINT * artifact) * bar + SYNTHETIC_TINT * artifact * _class_hue(class_index, n_classes)
        bg = bg + 0.08 * artifact * np.array([0.5, 0.2, -0.3])
    img = bg * (1 - mask[..., None]) + bar[None, None, :] * mask[..., None]
    img = img + brightness
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


_DARK = re.compile(r"\bdark\b")
_BRIGHT = re.compile(r"\bbright\b")


class StubBackend:
    """Offline deterministic backend.

    Finds the class name in the prompt (longest match against ``class_names``)
    and renders :func:`render_procedural` in the synthetic domain. A style token
    halves the class-correlated artifact, "dark"/"bright" templates shift
    exposure, and a larger guidance scale narrows the orientation spread.
    """

    deterministic = True
    max_parallelism = 64

    def __init__(self, class_names=None, backend_id: str = "stub-v1"):
        self.class_names = list(class_names) if class_names is not None else None
        self.backend_id = backend_id

    def _class_of(self, prompt: str) -> tuple[int, int]:
        if self.class_names:
            best = None
            for i, name in enumerate(self.class_names):
                if name in prompt and (best is None or len(name) > len(self.class_names[best])):
                    best = i
            if best is not None:
                return best, len(self.class_names)
        h = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:4], "little")
        return h % 8, 8

    def generate(self, prompt: str, guidance: GuidanceConfig, seed: int, style=None) -> bytes:
        c, n = self._class_of(prompt)
        brightness = -0.15 if _DARK.search(prompt) else 0.15 if _BRIGHT.search(prompt) else 0.0
        artifact = 0.5 if style is not None else 1.0
        arr = render_procedural(c, n, guidance.resolution, seed, "synthetic", brightness, artifact,
                                jitter=3.5 / guidance.w)
        return encode_png(arr)


def respaced_schedule(alphas_cumprod: torch.Tensor, steps: int):
    """Pick ``steps`` evenly spaced timesteps and derive the matching betas."""
    T = len(alphas_cumprod)
    ts = np.unique(np.linspace(0, T - 1, steps).round().astype(np.int64))
    ab = alphas_cumprod[torch.from_numpy(ts)].double()
    ab_prev = torch.cat([ab.new_ones(1), ab[:-1]])
    betas = 1 - ab / ab_prev
    return torch.from_numpy(ts), ab, ab_prev, betas


@torch.no_grad()
def ddpm_sample(denoiser, cond: torch.Tensor, uncond: torch.Tensor, guidance: GuidanceConfig, seed: int,
                shape: tuple[int, ...]) -> torch.Tensor:
    """Ancestral DDPM sampling with classifier-free guidance applied at every step."""
    gen = torch.Generator().manual_seed(seed)
    ts, ab, ab_prev, betas = respaced_schedule(denoiser.alphas_cumprod, guidance.steps)
    dtype = denoiser.alphas_cumprod.dtype
    z = torch.randn(shape, generator=gen, dtype=torch.float64)
    for i in reversed(range(len(ts))):
        t = ts[i].expand(shape[0])
        zt = z.to(dtype)
        eps = combine_guidance(ScorePair(denoiser.predict_noise(zt, t, cond), denoiser.predict_noise(zt, t, uncond)),
                               guidance.w).double()
        mean = (z - betas[i] / (1 - ab[i]).sqrt() * eps) / (1 - betas[i]).sqrt()
        if i > 0:
            var = betas[i] * (1 - ab_prev[i]) / (1 - ab[i])
            z = mean + var.sqrt() * torch.randn(shape, generator=gen, dtype=torch.float64)
        else:
            z = mean
    return z.to(dtype)


class ToyDiffusionBackend:
    """In-process generation through a :class:`~bridged.diffusion.ToyDenoiser`."""

    deterministic = True
    max_parallelism = 1

    def __init__(self, denoiser, backend_id: str = "toy-ddpm"):
        self.denoiser = denoiser
        self.backend_id = backend_id

    def generate(self, prompt: str, guidance: GuidanceConfig, seed: int, style=None) -> bytes:
        d = self.denoiser
        if style is not None:
            cond = d.embed_prompt(prompt, style.name, style.embedding)
        else:
            cond = d.embed_prompt(prompt)
        uncond = d.embed_prompt(guidance.negative_prompt or "")
        z = ddpm_sample(d, cond, uncond, guidance, seed, (1, d.channels, d.latent_hw, d.latent_hw))
        x = d.decode(z, guidance.resolution)[0]
        arr = ((x.clamp(-1, 1) + 1) / 2 * 255).round().byte().permute(1, 2, 0).numpy()
        return encode_png(np.ascontiguousarray(arr))


class RemoteBackend:
    """HTTP client for a hosted text-to-image service.

    POSTs JSON ``{prompt, guidance_scale, steps, width, height, seed}`` (plus
    ``negative_prompt`` and a base64 float32 ``token_embedding`` when set) and
    expects raw image bytes back. The bearer token is read from ``token_env``.
    """

    deterministic = False

    def __init__(self, endpoint: str, token_env: str = "BT_BACKEND_TOKEN", timeout: float = 120.0,
                 retries: int = 2, max_parallelism: int = 4, backend_id: str | None = None, client=None):
        import httpx

        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.max_parallelism = max_parallelism
        self.backend_id = backend_id or f"remote:{endpoint}"
        self._client = client or httpx.Client(timeout=timeout)

    def request_body(self, prompt: str, guidance: GuidanceConfig, seed: int, style=None) -> dict:
        body = {"prompt": prompt, "guidance_scale": guidance.w, "steps": guidance.steps,
                "width": guidance.resolution, "height": guidance.resolution, "seed": seed}
        if guidance.negative_prompt:
            body["negative_prompt"] = guidance.negative_prompt
        if style is not None:
            emb = np.asarray(style.embedding.detach().cpu(), dtype="<f4")
            body["token_name"] = style.name
            body["token_embedding"] = base64.b64encode(emb.tobytes()).decode("ascii")
        return body

    def generate(self, prompt: str, guidance: GuidanceConfig, seed: int, style=None) -> bytes:
        import httpx

        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = self.request_body(prompt, guidance, seed, style)
        last = None
        for _ in range(self.retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.content
            except httpx.HTTPError as e:
                last = e
        raise RuntimeError(f"remote backend failed: {last}") from last


def make_backend(name: str, class_names=None, **kw) -> GeneratorBackend:
    if name == "stub":
        return StubBackend(class_names)
    if name == "toy":
        from .diffusion import ToyDenoiser
        return ToyDiffusionBackend(ToyDenoiser(seed=kw.get("seed", 0)))
    if name.startswith("http://") or name.startswith("https://"):
        return RemoteBackend(name, **{k: v for k, v in kw.items() if k in ("token_env", "timeout", "retries")})
    raise ValueError(f"unknown backend {name!r}")


# ---------------------------------------------------------------------------
# jobs

def _safe(name: str) -> str:
    return re.sub(r"[^\w.-]+", "_", name).strip("_") or "class"


def image_relpath(dataset: DatasetSpec, class_index: int, image_index: int) -> str:
    cname = _safe(dataset.class_names[class_index])
    return f"{_safe(dataset.name)}/{class_index}_{cname}/{image_index:06d}.png"


def _key_of(record: ImageRecord) -> tuple[int, int]:
    return record.class_index, int(Path(record.path).stem)


@dataclass
class _Job:
    dataset: DatasetSpec
    out: Path
    manifest_path: Path
    lock: threading.Lock = field(default_factory=threading.Lock)
    records: dict = field(default_factory=dict)


def _open_log(job: _Job):
    """Load any existing log (dropping a torn last line) and rewrite it cleanly."""
    if job.manifest_path.exists():
        old = load_manifest(job.manifest_path, tolerate_truncated_tail=True)
        if old.dataset != job.dataset:
            raise ValueError(f"{job.manifest_path} belongs to dataset {old.dataset.name}")
        for r in old.records:
            job.records[_key_of(r)] = r
    tmp = job.manifest_path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(header_line(job.dataset, Role.SYNTHETIC) + "\n")
        for r in job.records.values():
            f.write(record_line(r) + "\n")
    tmp.replace(job.manifest_path)
    return open(job.manifest_path, "a", encoding="utf-8")


def generate_images(dataset: DatasetSpec, images_per_class: int, backend: GeneratorBackend,
                    guidance: GuidanceConfig, out, prompt_mode: str = "template", token=None, seed: int = 0,
                    retries: int = 3, workers: int = 1, bank=None) -> SplitManifest:
    """Generate ``images_per_class`` images for every class into ``out``.

    Re-running against the same ``out`` only produces keys that are missing
    from the log, so an interrupted job can simply be restarted.
    """
    if images_per_class < 1:
        raise ValueError("images_per_class must be >= 1")
    if prompt_mode not in ("template", "dsi"):
        raise ValueError(f"unknown prompt mode {prompt_mode!r}")
    if prompt_mode == "dsi" and token is None:
        raise ValueError("dsi prompt mode needs a trained style token")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    job = _Job(dataset, out, out / MANIFEST_NAME)
    fh = _open_log(job)
    todo = [(c, i) for c in range(dataset.n_classes) for i in range(images_per_class) if (c, i) not in job.records]
    if job.records:
        log.info("resuming: %d done, %d to go", len(job.records), len(todo))
    failed: list[tuple[int, int]] = []

    def one(key):
        c, i = key
        s = image_seed(seed, c, i)
        cname = dataset.class_names[c]
        if prompt_mode == "template":
            prompt, tid = sample_prompt(cname, s, bank)
        else:
            prompt, tid = render_style_prompt(cname, token.name), None
        data = None
        for attempt in range(retries + 1):
            try:
                data = backend.generate(prompt, guidance, s, token if prompt_mode == "dsi" else None)
                break
            except Exception as e:  # backend errors are retried; interrupts propagate
                log.warning("backend failed on %s (attempt %d): %s", key, attempt + 1, e)
        if data is None:
            with job.lock:
                failed.append(key)
            return
        rel = image_relpath(dataset, c, i)
        path = out / rel
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".part")
            tmp.write_bytes(data)
            tmp.replace(path)
            rec = ImageRecord(rel, c, Origin.SYNTHETIC,
                              Provenance(prompt, tid, s, float(guidance.w), backend.backend_id,
                                         hashlib.sha256(data).hexdigest()))
            with job.lock:
                fh.write(record_line(rec) + "\n")
                fh.flush()
                job.records[key] = rec
        except OSError as e:
            if e.errno == errno.ENOSPC:
                raise GenerationAborted(f"disk full while writing {path}") from e
            raise

    try:
        n = max(1, min(workers, getattr(backend, "max_parallelism", 1)))
        if n == 1:
            for key in todo:
                one(key)
        else:
            with ThreadPoolExecutor(n) as pool:
                for f in [pool.submit(one, k) for k in todo]:
                    f.result()
    finally:
        fh.close()
    recs = tuple(job.records[k] for k in sorted(job.records))
    manifest = SplitManifest(dataset, recs, Role.SYNTHETIC, root=out)
    if failed:
        raise GenerationError(sorted(failed), manifest)
    return manifest
