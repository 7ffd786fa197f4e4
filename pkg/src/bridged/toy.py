"""Small offline transfer task built from procedural renderings.

Real images come from :func:`render_procedural` in the "real" domain; the
synthetic set is produced by :class:`StubBackend` through the normal generation
job, so it carries full provenance and the domain shift of the stub.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import DatasetSpec, ImageRecord, Metric, Origin, Role, SplitManifest, persist_manifest, sample_few_shot
from .genesis import GuidanceConfig, StubBackend, encode_png, generate_images, render_procedural
from .metrics import convergence_epochs
from .transfer import StageConfig, make_pipeline, run_pipeline

TOY_CLASSES = ("banded", "braided", "cracked", "dotted", "grid", "striped", "woven", "zigzagged")


def toy_dataset(n_classes: int = 6, metric: Metric = Metric.TOP1) -> DatasetSpec:
    if not 2 <= n_classes <= len(TOY_CLASSES):
        raise ValueError(f"toy dataset supports 2..{len(TOY_CLASSES)} classes")
    return DatasetSpec("toy", TOY_CLASSES[:n_classes], metric=metric)


def write_real_split(dataset: DatasetSpec, per_class: int, out, seed: int, size: int = 16,
                     role: Role = Role.TRAIN) -> SplitManifest:
    out = Path(out)
    recs = []
    for c in range(dataset.n_classes):
        for i in range(per_class):
            s = int(np.random.SeedSequence([seed, 7919, c, i]).generate_state(1)[0])
            rel = f"{role.value}/{c}/{i:06d}.png"
            p = out / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(encode_png(render_procedural(c, dataset.n_classes, size, s, "real")))
            recs.append(ImageRecord(rel, c, Origin.REAL))
    m = SplitManifest(dataset, tuple(recs), role, root=out)
    persist_manifest(m, out / f"{role.value}.jsonl")
    return m


@dataclass
class ToyTask:
    dataset: DatasetSpec
    real_train: SplitManifest
    real_test: SplitManifest
    synthetic: SplitManifest
    size: int


def toy_synthetic(dataset: DatasetSpec, per_class: int, out, size: int = 16, seed: int = 0,
                  guidance_scale: float = 3.5, prompt_mode: str = "template", token=None) -> SplitManifest:
    return generate_images(dataset, per_class, StubBackend(dataset.class_names),
                           GuidanceConfig(w=guidance_scale, resolution=size), out,
                           prompt_mode=prompt_mode, token=token, seed=seed)


def build_toy_task(root, n_classes: int = 6, real_per_class: int = 10, test_per_class: int = 40,
                   synthetic_per_class: int = 200, size: int = 16, seed: int = 0, guidance_scale: float = 3.5,
                   prompt_mode: str = "template", token=None, synthetic_dir: str = "synthetic") -> ToyTask:
    """Write real train/val splits under ``root/real`` and a stub-generated pool under ``root/synthetic_dir``."""
    root = Path(root)
    ds = toy_dataset(n_classes)
    train = write_real_split(ds, real_per_class, root / "real", seed, size, Role.TRAIN)
    test = write_real_split(ds, test_per_class, root / "real", seed + 1, size, Role.VAL)
    syn = toy_synthetic(ds, synthetic_per_class, root / synthetic_dir, size, seed, guidance_scale, prompt_mode, token)
    return ToyTask(ds, train, test, syn, size)


def toy_stage(**overrides) -> StageConfig:
    kw = dict(learning_rate=0.05, epochs=30, batch_size=32, augment="none", weight_decay=5e-4)
    kw.update(overrides)
    return StageConfig(**kw)


def run_toy_pipeline(task: ToyTask, kind: str, seed: int, stage: StageConfig | None = None,
                     stage1: StageConfig | None = None, shots: int | None = None, arch: str = "tinycnn",
                     out=None):
    real = task.real_train if shots is None else sample_few_shot(task.real_train, shots, seed)
    stage = replace(stage or toy_stage(), seed=seed)
    if stage1 is not None:
        stage1 = replace(stage1, seed=seed)
    cfg = make_pipeline(kind, real, task.real_test, task.synthetic if kind != "vanilla" else None, stage,
                        stage1=stage1 if kind in ("bridged", "bridged++", "bridged_pp") else None,
                        arch=arch, image_size=task.size, seed=seed)
    return run_pipeline(cfg, out=out)


@dataclass
class DirectionResult:
    accuracy: dict[str, list[float]]
    convergence: dict[str, list[float]]

    def median_accuracy(self, kind: str) -> float:
        return float(np.median(self.accuracy[kind]))

    def median_convergence(self, kind: str) -> float:
        return float(np.median(self.convergence[kind]))


def direction_check(task: ToyTask, seeds=(0, 1, 2, 3, 4), threshold: float = 0.9,
                    kinds=("vanilla", "mixed", "bridged", "bridged++"), stage: StageConfig | None = None) -> DirectionResult:
    """Run every pipeline kind per seed; record final accuracy and stage-2 epochs to ``threshold``.

    A run that never reaches the threshold counts as ``epochs + 1``.
    """
    acc: dict[str, list[float]] = {k: [] for k in kinds}
    conv: dict[str, list[float]] = {k: [] for k in kinds}
    for s in seeds:
        for k in kinds:
            run = run_toy_pipeline(task, k, s, stage)
            acc[k].append(run.final_accuracy)
            trace = run.stages[-1].trace
            e = convergence_epochs(trace, threshold)
            conv[k].append(len(trace) + 1 if e is None else e)
    return DirectionResult(acc, conv)


def config_digest(obj) -> str:
    return hashlib.sha256(repr(obj).encode()).hexdigest()[:12]
