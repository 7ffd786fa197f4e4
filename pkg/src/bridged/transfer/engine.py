"""Staged fine-tuning: vanilla, mixed, bridged and bridged++ transfer."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, WeightedRandomSampler

from ..core import Origin, Role, SplitManifest
from ..metrics import ConvergenceTrace, EpochRecord, accuracy
from .backbones import Backbone, build_backbone, extractor_hash, reinit_classifier
from .data import ManifestDataset, eval_transform, preload, train_transform

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (0.1, 0.03, 0.01, 0.003, 0.001)
PRELOAD_LIMIT = 20000


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step} (lr={lr:.3g})")
        self.epoch, self.step, self.lr, self.loss = epoch, step, lr, loss


class LRSelectionError(RuntimeError):
    def __init__(self, diagnostics: dict):
        super().__init__("every learning rate diverged: " + "; ".join(f"{k}: {v}" for k, v in diagnostics.items()))
        self.diagnostics = diagnostics


class PipelineKind(str, Enum):
    VANILLA = "vanilla"
    MIXED = "mixed"
    BRIDGED = "bridged"
    BRIDGED_PP = "bridged_pp"

    @classmethod
    def parse(cls, s: "str | PipelineKind") -> "PipelineKind":
        if isinstance(s, cls):
            return s
        return cls("bridged_pp" if s in ("bridged++", "bridgedpp") else s)


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2


@dataclass(frozen=True)
class StageConfig:
    learning_rate: float = 0.01
    epochs: int = 150
    weight_decay: float = 5e-4
    batch_size: int = 64
    momentum: float = 0.9
    schedule: str = "cosine"
    mixup: MixupConfig | None = None
    fc_reinit_before: bool = False
    fixed_feature: bool = False
    seed: int = 0
    augment: str = "imagenet"
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if isinstance(self.mixup, dict):
            object.__setattr__(self, "mixup", MixupConfig(**self.mixup))

    @classmethod
    def defaults(cls, arch: str = "resnet18", few_shot: bool = False, **overrides) -> "StageConfig":
        """Published training defaults: 150 epochs full-shot, 100 few-shot; ViTs use wd 0 and batch 128."""
        kw = dict(epochs=100 if few_shot else 150)
        if arch.startswith("vit"):
            kw.update(weight_decay=0.0, batch_size=128)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class PipelineConfig:
    kind: PipelineKind
    stage2: StageConfig
    real_manifest: SplitManifest
    eval_manifest: SplitManifest | None = None
    stage1: StageConfig | None = None
    synthetic_manifest: SplitManifest | None = None
    arch: str = "resnet18"
    pretrained: bool = True
    image_size: int = 224
    seed: int = 0
    # fraction of synthetic samples per epoch in mixed transfer; None = plain union
    synthetic_fraction: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PipelineKind.parse(self.kind))
        k = self.kind
        if k is PipelineKind.VANILLA:
            if self.stage1 is not None or self.synthetic_manifest is not None:
                raise ConfigError("vanilla transfer takes neither stage1 nor synthetic data")
        elif k is PipelineKind.MIXED:
            if self.stage1 is not None:
                raise ConfigError("mixed transfer is single-stage")
            if self.synthetic_manifest is None:
                raise ConfigError("mixed transfer needs a synthetic manifest")
        else:
            if self.stage1 is None or self.synthetic_manifest is None:
                raise ConfigError(f"{k.value} transfer needs stage1 and a synthetic manifest")
            if k is PipelineKind.BRIDGED_PP and (self.stage1.mixup is None or not self.stage2.fc_reinit_before):
                raise ConfigError("bridged++ needs mixup in stage1 and fc_reinit_before in stage2")
        if self.synthetic_fraction is not None and not 0 <= self.synthetic_fraction <= 1:
            raise ConfigError("synthetic_fraction must lie in [0, 1]")

    @property
    def dataset(self):
        return self.real_manifest.dataset

    def with_learning_rate(self, lr: float, stages: Sequence[str] = ("stage1", "stage2")) -> "PipelineConfig":
        kw = {s: replace(getattr(self, s), learning_rate=lr) for s in stages if getattr(self, s) is not None}
        return replace(self, **kw)

    def with_seed(self, seed: int) -> "PipelineConfig":
        kw = {s: replace(getattr(self, s), seed=seed) for s in ("stage1", "stage2") if getattr(self, s) is not None}
        return replace(self, seed=seed, **kw)

    def describe(self) -> dict:
        def manifest_summary(m):
            return None if m is None else {"dataset": m.dataset.name, "role": m.role.value, "records": len(m)}
        return {
            "kind": self.kind.value, "arch": self.arch, "pretrained": self.pretrained,
            "image_size": self.image_size, "seed": self.seed, "synthetic_fraction": self.synthetic_fraction,
            "stage1": None if self.stage1 is None else asdict(self.stage1),
            "stage2": asdict(self.stage2),
            "real_manifest": manifest_summary(self.real_manifest),
            "synthetic_manifest": manifest_summary(self.synthetic_manifest),
            "eval_manifest": manifest_summary(self.eval_manifest),
        }


def make_pipeline(kind, real: SplitManifest, eval_manifest: SplitManifest | None = None,
                  synthetic: SplitManifest | None = None, stage: StageConfig | None = None,
                  stage1: StageConfig | None = None, mixup_alpha: float = 0.2, **kw) -> PipelineConfig:
    """Build a pipeline config with the per-kind wiring filled in.

    ``stage`` is the real-data stage; the synthetic stage mirrors it unless
    ``stage1`` is given. bridged++ switches on stage-1 mixup and stage-2 head reinit.
    """
    kind = PipelineKind.parse(kind)
    stage = stage or StageConfig()
    if kind in (PipelineKind.VANILLA, PipelineKind.MIXED):
        return PipelineConfig(kind, stage, real, eval_manifest, None,
                              synthetic if kind is PipelineKind.MIXED else None, **kw)
    s1 = stage1 or replace(stage, fc_reinit_before=False, fixed_feature=False)
    if kind is PipelineKind.BRIDGED_PP:
        s1 = replace(s1, mixup=s1.mixup or MixupConfig(mixup_alpha))
        stage = replace(stage, fc_reinit_before=True)
    return PipelineConfig(kind, stage, real, eval_manifest, s1, synthetic, **kw)


# ---------------------------------------------------------------------------
# building blocks

def mixup_batch(x_a, x_b, y_a, y_b, lam: float):
    """Convex combination of two batches and their (one-hot or soft) labels."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight {lam} outside [0, 1]")
    if tuple(x_a.shape) != tuple(x_b.shape) or tuple(y_a.shape) != tuple(y_b.shape):
        raise ValueError("mixup inputs must have matching shapes")
    return lam * x_a + (1 - lam) * x_b, lam * y_a + (1 - lam) * y_b


def sample_mixup_lambda(alpha: float, rng: np.random.Generator, size=None):
    return rng.beta(alpha, alpha, size=size)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` (step 0) to 0 (step ``total_steps``)."""
    return 0.5 * base_lr * (1 + math.cos(math.pi * step / total_steps))


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -(targets * F.log_softmax(logits, dim=1)).sum(1).mean()


@dataclass
class StageResult:
    name: str
    trace: ConvergenceTrace
    n_train: int
    n_synthetic: int
    n_real: int
    initial_extractor_hash: str
    final_extractor_hash: str
    initial_head: dict
    final_head: dict

    @property
    def synthetic_share(self) -> float:
        return self.n_synthetic / max(self.n_train, 1)


def _head_state(model: Backbone) -> dict:
    return {k: v.detach().cpu().clone() for k, v in model.head.state_dict().items()}


def _device(model: torch.nn.Module) -> torch.device:
    return next(model.parameters()).device


class _TrainData:
    def __init__(self, manifest: SplitManifest, config: StageConfig, size: int, weights=None, num_workers: int = 0):
        self.n = len(manifest)
        self.config = config
        self.weights = None if weights is None else torch.as_tensor(weights, dtype=torch.double)
        self.tensors = None
        if config.augment == "none" and self.n <= PRELOAD_LIMIT:
            self.tensors = preload(manifest, "none", size)
        else:
            self.dataset = ManifestDataset(manifest, train_transform(size, config.augment))
            self.num_workers = num_workers

    def steps_per_epoch(self) -> int:
        return math.ceil(self.n / self.config.batch_size)

    def epoch(self, gen: torch.Generator):
        bs = self.config.batch_size
        if self.tensors is not None:
            x, y = self.tensors
            if self.weights is None:
                order = torch.randperm(self.n, generator=gen)
            else:
                order = torch.multinomial(self.weights, self.n, replacement=True, generator=gen)
            for i in range(0, self.n, bs):
                idx = order[i:i + bs]
                yield x[idx], y[idx]
        else:
            sampler = None if self.weights is None else WeightedRandomSampler(self.weights, self.n, generator=gen)
            loader = DataLoader(self.dataset, batch_size=bs, shuffle=sampler is None, sampler=sampler,
                                generator=gen, num_workers=self.num_workers)
            yield from loader


def _eval_tensors(manifest: SplitManifest, size: int):
    if len(manifest) <= PRELOAD_LIMIT:
        x, y = preload(manifest, "eval", size)
        return [(x[i:i + 256], y[i:i + 256]) for i in range(0, len(y), 256)]
    return DataLoader(ManifestDataset(manifest, eval_transform(size)), batch_size=256)


@torch.no_grad()
def predict_proba(model: Backbone, manifest: SplitManifest, image_size: int = 224) -> np.ndarray:
    """Softmax outputs of ``model`` over its own head's label space."""
    was = model.training
    model.eval()
    dev = _device(model)
    out = [F.softmax(model(x.to(dev)), dim=1).cpu().double() for x, _ in _eval_tensors(manifest, image_size)]
    model.train(was)
    return torch.cat(out).numpy() if out else np.zeros((0, model.n_classes))


@torch.no_grad()
def evaluate(model: Backbone, manifest: SplitManifest, image_size: int = 224) -> float:
    probs = predict_proba(model, manifest, image_size)
    ds = manifest.dataset
    return accuracy(ds.metric, probs.argmax(1), manifest.labels(), ds.n_classes)


def fine_tune_stage(model: Backbone, manifest: SplitManifest, eval_manifest: SplitManifest | None,
                    config: StageConfig, image_size: int = 224, sample_weights=None, name: str = "stage",
                    num_workers: int = 0) -> tuple[Backbone, StageResult]:
    """Run ``config.epochs`` epochs of SGD with per-step cosine annealing.

    The logged ``lr`` of epoch ``e`` is the rate after that epoch's last step,
    i.e. ``cosine_lr(base, e * steps_per_epoch, total_steps)``; it reaches 0
    at the final epoch. Mixup (fresh lambda per batch) and the frozen-extractor
    mode are applied as configured. Eval accuracy uses the dataset's metric.
    """
    if len(manifest) == 0:
        raise ValueError("cannot fine-tune on an empty manifest")
    n_classes = manifest.dataset.n_classes
    if model.n_classes != n_classes:
        raise ValueError(f"model head has {model.n_classes} outputs, dataset has {n_classes} classes")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dev = _device(model)
    init_hash, init_head = extractor_hash(model), _head_state(model)

    for p in model.features.parameters():
        p.requires_grad_(not config.fixed_feature)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    data = _TrainData(manifest, config, image_size, sample_weights, num_workers)
    spe = data.steps_per_epoch()
    total = config.epochs * spe
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_lr(1.0, s, total))
    evaluate_on = eval_manifest if eval_manifest is not None and len(eval_manifest) else None

    trace = ConvergenceTrace()
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        if config.fixed_feature:
            model.features.eval()
        loss_sum, correct, seen = 0.0, 0.0, 0
        for x, y in data.epoch(gen):
            x, y = x.to(dev), y.to(dev)
            target = F.one_hot(y, n_classes).to(x.dtype)
            hard = y
            if config.mixup is not None:
                lam = float(sample_mixup_lambda(config.mixup.alpha, rng))
                perm = torch.randperm(len(y), generator=gen).to(dev)
                x, target = mixup_batch(x, x[perm], target, target[perm], lam)
                hard = y if lam >= 0.5 else y[perm]
            logits = model(x)
            loss = soft_cross_entropy(logits, target)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch, step, opt.param_groups[0]["lr"], float(loss))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            loss_sum += loss.item() * len(y)
            correct += float((logits.argmax(1) == hard).sum())
            seen += len(y)
        eval_acc = None
        if evaluate_on is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            eval_acc = evaluate(model, evaluate_on, image_size)
        trace.append(EpochRecord(epoch, opt.param_groups[0]["lr"], loss_sum / seen, correct / seen, eval_acc))
        log.debug("%s epoch %d loss %.4f acc %.3f eval %s", name, epoch, loss_sum / seen, correct / seen, eval_acc)

    for p in model.features.parameters():
        p.requires_grad_(True)
    n_syn = sum(r.origin is Origin.SYNTHETIC for r in manifest.records)
    result = StageResult(name, trace, len(manifest), n_syn, len(manifest) - n_syn, init_hash,
                         extractor_hash(model), init_head, _head_state(model))
    return model, result


# ---------------------------------------------------------------------------
# pipelines

@dataclass
class PipelineRun:
    config: PipelineConfig
    model: Backbone
    stages: list[StageResult] = field(default_factory=list)
    final_accuracy: float | None = None
    metric: str = "top1"
    out_dir: Path | None = None

    @property
    def checkpoint(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "model.pt"


def _mixed_weights(manifest: SplitManifest, fraction: float) -> np.ndarray:
    syn = np.array([r.origin is Origin.SYNTHETIC for r in manifest.records])
    n_syn, n_real = syn.sum(), (~syn).sum()
    if n_syn == 0 or n_real == 0:
        return np.ones(len(syn))
    return np.where(syn, fraction / n_syn, (1 - fraction) / n_real)


def run_pipeline(config: PipelineConfig, out: str | Path | None = None, device: str | None = None,
                 num_workers: int = 0) -> PipelineRun:
    """Execute one transfer pipeline end to end; optionally write a run directory."""
    k = config.kind
    ds = config.dataset
    n = ds.n_classes
    model = build_backbone(config.arch, config.pretrained, config.seed)
    if device:
        model = model.to(device)
    # the source head never matches the target label space
    model = reinit_classifier(model, n, config.seed)
    real, syn, ev = config.real_manifest, config.synthetic_manifest, config.eval_manifest
    if real.role is Role.SYNTHETIC or any(r.origin is Origin.SYNTHETIC for r in real.records):
        raise ConfigError("real_manifest contains synthetic records")
    stages: list[StageResult] = []
    kw = dict(image_size=config.image_size, num_workers=num_workers)

    if k is PipelineKind.VANILLA:
        model, r = fine_tune_stage(model, real, ev, config.stage2, name="stage2", **kw)
        stages.append(r)
    elif k is PipelineKind.MIXED:
        union = real.union(syn)
        weights = None if config.synthetic_fraction is None else _mixed_weights(union, config.synthetic_fraction)
        model, r = fine_tune_stage(model, union, ev, config.stage2, sample_weights=weights, name="stage2", **kw)
        stages.append(r)
    else:
        if any(r.origin is not Origin.SYNTHETIC for r in syn.records):
            raise ConfigError("synthetic_manifest contains real records")
        model, r1 = fine_tune_stage(model, syn, ev, config.stage1, name="stage1", **kw)
        stages.append(r1)
        if config.stage2.fc_reinit_before:
            model = reinit_classifier(model, n, config.seed + 1_000_003)
        model, r2 = fine_tune_stage(model, real, ev, config.stage2, name="stage2", **kw)
        stages.append(r2)

    final = stages[-1].trace.final.eval_accuracy
    run = PipelineRun(config, model, stages, final, ds.metric.value)
    if out is not None:
        write_run_dir(run, out)
    return run


def write_run_dir(run: PipelineRun, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.config.describe(), indent=2, sort_keys=True))
    for st in run.stages:
        with open(out / f"metrics_{st.name}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "train_loss", "train_acc", "eval_acc"])
            for r in st.trace.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_accuracy),
                            "" if r.eval_accuracy is None else repr(r.eval_accuracy)])
    final = {"kind": run.config.kind.value, "dataset": run.config.dataset.name, "metric": run.metric,
             "final_accuracy": run.final_accuracy,
             "stages": [{"name": s.name, "n_train": s.n_train, "n_synthetic": s.n_synthetic, "n_real": s.n_real,
                         "epochs": len(s.trace)} for s in run.stages],
             "checkpoint": "model.pt"}
    (out / "final_metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True))
    save_checkpoint(run.model, out / "model.pt")
    run.out_dir = out
    return out


def save_checkpoint(model: Backbone, path) -> None:
    torch.save({"architecture": model.architecture, "n_classes": model.n_classes,
                "pretrained_source": model.pretrained_source, "state_dict": model.state_dict()}, path)


def load_checkpoint(path, map_location="cpu") -> Backbone:
    blob = torch.load(path, map_location=map_location, weights_only=False)
    model = build_backbone(blob["architecture"], pretrained=False)
    model = reinit_classifier(model, blob["n_classes"], 0)
    model.load_state_dict(blob["state_dict"])
    model.pretrained_source = blob.get("pretrained_source", "unknown")
    return model


# ---------------------------------------------------------------------------
# learning-rate selection

@dataclass
class LRSelection:
    learning_rate: float
    table: dict[float, float | None]
    diagnostics: dict[float, str] = field(default_factory=dict)


def holdout_split(manifest: SplitManifest, fraction: float, seed: int) -> tuple[SplitManifest, SplitManifest]:
    """Per-class split of a train manifest into (fit, held-out); each class keeps at least one fit record."""
    if not 0 < fraction < 1:
        raise ValueError("holdout fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    held: set[int] = set()
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.class_index, []).append(i)
    for idx in by_class.values():
        n = min(len(idx) - 1, int(round(fraction * len(idx))))
        held.update(int(idx[j]) for j in rng.choice(len(idx), size=max(n, 0), replace=False))
    fit = tuple(r for i, r in enumerate(manifest.records) if i not in held)
    out = tuple(r for i, r in enumerate(manifest.records) if i in held)
    return replace(manifest, records=fit), replace(manifest, records=out, role=Role.VAL)


def select_lr(template: PipelineConfig, grid: Sequence[float] = DEFAULT_LR_GRID, seeds: Sequence[int] = (0,),
              runner: Callable[[PipelineConfig], PipelineRun] = run_pipeline,
              stages: Sequence[str] = ("stage1", "stage2"), selection: str = "val",
              holdout_fraction: float = 0.2) -> LRSelection:
    """Pick the grid point with the best mean final eval accuracy.

    ``selection="val"`` scores on the template's eval manifest;
    ``selection="holdout"`` carves a per-class slice out of the real train
    manifest instead. Ties go to the larger learning rate. A one-point grid
    is returned without running anything.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("learning-rate grid is empty")
    if len(grid) == 1:
        return LRSelection(grid[0], {grid[0]: None})
    if selection == "holdout":
        fit, held = holdout_split(template.real_manifest, holdout_fraction, template.seed)
        template = replace(template, real_manifest=fit, eval_manifest=held)
    elif selection != "val":
        raise ValueError(f"unknown LR selection split {selection!r}")
    if template.eval_manifest is None or not len(template.eval_manifest):
        raise ConfigError("learning-rate selection needs an eval manifest")
    table: dict[float, float | None] = {}
    diag: dict[float, str] = {}
    for lr in grid:
        accs = []
        try:
            for s in seeds:
                run = runner(template.with_learning_rate(lr, stages).with_seed(s))
                accs.append(run.final_accuracy)
            table[lr] = float(np.mean(accs))
        except (NonFiniteLossError, FloatingPointError) as e:
            table[lr] = None
            diag[lr] = str(e)
    ok = {lr: a for lr, a in table.items() if a is not None}
    if not ok:
        raise LRSelectionError(diag)
    best = max(ok.items(), key=lambda kv: (kv[1], kv[0]))[0]
    return LRSelection(best, table, diag)
