"""Sweep runner over volume / guidance scale / shots / architecture axes.

A sweep lives in one store directory::

    store/records.jsonl    one RunRecord per line, append-only
    store/failures.jsonl   failed cells (retried on the next invocation)
    store/summary.txt      human-readable digest
    store/runs/<hash>_s<seed>/   run directories
    store/data/            prepared toy data and generated synthetic pools

Completed (config hash, seed) pairs are skipped, so re-running a finished
sweep trains nothing.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..core import InsufficientDataError, SplitManifest, load_manifest, register_dataset, sample_few_shot
from ..genesis import GuidanceConfig, generate_images, make_backend
from ..transfer import StageConfig, make_pipeline, run_pipeline, select_lr, write_run_dir
from .config import CellTemplate, ConfigFileError, cell_template_from_dict, load_yaml

log = logging.getLogger(__name__)

VOLUME_AXIS = (500, 1000, 1500, 2000, 2500, 3000)
GUIDANCE_AXIS = (2.0, 3.5, 5.0, 6.5, 8.0)
SHOTS_AXIS = (1, 2, 4, 8, 16)
DEFAULT_AXES = {"images_per_class": VOLUME_AXIS, "guidance_scale": GUIDANCE_AXIS, "shots": SHOTS_AXIS}
AXIS_ALIASES = {"volume": "images_per_class", "gs": "guidance_scale", "k": "shots", "arch": "architecture"}
AXES = ("images_per_class", "guidance_scale", "shots", "architecture")


@dataclass(frozen=True)
class SweepSpec:
    base: CellTemplate
    axes: dict[str, tuple] = field(default_factory=dict)
    seeds: tuple[int, ...] = (0, 1, 2)
    name: str = "sweep"

    def __post_init__(self):
        axes = {}
        for k, v in self.axes.items():
            k = AXIS_ALIASES.get(k, k)
            if k not in AXES:
                raise ConfigFileError(f"unknown sweep axis {k!r}; expected one of {AXES}")
            if v == "default":
                if k not in DEFAULT_AXES:
                    raise ConfigFileError(f"axis {k!r} has no default values")
                v = DEFAULT_AXES[k]
            v = tuple(v)
            if not v:
                raise ConfigFileError(f"axis {k!r} is empty")
            if len(set(v)) != len(v):
                raise ConfigFileError(f"axis {k!r} has repeated values")
            axes[k] = v
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigFileError("seeds must be a non-empty list of distinct integers")

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    def __len__(self) -> int:
        return len(self.cells()) * len(self.seeds)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "SweepSpec":
        extra = set(data) - {"name", "base", "axes", "seeds"}
        if extra:
            raise ConfigFileError(f"unknown top-level keys {sorted(extra)}")
        if "base" not in data:
            raise ConfigFileError("sweep config needs a 'base' section")
        return cls(cell_template_from_dict(data["base"], base_dir), dict(data.get("axes") or {}),
                   tuple(data.get("seeds", (0, 1, 2))), data.get("name", "sweep"))

    @classmethod
    def from_file(cls, path, env=None) -> "SweepSpec":
        path = Path(path)
        return cls.from_dict(load_yaml(path, env), path.parent.resolve())


def config_hash(base: CellTemplate, coords: dict) -> str:
    blob = json.dumps({"base": asdict(base), "coords": coords}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunRecord:
    config_hash: str
    coords: dict
    seed: int
    final_accuracy: float | None
    metric: str
    traces_ref: str
    wall_clock: float
    dataset: str = ""
    pipeline: str = ""
    arch: str = ""

    @property
    def key(self) -> tuple[str, int]:
        return self.config_hash, self.seed

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def read_records(path) -> list[RunRecord]:
    """Read a record store, dropping a torn final line left by a killed writer."""
    path = Path(path)
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()
    out = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(RunRecord.from_json(line))
        except (json.JSONDecodeError, TypeError):
            if i == len(lines) - 1:
                log.warning("%s: dropping truncated final record", path)
                break
            raise ValueError(f"{path}:{i + 1}: corrupt record") from None
    return out


def _append_line(path: Path, line: str) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())


# ---------------------------------------------------------------------------
# preparation: data that every cell shares

@dataclass(frozen=True)
class PreparedBase:
    template: CellTemplate
    real_manifest: str
    eval_manifest: str | None
    synthetic_pools: dict = field(default_factory=dict)   # guidance scale (or None) -> manifest path


def _pool_size(spec: SweepSpec, default: int) -> int:
    return max(spec.axes.get("images_per_class", (default,)))


def prepare(spec: SweepSpec, data_dir) -> PreparedBase:
    """Build toy data and generate synthetic pools the cells will draw from."""
    base = spec.base
    data_dir = Path(data_dir)
    real, ev, syn = base.real_manifest, base.eval_manifest, base.synthetic_manifest
    pools: dict = {}
    if base.toy is not None:
        from ..toy import build_toy_task

        t = base.toy
        per_class = _pool_size(spec, t.synthetic_per_class)
        for gs in spec.axes.get("guidance_scale", (None,)):
            w = 3.5 if gs is None else gs
            build_toy_task(data_dir / "toy", t.n_classes, t.real_per_class, t.test_per_class, per_class, t.size,
                           t.seed, guidance_scale=w, synthetic_dir=f"synthetic_gs{w:g}")
            pools[gs] = str(data_dir / "toy" / f"synthetic_gs{w:g}" / "manifest.jsonl")
        real = real or str(data_dir / "toy" / "real" / "train.jsonl")
        ev = ev or str(data_dir / "toy" / "real" / "val.jsonl")
    elif base.pipeline == "vanilla":
        pass
    elif "guidance_scale" in spec.axes or (syn is None and base.generation is not None):
        gen = base.generation
        if gen is None:
            raise ConfigFileError("a guidance_scale axis needs a 'generation' section")
        ds = load_manifest(real).dataset
        backend = make_backend(gen.backend, ds.class_names, seed=gen.seed, token_env=gen.token_env)
        token = None
        if gen.token:
            from ..dsi import load_token
            token = load_token(gen.token)
        per_class = _pool_size(spec, gen.images_per_class)
        for gs in spec.axes.get("guidance_scale", (gen.guidance_scale,)):
            out = data_dir / ds.name / f"synthetic_gs{gs:g}"
            generate_images(ds, per_class, backend, GuidanceConfig(w=gs, steps=gen.steps, resolution=gen.resolution),
                            out, prompt_mode=gen.prompt_mode, token=token, seed=gen.seed, workers=gen.workers)
            pools[gs if "guidance_scale" in spec.axes else None] = str(out / "manifest.jsonl")
    elif syn is not None:
        pools[None] = syn
    if real is None:
        raise ConfigFileError("no real manifest")
    return PreparedBase(base, real, ev, pools)


def take_per_class(manifest: SplitManifest, n: int) -> SplitManifest:
    """First ``n`` records of every class, in manifest order (volumes nest)."""
    groups = manifest.by_class()
    keep = set()
    for c in range(manifest.dataset.n_classes):
        recs = groups.get(c, [])
        if len(recs) < n:
            raise InsufficientDataError(manifest.dataset.class_names[c], len(recs), n)
        keep.update(r.path for r in recs[:n])
    return replace(manifest, records=tuple(r for r in manifest.records if r.path in keep))


# ---------------------------------------------------------------------------
# cell execution

@dataclass(frozen=True)
class CellTask:
    prepared: PreparedBase
    coords: dict
    seed: int
    out_dir: str
    config_hash: str


def build_cell_config(task: CellTask):
    base, coords, seed = task.prepared.template, task.coords, task.seed
    real = load_manifest(task.prepared.real_manifest)
    if base.dataset and real.dataset.name != base.dataset:
        try:
            alias = register_dataset(base.dataset).name
        except KeyError:
            alias = base.dataset
        if real.dataset.name != alias:
            raise ConfigFileError(f"real manifest is for {real.dataset.name!r}, config says {base.dataset!r}")
    if "shots" in coords:
        real = sample_few_shot(real, int(coords["shots"]), seed)
    ev = load_manifest(task.prepared.eval_manifest) if task.prepared.eval_manifest else None
    syn = None
    if base.pipeline != "vanilla":
        pools = task.prepared.synthetic_pools
        path = pools.get(coords.get("guidance_scale"), pools.get(None))
        if path is None:
            raise ConfigFileError(f"{base.pipeline} needs synthetic data")
        syn = load_manifest(path)
        if "images_per_class" in coords:
            syn = take_per_class(syn, int(coords["images_per_class"]))
    arch = coords.get("architecture", base.arch)
    few = "shots" in coords
    stage = StageConfig.defaults(arch, few_shot=few, **base.stage)
    stage1 = None if base.stage1 is None else StageConfig.defaults(arch, few_shot=few, **base.stage1)
    kw = dict(arch=arch, pretrained=base.pretrained, image_size=base.image_size, seed=seed)
    if base.pipeline == "mixed":
        kw["synthetic_fraction"] = base.synthetic_fraction
    cfg = make_pipeline(base.pipeline, real, ev, syn, stage, stage1=stage1, **kw)
    return cfg.with_seed(seed)


def execute_cell(task: CellTask) -> dict:
    """Default cell runner: build the pipeline, select the LR if a grid is given, train."""
    cfg = build_cell_config(task)
    grid = task.prepared.template.lr_grid
    runs = {}

    def runner(c):
        runs[c.stage2.learning_rate] = r = run_pipeline(c)
        return r

    if len(grid) == 1:
        run = run_pipeline(cfg.with_learning_rate(grid[0]))
    else:
        chosen = select_lr(cfg, grid, seeds=(task.seed,), runner=runner,
                           selection=task.prepared.template.lr_selection).learning_rate
        # with a held-out slice the grid runs saw less data; retrain on the full split
        run = runs[chosen] if task.prepared.template.lr_selection == "val" else run_pipeline(cfg.with_learning_rate(chosen))
    write_run_dir(run, task.out_dir)
    return {"final_accuracy": run.final_accuracy, "metric": run.metric, "dataset": cfg.dataset.name,
            "pipeline": cfg.kind.value, "arch": cfg.arch}


def _timed(runner, task: CellTask):
    t0 = time.perf_counter()
    out = runner(task)
    return out, time.perf_counter() - t0


@dataclass
class SweepResult:
    records: list[RunRecord]
    failures: list[dict]
    executed: int

    @property
    def ok(self) -> bool:
        return not self.failures


def run_sweep(spec: SweepSpec, store_dir, runner: Callable[[CellTask], dict] = execute_cell,
              workers: int = 1) -> SweepResult:
    """Execute every (cell, seed) pair not already in the store.

    Records are appended by this process only, so writes stay serialized
    when cells run in a worker pool. A failing cell is logged to
    ``failures.jsonl`` and skipped; the rest of the sweep continues.
    """
    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    rec_path = store / "records.jsonl"
    existing = read_records(rec_path)
    # rewrite cleanly in case a torn tail was dropped
    if rec_path.exists():
        tmp = rec_path.with_suffix(".tmp")
        tmp.write_text("".join(r.to_json() + "\n" for r in existing), encoding="utf-8")
        tmp.replace(rec_path)
    done = {r.key for r in existing}

    pending: list[tuple[dict, int, str]] = []
    for coords in spec.cells():
        h = config_hash(spec.base, coords)
        for s in spec.seeds:
            if (h, s) not in done:
                pending.append((coords, s, h))

    failures: list[dict] = []
    new: list[RunRecord] = []
    if pending:
        prepared = prepare(spec, store / "data")
        tasks = [CellTask(prepared, c, s, str(store / "runs" / f"{h}_s{s}"), h) for c, s, h in pending]

        def finish(task: CellTask, result=None, elapsed=0.0, error: BaseException | None = None):
            if error is not None:
                entry = {"config_hash": task.config_hash, "coords": task.coords, "seed": task.seed,
                         "error": f"{type(error).__name__}: {error}",
                         "traceback": "".join(traceback.format_exception(type(error), error, error.__traceback__))[-2000:]}
                failures.append(entry)
                _append_line(store / "failures.jsonl", json.dumps(entry, sort_keys=True, default=str))
                log.error("cell %s seed %d failed: %s", task.coords, task.seed, error)
                return
            rec = RunRecord(task.config_hash, task.coords, task.seed, result.get("final_accuracy"),
                            result.get("metric", "top1"), os.path.relpath(task.out_dir, store), elapsed,
                            result.get("dataset", ""), result.get("pipeline", spec.base.pipeline),
                            result.get("arch", task.coords.get("architecture", spec.base.arch)))
            _append_line(rec_path, rec.to_json())
            new.append(rec)

        if workers <= 1:
            for t in tasks:
                try:
                    out, dt = _timed(runner, t)
                except Exception as e:  # noqa: BLE001 - one bad cell must not sink the sweep
                    finish(t, error=e)
                else:
                    finish(t, out, dt)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = {pool.submit(_timed, runner, t): t for t in tasks}
                for fut in as_completed(futs):
                    try:
                        out, dt = fut.result()
                    except Exception as e:  # noqa: BLE001
                        finish(futs[fut], error=e)
                    else:
                        finish(futs[fut], out, dt)

    order = {(config_hash(spec.base, c), s): i
             for i, (c, s) in enumerate((c, s) for c in spec.cells() for s in spec.seeds)}
    # a store may be shared by several specs; report only this one's records
    records = sorted((r for r in existing + new if r.key in order), key=lambda r: order[r.key])
    write_summary(spec, records, failures, store / "summary.txt")
    return SweepResult(records, failures, len(new))


def write_summary(spec: SweepSpec, records: list[RunRecord], failures: list[dict], path) -> None:
    lines = [f"sweep {spec.name}: {len(records)}/{len(spec)} runs recorded, {len(failures)} failed this invocation",
             f"pipeline {spec.base.pipeline}; axes " + (", ".join(f"{k}={list(v)}" for k, v in spec.axes.items()) or "none"),
             f"seeds {list(spec.seeds)}", ""]
    by_hash: dict[str, list[RunRecord]] = {}
    for r in records:
        by_hash.setdefault(r.config_hash, []).append(r)
    for h, rs in by_hash.items():
        accs = [r.final_accuracy for r in rs if r.final_accuracy is not None]
        stat = f"{100 * np.mean(accs):.1f}±{100 * np.std(accs):.1f}" if accs else "n/a"
        lines.append(f"{h}  {json.dumps(rs[0].coords, sort_keys=True)}  seeds={len(rs)}  {rs[0].metric} {stat}")
    if failures:
        lines += ["", "failures:"]
        lines += [f"  {f['config_hash']} seed {f['seed']} {json.dumps(f['coords'], sort_keys=True)}: {f['error']}"
                  for f in failures]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
