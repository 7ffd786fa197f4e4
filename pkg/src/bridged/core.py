"""Domain types, the downstream dataset registry, manifests and few-shot subsetting."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_SCHEMA = "bt-manifest/1"


class DatasetLookupError(KeyError):
    """Unknown dataset name."""


class InsufficientDataError(ValueError):
    def __init__(self, class_name: str, available: int, k: int):
        super().__init__(f"class {class_name!r} has {available} records, need {k}")
        self.class_name = class_name
        self.available = available
        self.k = k


class ManifestParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class IntegrityError(ValueError):
    pass


class Metric(str, Enum):
    TOP1 = "top1"
    MEAN_PER_CLASS = "mean_per_class"


class Origin(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class Role(str, Enum):
    TRAIN = "train"
    VAL = "val"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    class_names: tuple[str, ...]
    train_size: int = 0
    val_size: int = 0
    metric: Metric = Metric.TOP1

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "metric", Metric(self.metric))
        if not self.class_names:
            raise ValueError("a dataset needs at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError(f"duplicate class names in {self.name}")
        if self.train_size < 0 or self.val_size < 0:
            raise ValueError("split sizes must be non-negative")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def with_class_names(self, names: Sequence[str]) -> "DatasetSpec":
        """Swap in real class names; the count must match the registered one."""
        if len(names) != self.n_classes:
            raise ValueError(f"{self.name} has {self.n_classes} classes, got {len(names)} names")
        return replace(self, class_names=tuple(names))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class_names": list(self.class_names),
            "train_size": self.train_size,
            "val_size": self.val_size,
            "metric": self.metric.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(d["name"], tuple(d["class_names"]), d.get("train_size", 0), d.get("val_size", 0), Metric(d["metric"]))


def spec_from_class_names(name: str, class_names: Iterable[str], metric: Metric | str = Metric.TOP1,
                          train_size: int = 0, val_size: int = 0) -> DatasetSpec:
    """Build a spec for an unregistered dataset; labels follow sorted class-name order."""
    return DatasetSpec(name, tuple(sorted(class_names)), train_size, val_size, Metric(metric))


@dataclass(frozen=True)
class Provenance:
    prompt: str
    template_id: int | None
    seed: int
    guidance_scale: float
    backend_id: str
    sha256: str


@dataclass(frozen=True)
class ImageRecord:
    path: str
    class_index: int
    origin: Origin = Origin.REAL
    provenance: Provenance | None = None

    def __post_init__(self):
        object.__setattr__(self, "origin", Origin(self.origin))
        object.__setattr__(self, "path", str(self.path))
        if self.class_index < 0:
            raise ValueError(f"negative class index for {self.path}")
        if self.origin is Origin.SYNTHETIC:
            p = self.provenance
            if p is None:
                raise ValueError(f"synthetic record {self.path} lacks provenance")
            # template_id is None for style-token prompts; every other field is mandatory
            if p.prompt is None or p.seed is None or p.guidance_scale is None or not p.backend_id or not p.sha256:
                raise ValueError(f"synthetic record {self.path} has incomplete provenance")


@dataclass(frozen=True)
class SplitManifest:
    dataset: DatasetSpec
    records: tuple[ImageRecord, ...]
    role: Role = Role.TRAIN
    # directory relative paths resolve against; not part of the persisted identity
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "role", Role(self.role))
        n = self.dataset.n_classes
        seen = set()
        for r in self.records:
            if r.class_index >= n:
                raise ValueError(f"class index {r.class_index} out of range for {self.dataset.name}")
            if r.path in seen:
                raise ValueError(f"duplicate path in manifest: {r.path}")
            seen.add(r.path)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def by_class(self) -> dict[int, list[ImageRecord]]:
        out: dict[int, list[ImageRecord]] = {c: [] for c in range(self.dataset.n_classes)}
        for r in self.records:
            out[r.class_index].append(r)
        return out

    def labels(self) -> np.ndarray:
        return np.array([r.class_index for r in self.records], dtype=np.int64)

    def union(self, other: "SplitManifest", role: Role | str = Role.TRAIN) -> "SplitManifest":
        if other.dataset != self.dataset:
            raise ValueError("cannot merge manifests of different datasets")
        recs = [_absolutize(self, r) for r in self.records] + [_absolutize(other, r) for r in other.records]
        return SplitManifest(self.dataset, tuple(recs), Role(role))


def _absolutize(m: SplitManifest, r: ImageRecord) -> ImageRecord:
    if m.root is None or Path(r.path).is_absolute():
        return r
    return replace(r, path=str(m.resolve(r)))


# ---------------------------------------------------------------------------
# registry

def _names_resource(name: str) -> tuple[str, ...] | None:
    try:
        text = resources.files("bridged.data.classnames").joinpath(f"{name}.txt").read_text("utf-8")
    except FileNotFoundError:
        return None
    return tuple(line.strip() for line in text.splitlines() if line.strip())


# name: (classes, train, val, metric)
_BENCHMARKS = {
    "aircraft": (100, 6667, 3333, Metric.MEAN_PER_CLASS),
    "caltech101": (101, 3030, 5647, Metric.MEAN_PER_CLASS),
    "cars": (120, 8144, 8041, Metric.TOP1),
    "cub200": (200, 5994, 5794, Metric.TOP1),
    "dtd": (47, 3760, 1880, Metric.TOP1),
    "dogs": (120, 12000, 8580, Metric.TOP1),
    "flowers": (102, 2040, 6149, Metric.MEAN_PER_CLASS),
    "food": (101, 75750, 25250, Metric.TOP1),
    "pets": (37, 3680, 3669, Metric.MEAN_PER_CLASS),
    "sun397": (397, 19850, 19850, Metric.TOP1),
}

_ALIASES = {"caltech-101": "caltech101", "cub": "cub200", "cub-200": "cub200", "food101": "food",
            "food-101": "food", "foods": "food", "stanford_cars": "cars", "stanford_dogs": "dogs"}

_CUSTOM: dict[str, DatasetSpec] = {}

BENCHMARK_DATASETS = tuple(_BENCHMARKS)


def register_custom(spec: DatasetSpec) -> DatasetSpec:
    _CUSTOM[spec.name] = spec
    return spec


def register_dataset(name: str) -> DatasetSpec:
    """Look up one of the ten downstream datasets, or a previously registered custom spec.

    Datasets without a bundled class-name list get placeholder names
    ``<name>_000`` ...; use :meth:`DatasetSpec.with_class_names` to attach the real ones.
    """
    if name in _CUSTOM:
        return _CUSTOM[name]
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in _BENCHMARKS:
        raise DatasetLookupError(f"unknown dataset {name!r}")
    n, train, val, metric = _BENCHMARKS[key]
    names = _names_resource(key)
    if names is None:
        names = tuple(f"{key}_{i:03d}" for i in range(n))
    assert len(names) == n, (key, len(names))
    return DatasetSpec(key, names, train, val, metric)


# ---------------------------------------------------------------------------
# few-shot

def sample_few_shot(manifest: SplitManifest, k: int, seed: int, allow_truncation: bool = False) -> SplitManifest:
    """Draw exactly ``k`` records per class without replacement.

    Output keeps the input record order. A class with fewer than ``k`` records
    raises unless ``allow_truncation`` is set, in which case it keeps them all.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if manifest.role is not Role.TRAIN:
        raise ValueError(f"few-shot sampling needs a train manifest, got {manifest.role.value}")
    rng = np.random.default_rng(seed)
    index_by_class: dict[int, list[int]] = {c: [] for c in range(manifest.dataset.n_classes)}
    for i, r in enumerate(manifest.records):
        index_by_class[r.class_index].append(i)
    keep: list[int] = []
    for c, idx in index_by_class.items():
        if len(idx) < k and not allow_truncation:
            raise InsufficientDataError(manifest.dataset.class_names[c], len(idx), k)
        take = min(k, len(idx))
        keep.extend(int(idx[j]) for j in rng.choice(len(idx), size=take, replace=False))
    keep.sort()
    return replace(manifest, records=tuple(manifest.records[i] for i in keep))


# ---------------------------------------------------------------------------
# persistence

_FIELDS = ("path", "class_index", "origin", "prompt", "template_id", "seed", "guidance_scale", "backend_id", "sha256")


def header_line(dataset: DatasetSpec, role: Role | str) -> str:
    return json.dumps({"schema": MANIFEST_SCHEMA, "role": Role(role).value, "dataset": dataset.to_dict()},
                      ensure_ascii=False)


def record_line(r: ImageRecord) -> str:
    p = r.provenance
    row = [r.path, r.class_index, r.origin.value,
           None if p is None else p.prompt,
           None if p is None else p.template_id,
           None if p is None else p.seed,
           None if p is None else p.guidance_scale,
           None if p is None else p.backend_id,
           None if p is None else p.sha256]
    return json.dumps(row, ensure_ascii=False)


def parse_record(row) -> ImageRecord:
    if not isinstance(row, list) or len(row) != len(_FIELDS):
        raise ValueError(f"expected {len(_FIELDS)} fields")
    path, ci, origin, prompt, tid, seed, gs, backend, sha = row
    if not isinstance(ci, int):
        raise ValueError("class_index must be an integer")
    prov = None
    if any(v is not None for v in (prompt, tid, seed, gs, backend, sha)):
        prov = Provenance(prompt, tid, seed, None if gs is None else float(gs), backend, sha)
    return ImageRecord(path, ci, Origin(origin), prov)


def persist_manifest(manifest: SplitManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(header_line(manifest.dataset, manifest.role) + "\n")
        for r in manifest.records:
            f.write(record_line(r) + "\n")
    tmp.replace(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_manifest(path, verify: bool = False, tolerate_truncated_tail: bool = False) -> SplitManifest:
    """Read a manifest file.

    ``tolerate_truncated_tail`` drops a final unterminated line (a writer killed
    mid-append) instead of failing; resume logic relies on it.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines and tolerate_truncated_tail:
        lines.pop()
    if not lines:
        raise ManifestParseError(path, 1, "missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestParseError(path, 1, f"bad header: {e}") from None
    if not isinstance(header, dict) or header.get("schema") != MANIFEST_SCHEMA:
        raise ManifestParseError(path, 1, f"expected schema {MANIFEST_SCHEMA}")
    try:
        dataset = DatasetSpec.from_dict(header["dataset"])
        role = Role(header["role"])
    except (KeyError, ValueError, TypeError) as e:
        raise ManifestParseError(path, 1, f"bad header: {e}") from None
    records = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            records.append(parse_record(json.loads(line)))
        except (json.JSONDecodeError, ValueError, TypeError) as e:
            raise ManifestParseError(path, i, str(e)) from None
    try:
        m = SplitManifest(dataset, tuple(records), role, root=path.parent)
    except ValueError as e:
        raise ManifestParseError(path, 0, str(e)) from None
    if verify:
        verify_manifest(m)
    return m


def verify_manifest(manifest: SplitManifest) -> None:
    bad = []
    for r in manifest.records:
        if r.provenance is None:
            continue
        if sha256_file(manifest.resolve(r)) != r.provenance.sha256:
            bad.append(r.path)
    if bad:
        raise IntegrityError(f"{len(bad)} image(s) do not match their recorded hash: {bad[:5]}")
