"""Declarative experiment configs: YAML with ``${VAR}`` / ``${VAR:-default}`` interpolation."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigFileError(ValueError):
    pass


_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate(value, env=None):
    """Substitute environment variables in every string of a parsed YAML tree.

    A scalar that is exactly one placeholder is re-parsed as YAML so that
    ``workers: ${WORKERS:-2}`` yields an int. Unset variables without a
    default are an error.
    """
    env = os.environ if env is None else env
    if isinstance(value, dict):
        return {k: interpolate(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, env) for v in value]
    if not isinstance(value, str):
        return value

    def sub(m):
        name, default = m.group(1), m.group(2)
        if name in env:
            return env[name]
        if default is not None:
            return default
        raise ConfigFileError(f"environment variable {name} is not set")

    whole = _VAR.fullmatch(value)
    out = _VAR.sub(sub, value)
    if whole:
        return yaml.safe_load(out) if out.strip() else out
    return out


def load_yaml(path, env=None) -> dict:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")
    return interpolate(data, env)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigFileError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigFileError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigFileError(f"{where}: {e}") from None


@dataclass(frozen=True)
class ToyTaskConfig:
    n_classes: int = 6
    real_per_class: int = 10
    test_per_class: int = 40
    synthetic_per_class: int = 200
    size: int = 16
    seed: int = 0


@dataclass(frozen=True)
class GenerationConfig:
    backend: str = "stub"
    images_per_class: int = 1000
    guidance_scale: float = 3.5
    steps: int = 50
    resolution: int = 512
    prompt_mode: str = "template"
    token: str | None = None
    seed: int = 0
    workers: int = 1
    token_env: str = "BT_BACKEND_TOKEN"


@dataclass(frozen=True)
class CellTemplate:
    """Everything a sweep cell needs besides its axis coordinates and seed."""

    pipeline: str = "bridged++"
    dataset: str | None = None
    real_manifest: str | None = None
    eval_manifest: str | None = None
    synthetic_manifest: str | None = None
    generation: GenerationConfig | None = None
    toy: ToyTaskConfig | None = None
    arch: str = "resnet18"
    pretrained: bool = True
    image_size: int = 224
    stage: dict = field(default_factory=dict)
    stage1: dict | None = None
    lr_grid: tuple[float, ...] = (0.01,)
    lr_selection: str = "val"
    synthetic_fraction: float | None = None

    def __post_init__(self):
        if isinstance(self.generation, dict):
            object.__setattr__(self, "generation", _build(GenerationConfig, self.generation, "generation"))
        if isinstance(self.toy, dict):
            object.__setattr__(self, "toy", _build(ToyTaskConfig, self.toy, "toy"))
        object.__setattr__(self, "lr_grid", tuple(float(x) for x in self.lr_grid))
        if not self.lr_grid:
            raise ConfigFileError("lr_grid is empty")
        if self.toy is None and self.real_manifest is None:
            raise ConfigFileError("need real_manifest (or a toy task)")


def cell_template_from_dict(data: dict, base_dir: Path | None = None) -> CellTemplate:
    data = dict(data)
    if base_dir is not None:
        for key in ("real_manifest", "eval_manifest", "synthetic_manifest"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str((base_dir / data[key]).resolve())
        gen = data.get("generation")
        if isinstance(gen, dict) and gen.get("token") and not Path(gen["token"]).is_absolute():
            data["generation"] = {**gen, "token": str((base_dir / gen["token"]).resolve())}
    return _build(CellTemplate, data, "base")
