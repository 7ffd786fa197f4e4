"""Prompt template bank and prompt rendering."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

PLACEHOLDER = "{C}"
DEFAULT_TOKEN = "S*"


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    pattern: str

    def __post_init__(self):
        if self.pattern.count(PLACEHOLDER) != 1:
            raise PromptError(f"template {self.id} must contain {PLACEHOLDER} exactly once: {self.pattern!r}")


@dataclass(frozen=True)
class StylePrompt:
    class_name: str
    token_name: str = DEFAULT_TOKEN

    def render(self) -> str:
        return render_style_prompt(self.class_name, self.token_name)


def parse_bank(text: str) -> tuple[PromptTemplate, ...]:
    bank = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            tid, pattern = line.split("\t", 1)
            bank.append(PromptTemplate(int(tid), pattern))
        except ValueError as e:
            raise PromptError(f"line {n}: {e}") from None
    ids = [t.id for t in bank]
    if sorted(ids) != list(range(1, len(bank) + 1)):
        raise PromptError("template ids must be 1..N without gaps")
    return tuple(sorted(bank, key=lambda t: t.id))


def load_bank(path: str | Path) -> tuple[PromptTemplate, ...]:
    return parse_bank(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_bank() -> tuple[PromptTemplate, ...]:
    text = resources.files("bridged.data").joinpath("imagenet_templates.tsv").read_text("utf-8")
    return parse_bank(text)


def get_template(template_id: int) -> PromptTemplate:
    bank = default_bank()
    if not 1 <= template_id <= len(bank):
        raise PromptError(f"no template {template_id}")
    return bank[template_id - 1]


def render_template(template: PromptTemplate | int, class_name: str) -> str:
    if isinstance(template, int):
        template = get_template(template)
    if not class_name:
        raise PromptError("class name must be non-empty")
    return template.pattern.replace(PLACEHOLDER, class_name)


def sample_prompt(class_name: str, rng_seed: int, bank: tuple[PromptTemplate, ...] | None = None) -> tuple[str, int]:
    """Pick a template uniformly at random (deterministic in ``rng_seed``)."""
    bank = bank or default_bank()
    if not class_name:
        raise PromptError("class name must be non-empty")
    idx = int(np.random.default_rng(rng_seed).integers(len(bank)))
    t = bank[idx]
    return render_template(t, class_name), t.id


def render_style_prompt(class_name: str, token_name: str = DEFAULT_TOKEN) -> str:
    if not class_name or not token_name:
        raise PromptError("class name and token name must be non-empty")
    return f"A {class_name} photo in the style of {token_name}"
