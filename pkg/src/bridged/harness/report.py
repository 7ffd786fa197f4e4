"""Tables, plots and contact sheets derived from persisted run records.

Every emitter is a pure function of its inputs: records are sorted before
aggregation, plots carry no timestamps and a fixed SVG hash salt, so emitting
twice from the same records gives byte-identical files.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..core import SplitManifest

KINDS = ("table", "line", "bar", "radar", "contact_sheet")

FOOTER = ("Cells are mean±std of final accuracy (%) over seeds; std is the population std (ddof=0), "
          "so a single seed shows ±0.0. Metric per column: {metrics}.")

PIPELINE_ORDER = ("vanilla", "mixed", "bridged", "bridged_pp")
PIPELINE_LABELS = {"bridged_pp": "bridged++"}
PIPELINE_COLORS = {"vanilla": "#d62728", "mixed": "#1f77b4", "bridged": "#ff7f0e", "bridged_pp": "#2ca02c"}


class ReportError(ValueError):
    pass


def _get(rec, name):
    if isinstance(rec, dict):
        return rec[name] if name in rec else rec.get("coords", {}).get(name)
    if hasattr(rec, name):
        return getattr(rec, name)
    return rec.coords.get(name)


def _sort_key(v):
    if isinstance(v, str) and v in PIPELINE_ORDER:
        return (0, PIPELINE_ORDER.index(v), "")
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return (1, float(v), "")
    return (2, 0.0, str(v))


def _label(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return PIPELINE_LABELS.get(v, str(v))


@dataclass(frozen=True)
class Cell:
    mean: float
    std: float
    n: int

    def render(self) -> str:
        return f"{self.mean:.1f}±{self.std:.1f}"


def aggregate(records: Iterable, rows: str = "pipeline", cols: str = "dataset") -> tuple[list, list, dict]:
    """Group final accuracies into a rows x cols grid of mean/std over seeds (in percent).

    Records that differ in anything but the seed must not land in one cell.
    """
    groups: dict[tuple, list] = {}
    for r in records:
        if _get(r, "final_accuracy") is None:
            continue
        groups.setdefault((_get(r, rows), _get(r, cols)), []).append(r)
    cells = {}
    for key, rs in groups.items():
        hashes = {_get(r, "config_hash") for r in rs}
        if len(hashes) > 1:
            raise ReportError(f"cell {key} mixes {len(hashes)} configurations; restrict the records first")
        seeds = [_get(r, "seed") for r in rs]
        if len(set(seeds)) != len(seeds):
            raise ReportError(f"cell {key} has duplicate seeds")
        acc = 100 * np.array([_get(r, "final_accuracy") for r in sorted(rs, key=lambda r: _get(r, "seed"))])
        cells[key] = Cell(float(acc.mean()), float(acc.std(ddof=0)), len(acc))
    row_keys = sorted({k[0] for k in cells}, key=_sort_key)
    col_keys = sorted({k[1] for k in cells}, key=_sort_key)
    return row_keys, col_keys, cells


def column_metrics(records: Iterable, cols: str = "dataset") -> dict:
    """Metric kind per column; a column mixing top-1 and mean-per-class is an error."""
    seen: dict = {}
    for r in records:
        c, m = _get(r, cols), _get(r, "metric")
        if seen.setdefault(c, m) != m:
            raise ReportError(f"column {c!r} mixes metrics {seen[c]!r} and {m!r}")
    return seen


def _write(path: Path, data: bytes | str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)
    return path


def emit_table(records, out, rows: str = "pipeline", cols: str = "dataset") -> list[Path]:
    records = list(records)
    if not records:
        raise ReportError("no records to tabulate")
    metrics = column_metrics(records, cols)
    row_keys, col_keys, cells = aggregate(records, rows, cols)
    out = Path(out)
    head = [rows] + [_label(c) for c in col_keys]
    md = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in row_keys:
        md.append("| " + " | ".join([_label(r)] + [cells[(r, c)].render() if (r, c) in cells else "-"
                                                    for c in col_keys]) + " |")
    md += ["", FOOTER.format(metrics=", ".join(f"{_label(c)}={metrics[c]}" for c in col_keys))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([rows, cols, "metric", "mean", "std", "n"])
    for r in row_keys:
        for c in col_keys:
            if (r, c) in cells:
                cell = cells[(r, c)]
                w.writerow([_label(r), _label(c), metrics[c], repr(cell.mean), repr(cell.std), cell.n])
    return [_write(out / "table.md", "\n".join(md) + "\n"), _write(out / "table.csv", buf.getvalue())]


# ---------------------------------------------------------------------------
# plots

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "bridged-report"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def _save(fig, out: Path, stem: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    svg, png = out / f"{stem}.svg", out / f"{stem}.png"
    fig.savefig(svg, format="svg", metadata={"Date": None, "Creator": None})
    fig.savefig(png, format="png", dpi=100, metadata={"Software": None})
    return [svg, png]


def _data_csv(out: Path, stem: str, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return _write(out / f"{stem}.csv", buf.getvalue())


def emit_line(records, out, axis: str, series: str = "pipeline") -> list[Path]:
    """Accuracy against one sweep axis, one curve per series value, std as error bars."""
    records = [r for r in records if _get(r, axis) is not None]
    if not records:
        raise ReportError(f"no records carry axis {axis!r}")
    column_metrics(records, series)
    s_keys, x_keys, cells = aggregate(records, series, axis)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = []
    for s in s_keys:
        xs = [x for x in x_keys if (s, x) in cells]
        ys = [cells[(s, x)].mean for x in xs]
        es = [cells[(s, x)].std for x in xs]
        ax.errorbar([float(x) for x in xs], ys, yerr=es, marker="o", capsize=3, label=_label(s),
                    color=PIPELINE_COLORS.get(s))
        rows += [[_label(s), _label(x), repr(cells[(s, x)].mean), repr(cells[(s, x)].std), cells[(s, x)].n] for x in xs]
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("accuracy (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    paths = _save(fig, Path(out), "line")
    plt.close(fig)
    return paths + [_data_csv(Path(out), "line", [series, axis, "mean", "std", "n"], rows)]


def emit_bar(records, out, groups: str = "dataset", bars: str = "pipeline") -> list[Path]:
    records = list(records)
    if not records:
        raise ReportError("no records to plot")
    column_metrics(records, groups)
    b_keys, g_keys, cells = aggregate(records, bars, groups)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(g_keys) + 2), 3.5))
    width = 0.8 / max(len(b_keys), 1)
    rows = []
    for i, b in enumerate(b_keys):
        xs = [j for j, g in enumerate(g_keys) if (b, g) in cells]
        ys = [cells[(b, g_keys[j])].mean for j in xs]
        es = [cells[(b, g_keys[j])].std for j in xs]
        ax.bar([j + (i - (len(b_keys) - 1) / 2) * width for j in xs], ys, width, yerr=es, capsize=2,
               label=_label(b), color=PIPELINE_COLORS.get(b))
        rows += [[_label(b), _label(g_keys[j]), repr(cells[(b, g_keys[j])].mean), repr(cells[(b, g_keys[j])].std),
                  cells[(b, g_keys[j])].n] for j in xs]
    ax.set_xticks(range(len(g_keys)), [_label(g) for g in g_keys])
    ax.set_ylabel("accuracy (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    paths = _save(fig, Path(out), "bar")
    plt.close(fig)
    return paths + [_data_csv(Path(out), "bar", [bars, groups, "mean", "std", "n"], rows)]


@dataclass(frozen=True)
class RadarLayout:
    spokes: tuple
    polygons: tuple


def emit_radar(records, out, spokes: str = "dataset", polygons: str = "pipeline") -> tuple[list[Path], RadarLayout]:
    """One spoke per dataset, one closed polygon per pipeline (accuracy radius)."""
    records = list(records)
    if not records:
        raise ReportError("no records to plot")
    column_metrics(records, spokes)
    p_keys, s_keys, cells = aggregate(records, polygons, spokes)
    if len(s_keys) < 3:
        raise ReportError("a radar needs at least three spokes")
    missing = [(p, s) for p in p_keys for s in s_keys if (p, s) not in cells]
    if missing:
        raise ReportError(f"radar polygons need every spoke; missing {missing[:3]}")
    plt = _pyplot()
    angles = [2 * math.pi * i / len(s_keys) for i in range(len(s_keys))]
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="polar")
    lo = min(c.mean for c in cells.values())
    rows = []
    for p in p_keys:
        vals = [cells[(p, s)].mean for s in s_keys]
        ax.plot(angles + angles[:1], vals + vals[:1], color=PIPELINE_COLORS.get(p), label=_label(p))
        ax.fill(angles + angles[:1], vals + vals[:1], color=PIPELINE_COLORS.get(p), alpha=0.15)
        rows += [[_label(p), _label(s), repr(cells[(p, s)].mean), repr(cells[(p, s)].std), cells[(p, s)].n]
                 for s in s_keys]
    ax.set_xticks(angles, [_label(s) for s in s_keys])
    ax.set_ylim(max(0.0, math.floor(lo / 10) * 10 - 10), 100)
    ax.legend(loc="lower right", bbox_to_anchor=(1.15, -0.05), frameon=False)
    fig.tight_layout()
    paths = _save(fig, Path(out), "radar")
    plt.close(fig)
    paths.append(_data_csv(Path(out), "radar", [polygons, spokes, "mean", "std", "n"], rows))
    return paths, RadarLayout(tuple(s_keys), tuple(p_keys))


def emit_contact_sheet(manifests: dict[str, SplitManifest], out, per_class: int = 4, max_classes: int = 8,
                       tile: int = 64) -> list[Path]:
    """Grid with one row per class and, per prompt mode, ``per_class`` tiles."""
    from PIL import Image, ImageDraw

    if not manifests:
        raise ReportError("contact sheet needs at least one manifest")
    labels = sorted(manifests)
    ds = manifests[labels[0]].dataset
    n_cls = min(ds.n_classes, max_classes)
    pad, text_h, name_w = 4, 14, 110
    width = name_w + len(labels) * (per_class * (tile + pad) + 2 * pad)
    height = text_h + n_cls * (tile + pad) + pad
    sheet = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(sheet)
    for j, lab in enumerate(labels):
        x0 = name_w + j * (per_class * (tile + pad) + 2 * pad)
        draw.text((x0, 1), lab, fill="black")
        groups = manifests[lab].by_class()
        for c in range(n_cls):
            for i, rec in enumerate(groups.get(c, [])[:per_class]):
                with Image.open(manifests[lab].resolve(rec)) as im:
                    img = im.convert("RGB").resize((tile, tile), Image.NEAREST)
                sheet.paste(img, (x0 + i * (tile + pad), text_h + c * (tile + pad)))
    for c in range(n_cls):
        draw.text((2, text_h + c * (tile + pad) + tile // 2 - 5), ds.class_names[c][:16], fill="black")
    buf = io.BytesIO()
    sheet.save(buf, format="PNG")
    return [_write(Path(out) / "contact_sheet.png", buf.getvalue())]


def emit_report(records: Sequence, kind: str, out, *, axis: str | None = None, rows: str = "pipeline",
                cols: str = "dataset", manifests: dict[str, SplitManifest] | None = None) -> list[Path]:
    """Dispatch to one emitter; returns the written paths."""
    if kind not in KINDS:
        raise ReportError(f"unknown report kind {kind!r}; expected one of {KINDS}")
    if kind == "contact_sheet":
        return emit_contact_sheet(manifests or {}, out)
    records = sorted(records, key=lambda r: (str(_get(r, "dataset")), str(_get(r, "pipeline")),
                                             str(_get(r, "config_hash")), _get(r, "seed")))
    if kind == "table":
        return emit_table(records, out, rows, cols)
    if kind == "line":
        if axis is None:
            raise ReportError("line plots need an axis")
        return emit_line(records, out, axis, rows)
    if kind == "bar":
        return emit_bar(records, out, cols, rows)
    return emit_radar(records, out, cols, rows)[0]
