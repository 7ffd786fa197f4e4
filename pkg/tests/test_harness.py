import csv
import json

import pytest
from hypothesis import given, strategies as st

from bridged.core import persist_manifest
from bridged.harness import (GUIDANCE_AXIS, SHOTS_AXIS, VOLUME_AXIS, ConfigFileError, ReportError, RunRecord,
                             SweepSpec, aggregate, config_hash, emit_radar, emit_report, interpolate, read_records,
                             run_sweep)
from conftest import make_manifest


def fake_runner(task):
    """Deterministic stand-in for training: accuracy is a function of the coordinates and seed."""
    k = task.coords.get("shots", 1)
    return {"final_accuracy": 0.5 + 0.01 * k + 0.001 * task.seed, "metric": "top1", "dataset": "fixture",
            "pipeline": "vanilla", "arch": task.coords.get("architecture", "tinycnn")}


def failing_runner(task):
    if task.coords == {"shots": 2, "architecture": "resnet18"} and task.seed == 1:
        raise RuntimeError("simulated crash")
    return fake_runner(task)


@pytest.fixture
def spec(tmp_path):
    persist_manifest(make_manifest(3, 20), tmp_path / "train.jsonl")
    persist_manifest(make_manifest(3, 5), tmp_path / "val.jsonl")
    return SweepSpec.from_dict({
        "name": "fixture",
        "base": {"pipeline": "vanilla", "real_manifest": "train.jsonl", "eval_manifest": "val.jsonl",
                 "arch": "tinycnn", "image_size": 16},
        "axes": {"k": [1, 2, 4], "arch": ["tinycnn", "resnet18"]},
        "seeds": [0, 1, 2],
    }, tmp_path)


def test_interpolation():
    env = {"DATA": "/data", "WORKERS": "4"}
    out = interpolate({"a": "${DATA}/pets", "b": "${WORKERS}", "c": ["${MISSING:-x}", "${MISSING:-7}"],
                       "d": 3}, env)
    assert out == {"a": "/data/pets", "b": 4, "c": ["x", 7], "d": 3}
    with pytest.raises(ConfigFileError):
        interpolate("${MISSING}", env)


def test_spec_validation(spec):
    assert len(spec) == 18 and len(spec.cells()) == 6
    d = SweepSpec(spec.base, {"volume": "default", "gs": "default", "k": "default"})
    assert d.axes == {"images_per_class": VOLUME_AXIS, "guidance_scale": GUIDANCE_AXIS, "shots": SHOTS_AXIS}
    assert VOLUME_AXIS == (500, 1000, 1500, 2000, 2500, 3000)
    assert GUIDANCE_AXIS == (2.0, 3.5, 5.0, 6.5, 8.0) and SHOTS_AXIS == (1, 2, 4, 8, 16)
    with pytest.raises(ConfigFileError):
        SweepSpec(spec.base, {"epochs": [1, 2]})
    with pytest.raises(ConfigFileError):
        SweepSpec(spec.base, {"k": [1, 1]})
    with pytest.raises(ConfigFileError):
        SweepSpec.from_dict({"base": {"pipeline": "vanilla", "real_manifest": "x", "bogus": 1}})


def test_sweep_records_and_resume(spec, tmp_path):
    store = tmp_path / "store"
    res = run_sweep(spec, store, runner=fake_runner)
    assert res.ok and res.executed == 18 and len(res.records) == 18
    assert len({r.key for r in res.records}) == 18
    before = (store / "records.jsonl").read_bytes()
    again = run_sweep(spec, store, runner=fake_runner)
    assert again.executed == 0 and len(again.records) == 18
    assert (store / "records.jsonl").read_bytes() == before


def test_torn_record_is_rerun(spec, tmp_path):
    store = tmp_path / "store"
    run_sweep(spec, store, runner=fake_runner)
    path = store / "records.jsonl"
    path.write_bytes(path.read_bytes()[:-30])
    assert len(read_records(path)) == 17
    res = run_sweep(spec, store, runner=fake_runner)
    assert res.executed == 1 and len(read_records(path)) == 18


def test_failure_is_isolated(spec, tmp_path):
    store = tmp_path / "store"
    res = run_sweep(spec, store, runner=failing_runner)
    assert not res.ok and len(res.records) == 17 and len(res.failures) == 1
    fail = json.loads((store / "failures.jsonl").read_text())
    assert fail["seed"] == 1 and fail["coords"]["shots"] == 2 and "simulated crash" in fail["error"]
    assert "1 failed" in (store / "summary.txt").read_text()
    assert run_sweep(spec, store, runner=fake_runner).executed == 1


def test_parallel_matches_serial(spec, tmp_path):
    a = run_sweep(spec, tmp_path / "a", runner=fake_runner)
    b = run_sweep(spec, tmp_path / "b", runner=fake_runner, workers=2)
    strip = lambda rs: [(r.key, r.final_accuracy) for r in rs]
    assert strip(a.records) == strip(b.records)


def test_config_hash_stable(spec):
    h = config_hash(spec.base, {"shots": 1})
    assert h == config_hash(spec.base, {"shots": 1}) and h != config_hash(spec.base, {"shots": 2})


def _records(accs, dataset="pets", pipeline="vanilla", metric="mean_per_class", h="h0"):
    return [RunRecord(h, {}, s, a, metric, "", 0.0, dataset, pipeline, "resnet18") for s, a in enumerate(accs)]


def test_aggregate_format():
    rows, cols, cells = aggregate(_records([0.852, 0.852, 0.852]))
    assert cells[("vanilla", "pets")].render() == "85.2±0.0"
    _, _, cells = aggregate(_records([0.80, 0.85, 0.90]))
    c = cells[("vanilla", "pets")]
    assert c.render() == "85.0±4.1" and c.n == 3


def test_aggregate_guards(tmp_path):
    with pytest.raises(ReportError):
        aggregate(_records([0.1]) + _records([0.2], h="h1"))
    with pytest.raises(ReportError):
        aggregate(_records([0.1, 0.2]) + _records([0.3]))
    mixed_metric = _records([0.5], pipeline="vanilla") + _records([0.6], pipeline="mixed", metric="top1", h="h1")
    with pytest.raises(ReportError):
        emit_report(mixed_metric, "table", tmp_path)


@given(accs=st.lists(st.floats(0, 1), min_size=1, max_size=5))
def test_aggregate_bounds(accs):
    c = aggregate(_records(accs))[2][("vanilla", "pets")]
    assert min(accs) * 100 - 1e-9 <= c.mean <= max(accs) * 100 + 1e-9 and c.std >= 0


def test_table_reemission_bit_identical(spec, tmp_path):
    store = tmp_path / "store"
    recs = run_sweep(spec, store, runner=fake_runner).records
    a = emit_report(recs, "table", tmp_path / "a", rows="shots", cols="architecture")
    b = emit_report(list(reversed(read_records(store / "records.jsonl"))), "table", tmp_path / "b",
                    rows="shots", cols="architecture")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    md = (tmp_path / "a" / "table.md").read_text()
    assert "±" in md and "population std" in md
    rows = list(csv.reader(open(tmp_path / "a" / "table.csv")))
    assert rows[0][0] == "shots"


def _plot_records(kind):
    if kind == "line":
        # one dataset, accuracy against shots for two pipelines
        grid = [("pets", p, k) for p in ("vanilla", "bridged_pp") for k in (1, 4, 16)]
    else:
        grid = [(d, p, 4) for d in ("pets", "cars", "dtd") for p in ("vanilla", "bridged_pp")]
    return [RunRecord(f"{d}-{p}-{k}", {"shots": k}, s, 0.5 + 0.01 * k + (0.1 if p == "bridged_pp" else 0) + 0.001 * s,
                      "top1", "", 0.0, d, p, "resnet18") for d, p, k in grid for s in range(3)]


@pytest.mark.parametrize("kind", ["line", "bar", "radar"])
def test_plot_reemission_bit_identical(kind, tmp_path):
    recs = _plot_records(kind)
    kw = {"axis": "shots"} if kind == "line" else {}
    a = emit_report(recs, kind, tmp_path / "a", **kw)
    b = emit_report(recs[::-1], kind, tmp_path / "b", **kw)
    assert {p.suffix for p in a} >= {".svg", ".png"}
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_radar_layout(tmp_path):
    recs = [RunRecord(f"{d}{p}", {}, 0, 0.5, "top1", "", 0.0, f"d{d}", p, "resnet18")
            for d in range(10) for p in ("vanilla", "bridged_pp")]
    _, layout = emit_radar(recs, tmp_path)
    assert len(layout.spokes) == 10 and len(layout.polygons) == 2
    with pytest.raises(ReportError):
        emit_radar(recs[:4], tmp_path)


def test_contact_sheet(tmp_path, toy_task):
    paths = emit_report([], "contact_sheet", tmp_path, manifests={"real": toy_task.real_train,
                                                                   "template": toy_task.synthetic})
    assert paths[0].name == "contact_sheet.png" and paths[0].stat().st_size > 0
