import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bridged.core import (BENCHMARK_DATASETS, DatasetLookupError, DatasetSpec, ImageRecord, InsufficientDataError,
                          IntegrityError, ManifestParseError, Metric, Origin, Provenance, Role, SplitManifest,
                          load_manifest, persist_manifest, register_custom, register_dataset, sample_few_shot,
                          spec_from_class_names, verify_manifest)
from conftest import make_manifest

# class count, train/val sizes and metric per dataset, copied from the source table
TABLE = {
    "aircraft": (100, 6667, 3333, "mean_per_class"),
    "caltech101": (101, 3030, 5647, "mean_per_class"),
    "cars": (120, 8144, 8041, "top1"),
    "cub200": (200, 5994, 5794, "top1"),
    "dtd": (47, 3760, 1880, "top1"),
    "dogs": (120, 12000, 8580, "top1"),
    "flowers": (102, 2040, 6149, "mean_per_class"),
    "food": (101, 75750, 25250, "top1"),
    "pets": (37, 3680, 3669, "mean_per_class"),
    "sun397": (397, 19850, 19850, "top1"),
}


@pytest.mark.parametrize("name", sorted(TABLE))
def test_registry_matches_table(name):
    spec = register_dataset(name)
    n, tr, va, metric = TABLE[name]
    assert (spec.n_classes, spec.train_size, spec.val_size, spec.metric.value) == (n, tr, va, metric)
    assert len(set(spec.class_names)) == n


def test_registry_examples():
    pets = register_dataset("pets")
    assert pets.n_classes == 37 and (pets.train_size, pets.val_size) == (3680, 3669)
    assert pets.metric is Metric.MEAN_PER_CLASS
    assert "Abyssinian" in pets.class_names
    assert register_dataset("sun397").metric is Metric.TOP1
    assert register_dataset("Food-101").name == "food"
    assert set(BENCHMARK_DATASETS) == set(TABLE)
    with pytest.raises(DatasetLookupError):
        register_dataset("no-such-dataset")
    with pytest.raises(KeyError):
        register_dataset("no-such-dataset")


def test_custom_registration_verbatim():
    spec = DatasetSpec("my-set", ("b", "a"), 5, 2, Metric.TOP1)
    register_custom(spec)
    assert register_dataset("my-set") is spec


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec("x", ("a", "a"))
    with pytest.raises(ValueError):
        DatasetSpec("x", ())
    assert spec_from_class_names("x", ["b", "a"]).class_names == ("a", "b")
    spec = register_dataset("cars")
    assert spec.with_class_names([f"car{i}" for i in range(120)]).class_names[0] == "car0"
    with pytest.raises(ValueError):
        spec.with_class_names(["too", "few"])


def test_record_invariants():
    with pytest.raises(ValueError):
        ImageRecord("a.png", 0, Origin.SYNTHETIC)
    with pytest.raises(ValueError):
        ImageRecord("a.png", 0, Origin.SYNTHETIC, Provenance(None, 1, 1, 3.5, "stub", "00"))
    ImageRecord("a.png", 0, Origin.SYNTHETIC, Provenance("p", None, 1, 3.5, "stub", "00"))
    ds = DatasetSpec("x", ("a", "b"))
    with pytest.raises(ValueError):
        SplitManifest(ds, (ImageRecord("a.png", 2),))
    with pytest.raises(ValueError):
        SplitManifest(ds, (ImageRecord("a.png", 0), ImageRecord("a.png", 1)))


def test_few_shot_examples():
    m = make_manifest(3, 10)
    one = sample_few_shot(m, 1, seed=7)
    assert len(one) == 3 and sorted(r.class_index for r in one.records) == [0, 1, 2]
    assert sample_few_shot(m, 4, 3).records == sample_few_shot(m, 4, 3).records


def test_few_shot_pets_count():
    pets = register_dataset("pets")
    recs = tuple(ImageRecord(f"{c}/{i}.jpg", c) for c in range(37) for i in range(20))
    m = SplitManifest(pets, recs, Role.TRAIN)
    assert len(sample_few_shot(m, 16, 0)) == 37 * 16 == 592


def test_few_shot_errors():
    m = make_manifest(2, 3)
    with pytest.raises(InsufficientDataError) as e:
        sample_few_shot(m, 4, 0)
    assert e.value.class_name == "class0"
    assert len(sample_few_shot(m, 4, 0, allow_truncation=True)) == 6
    with pytest.raises(ValueError):
        sample_few_shot(make_manifest(2, 3, role=Role.VAL), 1, 0)


@given(k=st.sampled_from([1, 2, 4, 8, 16]), seed=st.integers(0, 2**32 - 1),
       n_classes=st.integers(1, 6), extra=st.integers(0, 5))
def test_few_shot_stratified_and_deterministic(k, seed, n_classes, extra):
    m = make_manifest(n_classes, 16 + extra)
    a = sample_few_shot(m, k, seed)
    counts = np.bincount(a.labels(), minlength=n_classes)
    assert (counts == k).all()
    assert a.records == sample_few_shot(m, k, seed).records
    assert set(a.records) <= set(m.records)


def _synthetic_manifest(n):
    ds = DatasetSpec("syn", ("zero", "one", "two"))
    recs = []
    for i in range(n):
        c = i % 3
        if i % 2:
            recs.append(ImageRecord(f"img/{i:06d}.png", c))
        else:
            tid = None if i % 4 == 0 else i % 27 + 1
            recs.append(ImageRecord(f"img/{i:06d}.png", c, Origin.SYNTHETIC,
                                    Provenance(f"a photo of a {ds.class_names[c]}, no. {i} é", tid, i * 7919,
                                               [2.0, 3.5, 6.5][c], "stub-v1", f"{i:064x}")))
    return SplitManifest(ds, tuple(recs), Role.SYNTHETIC)


def test_round_trip_10k(tmp_path):
    m = _synthetic_manifest(10_000)
    persist_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back == m
    assert back.records == m.records


def test_round_trip_empty(tmp_path):
    m = SplitManifest(DatasetSpec("e", ("a",)), (), Role.VAL)
    persist_manifest(m, tmp_path / "e.jsonl")
    back = load_manifest(tmp_path / "e.jsonl")
    assert len(back) == 0 and back.role is Role.VAL


def test_provenance_survives_on_disk(tmp_path):
    m = _synthetic_manifest(4)
    persist_manifest(m, tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["schema"] == "bt-manifest/1" and header["role"] == "synthetic"
    raw = json.loads(lines[1])
    r = m.records[0]
    assert raw == [r.path, r.class_index, "synthetic", r.provenance.prompt, r.provenance.template_id,
                   r.provenance.seed, r.provenance.guidance_scale, r.provenance.backend_id, r.provenance.sha256]
    assert json.loads(lines[2])[3:] == [None] * 6
    back = load_manifest(tmp_path / "m.jsonl").records[0].provenance
    assert (back.prompt, back.seed, back.guidance_scale) == (r.provenance.prompt, r.provenance.seed, 2.0)


def test_parse_errors_carry_line_numbers(tmp_path):
    m = _synthetic_manifest(5)
    p = tmp_path / "m.jsonl"
    persist_manifest(m, p)
    lines = p.read_text().splitlines()
    lines[3] = lines[3][:-5]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestParseError) as e:
        load_manifest(p)
    assert e.value.line_no == 4 and ":4:" in str(e.value)
    p.write_text('{"schema": "other"}\n')
    with pytest.raises(ManifestParseError) as e:
        load_manifest(p)
    assert e.value.line_no == 1


def test_truncated_tail(tmp_path):
    m = _synthetic_manifest(5)
    p = tmp_path / "m.jsonl"
    persist_manifest(m, p)
    text = p.read_text()
    p.write_text(text[:-20])
    with pytest.raises(ManifestParseError):
        load_manifest(p)
    assert len(load_manifest(p, tolerate_truncated_tail=True)) == 4


def test_verify_detects_tampering(tmp_path):
    from bridged.genesis import GuidanceConfig, StubBackend, generate_images

    ds = DatasetSpec("v", ("a", "b"))
    m = generate_images(ds, 2, StubBackend(ds.class_names), GuidanceConfig(resolution=16), tmp_path)
    verify_manifest(load_manifest(tmp_path / "manifest.jsonl", verify=True))
    victim = m.resolve(m.records[1])
    victim.write_bytes(victim.read_bytes() + b"x")
    with pytest.raises(IntegrityError):
        load_manifest(tmp_path / "manifest.jsonl", verify=True)


def test_union_resolves_roots(tmp_path):
    a = SplitManifest(DatasetSpec("u", ("a",)), (ImageRecord("x.png", 0),), root=tmp_path / "a")
    b = SplitManifest(DatasetSpec("u", ("a",)), (ImageRecord("x.png", 0),), root=tmp_path / "b")
    u = a.union(b)
    assert len(u) == 2 and all(r.path.startswith(str(tmp_path)) for r in u.records)
