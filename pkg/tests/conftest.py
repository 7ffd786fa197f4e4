import os

import pytest
from hypothesis import HealthCheck, settings

from bridged.core import DatasetSpec, ImageRecord, Metric, Origin, Provenance, Role, SplitManifest

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_manifest(n_classes=3, per_class=10, role=Role.TRAIN, name="fixture", synthetic=False):
    ds = DatasetSpec(name, tuple(f"class{c}" for c in range(n_classes)), metric=Metric.TOP1)
    recs = []
    for c in range(n_classes):
        for i in range(per_class):
            if synthetic:
                prov = Provenance(f"a photo of a class{c}.", 1, c * 1000 + i, 3.5, "stub-v1", "0" * 64)
                recs.append(ImageRecord(f"{c}/{i:06d}.png", c, Origin.SYNTHETIC, prov))
            else:
                recs.append(ImageRecord(f"{c}/{i:06d}.png", c))
    return SplitManifest(ds, tuple(recs), role)


@pytest.fixture
def manifest_factory():
    return make_manifest


@pytest.fixture(scope="session")
def toy_task(tmp_path_factory):
    from bridged.toy import build_toy_task

    root = tmp_path_factory.mktemp("toy")
    return build_toy_task(root, n_classes=4, real_per_class=6, test_per_class=8, synthetic_per_class=12, size=16)


# acceptance criteria register their outcome here; printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}: {text}")
