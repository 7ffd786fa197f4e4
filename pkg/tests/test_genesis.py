import hashlib
import http.server
import io
import json
import os
import signal
import subprocess
import sys
import threading
import time
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from PIL import Image

from bridged.core import DatasetSpec, load_manifest
from bridged.diffusion import ToyDenoiser
from bridged.genesis import (GenerationError, GuidanceConfig, RemoteBackend, ScorePair, StubBackend,
                             ToyDiffusionBackend, combine_guidance, ddpm_sample, generate_images, image_seed,
                             make_backend, render_procedural, respaced_schedule)
from bridged.toy import toy_dataset


def _pair(seed, shape=(2, 3, 4, 4)):
    g = torch.Generator().manual_seed(seed)
    return ScorePair(torch.randn(shape, generator=g), torch.randn(shape, generator=g))


@given(seed=st.integers(0, 2**31 - 1))
def test_guidance_endpoints_bitwise(seed):
    p = _pair(seed)
    assert torch.equal(combine_guidance(p, 1.0), p.conditional)
    assert torch.equal(combine_guidance(p, 0.0), p.unconditional)


@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-10, 10), w=st.floats(0, 10))
def test_guidance_linearity(seed, a, w):
    p = _pair(seed)
    p64 = ScorePair(p.conditional.double(), p.unconditional.double())
    scaled = ScorePair(a * p64.conditional, a * p64.unconditional)
    assert torch.allclose(combine_guidance(scaled, w), a * combine_guidance(p64, w), rtol=1e-12, atol=1e-12)


def test_guidance_scalar_and_numpy():
    out = combine_guidance(ScorePair(np.array([1.0]), np.array([0.0])), 3.5)
    assert out.tolist() == [3.5]
    with pytest.raises(ValueError):
        ScorePair(torch.zeros(2, 3), torch.zeros(3, 2))
    with pytest.raises(ValueError):
        combine_guidance(ScorePair(np.zeros(1), np.zeros(1)), float("nan"))
    with pytest.raises(ValueError):
        GuidanceConfig(w=0)
    with pytest.raises(ValueError):
        GuidanceConfig(sampler="ddim")


def test_stub_determinism_and_label():
    b = StubBackend(["cat", "wild cat"])
    g = GuidanceConfig(resolution=16)
    assert b.generate("a photo of a wild cat.", g, 5) == b.generate("a photo of a wild cat.", g, 5)
    assert b.generate("a photo of a wild cat.", g, 5) != b.generate("a photo of a wild cat.", g, 6)
    assert b._class_of("a photo of a wild cat.") == (1, 2)
    img = Image.open(io.BytesIO(b.generate("a photo of a cat.", g, 1)))
    assert img.size == (16, 16)


def test_procedural_domains_differ():
    real = render_procedural(2, 6, 16, 3, "real").astype(float)
    syn = render_procedural(2, 6, 16, 3, "synthetic").astype(float)
    assert real.shape == syn.shape == (16, 16, 3)
    assert np.abs(real - syn).mean() > 1.0


def test_generate_counts_and_provenance(tmp_path):
    ds = DatasetSpec("ten", tuple(f"c{i}" for i in range(10)))
    m = generate_images(ds, 1000, StubBackend(ds.class_names), GuidanceConfig(resolution=8), tmp_path)
    assert len(m) == 10_000
    assert Counter(m.labels().tolist()) == {c: 1000 for c in range(10)}
    back = load_manifest(tmp_path / "manifest.jsonl")
    assert back == m
    r = back.records[1234]
    assert r.provenance.seed == image_seed(0, r.class_index, int(r.path[-10:-4]))
    assert r.provenance.guidance_scale == 3.5 and r.provenance.backend_id == "stub-v1"
    assert hashlib.sha256((tmp_path / r.path).read_bytes()).hexdigest() == r.provenance.sha256
    assert ds.class_names[r.class_index] in r.provenance.prompt


def test_resume_is_idempotent(tmp_path):
    ds = toy_dataset(3)
    b = StubBackend(ds.class_names)
    g = GuidanceConfig(resolution=8)
    full = generate_images(ds, 6, b, g, tmp_path / "a")
    generate_images(ds, 2, b, g, tmp_path / "b")
    again = generate_images(ds, 6, b, g, tmp_path / "b")
    assert sorted(r.path for r in again.records) == sorted(r.path for r in full.records)
    assert {r.provenance.sha256 for r in again.records} == {r.provenance.sha256 for r in full.records}
    assert len(generate_images(ds, 6, b, g, tmp_path / "b")) == 18


def test_resume_after_sigkill(tmp_path):
    out = tmp_path / "gen"
    cmd = [sys.executable, "-m", "bridged.harness.cli", "generate", "--dataset", "toy:4", "--per-class", "400",
           "--resolution", "96", "--out", str(out)]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    log = out / "manifest.jsonl"
    deadline = time.time() + 60
    while time.time() < deadline:
        if log.exists() and log.read_text().count("\n") > 30:
            break
        time.sleep(0.05)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    partial = log.read_text().count("\n") - 1
    assert 0 < partial < 1600, "job finished before it could be interrupted"
    assert subprocess.run(cmd, capture_output=True).returncode == 0
    m = load_manifest(log, verify=True)
    keys = [(r.class_index, r.path) for r in m.records]
    assert len(keys) == len(set(keys)) == 1600
    assert Counter(m.labels().tolist()) == {c: 400 for c in range(4)}


def test_failures_are_reported(tmp_path):
    class Flaky(StubBackend):
        def generate(self, prompt, guidance, seed, style=None):
            if "braided" in prompt:
                raise RuntimeError("boom")
            return super().generate(prompt, guidance, seed, style)

    ds = toy_dataset(3)
    with pytest.raises(GenerationError) as e:
        generate_images(ds, 2, Flaky(ds.class_names), GuidanceConfig(resolution=8), tmp_path, retries=1)
    assert sorted(e.value.failed_keys) == [(1, 0), (1, 1)]
    assert len(load_manifest(tmp_path / "manifest.jsonl")) == 4


def test_dsi_mode_needs_token(tmp_path):
    ds = toy_dataset(2)
    with pytest.raises(ValueError):
        generate_images(ds, 1, StubBackend(), GuidanceConfig(resolution=8), tmp_path, prompt_mode="dsi")


class _Handler(http.server.BaseHTTPRequestHandler):
    bodies = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.bodies.append((body, self.headers.get("Authorization")))
        data = StubBackend().generate(body["prompt"], GuidanceConfig(w=body["guidance_scale"],
                                                                     resolution=body["width"]), body["seed"])
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *a):
        pass


def test_remote_backend_roundtrip(tmp_path, monkeypatch):
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        monkeypatch.setenv("BT_BACKEND_TOKEN", "secret")
        url = f"http://127.0.0.1:{server.server_port}/generate"
        b = make_backend(url)
        assert isinstance(b, RemoteBackend)
        ds = toy_dataset(2)
        m = generate_images(ds, 2, b, GuidanceConfig(w=5.0, resolution=12), tmp_path)
        assert len(m) == 4 and m.records[0].provenance.backend_id == f"remote:{url}"
        body, auth = _Handler.bodies[-1]
        assert auth == "Bearer secret"
        assert body["guidance_scale"] == 5.0 and body["width"] == body["height"] == 12
    finally:
        server.shutdown()


def test_respaced_schedule_and_ddpm():
    d = ToyDenoiser(latent_hw=4, seed=0)
    ts, ab, ab_prev, betas = respaced_schedule(d.alphas_cumprod, 50)
    assert len(ts) == 50 and ts[0] == 0 and ts[-1] == 999
    assert torch.all(betas > 0) and torch.all(betas < 1)
    cond = d.embed_prompt("a photo of a cat.")
    uncond = d.embed_prompt("")
    g = GuidanceConfig(resolution=8)
    a = ddpm_sample(d, cond, uncond, g, 3, (1, 3, 4, 4))
    assert torch.equal(a, ddpm_sample(d, cond, uncond, g, 3, (1, 3, 4, 4)))
    assert torch.isfinite(a).all()
    png = ToyDiffusionBackend(d).generate("a photo of a cat.", g, 1)
    assert Image.open(io.BytesIO(png)).size == (8, 8)
