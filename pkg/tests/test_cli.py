import csv
import json
import subprocess
import sys

import pytest
import yaml

from bridged.core import load_manifest
from bridged.dsi import load_token
from bridged.harness.cli import EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, main


@pytest.fixture
def paths(toy_task):
    real = toy_task.real_train.root
    return {"train": str(real / "train.jsonl"), "val": str(real / "val.jsonl"),
            "syn": str(toy_task.synthetic.root / "manifest.jsonl")}


def _train(paths, out, *extra):
    return main(["train", "--real-manifest", paths["train"], "--eval-manifest", paths["val"], "--arch", "tinycnn",
                 "--image-size", "16", "--epochs", "2", "--augment", "none", "--batch-size", "16",
                 "--out", str(out), *extra])


def test_generate(tmp_path):
    assert main(["generate", "--dataset", "toy:3", "--per-class", "4", "--resolution", "16",
                 "--out", str(tmp_path)]) == EXIT_OK
    m = load_manifest(tmp_path / "manifest.jsonl", verify=True)
    assert len(m) == 12 and m.dataset.name == "toy"


def test_usage_errors(tmp_path, capsys):
    assert main(["generate", "--dataset", "nope", "--per-class", "1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "nope" in capsys.readouterr().err
    assert main(["generate", "--dataset", "toy", "--per-class", "1", "--prompt-mode", "dsi",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--pipeline", "vanilla", "--real-manifest", str(tmp_path / "missing.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["train", "--pipeline", "sideways"])
    assert e.value.code == EXIT_USAGE


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "bridged.harness.cli", "report", "--kind", "table",
                        "--store", str(tmp_path), "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE and "no records" in r.stderr


def test_train_pipelines(paths, tmp_path):
    assert _train(paths, tmp_path / "v", "--pipeline", "vanilla") == EXIT_OK
    final = json.loads((tmp_path / "v" / "final_metrics.json").read_text())
    assert final["kind"] == "vanilla" and 0 <= final["final_accuracy"] <= 1
    assert _train(paths, tmp_path / "pp", "--pipeline", "bridged++", "--synthetic-manifest", paths["syn"],
                  "--seeds", "0,1", "--lr-grid", "0.05,0.01") == EXIT_OK
    for s in (0, 1):
        stages = json.loads((tmp_path / "pp" / f"seed_{s}" / "final_metrics.json").read_text())["stages"]
        assert [x["name"] for x in stages] == ["stage1", "stage2"]
    assert _train(paths, tmp_path / "b", "--pipeline", "bridged", "--synthetic-manifest", paths["syn"],
                  "--stage1-mixup", "0.2", "--fc-reinit", "--lr-grid", "0.05,0.01",
                  "--lr-selection", "holdout") == EXIT_OK
    cfg = json.loads((tmp_path / "b" / "config.json").read_text())
    assert cfg["stage1"]["mixup"] == {"alpha": 0.2} and cfg["stage2"]["fc_reinit_before"]
    assert _train(paths, tmp_path / "m", "--pipeline", "mixed") == EXIT_USAGE


def test_leep_comparison(paths, tmp_path):
    assert _train(paths, tmp_path / "run", "--pipeline", "vanilla") == EXIT_OK
    table = tmp_path / "leep.csv"
    assert main(["leep", "--model-run", str(tmp_path / "run"), "--model-run", "arch:tinycnn",
                 "--dataset", paths["train"], "--image-size", "16", "--table", str(table)]) == EXIT_OK
    rows = list(csv.reader(open(table)))
    assert rows[0][0] == "model" and len(rows) == 4
    assert all(float(r[1]) <= 0 for r in rows[1:3])


def test_dsi(paths, tmp_path):
    out = tmp_path / "tok.bt"
    assert main(["dsi", "--manifest", paths["train"], "--iterations", "30", "--denoiser-steps", "20",
                 "--size", "16", "--out", str(out)]) == EXIT_OK
    tok = load_token(out)
    assert tok.trained_iterations == 30 and tok.dataset == "toy"
    assert main(["generate", "--dataset", "toy:4", "--per-class", "2", "--resolution", "16", "--prompt-mode", "dsi",
                 "--token", str(out), "--out", str(tmp_path / "gen")]) == EXIT_OK
    rec = load_manifest(tmp_path / "gen" / "manifest.jsonl").records[0]
    assert rec.provenance.prompt.endswith(f"in the style of {tok.name}") and rec.provenance.template_id is None


def test_sweep_and_report(paths, tmp_path):
    cfg = {"name": "cli", "base": {"pipeline": "vanilla", "real_manifest": paths["train"],
                                   "eval_manifest": paths["val"], "arch": "tinycnn", "image_size": 16,
                                   "stage": {"epochs": 1, "batch_size": 16, "augment": "none"}, "lr_grid": [0.05]},
           "axes": {"arch": ["tinycnn", "not-a-backbone"]}, "seeds": [0, 1]}
    path = tmp_path / "sweep.yaml"
    path.write_text(yaml.safe_dump(cfg))
    store = tmp_path / "store"
    assert main(["sweep", "--config", str(path), "--dry-run", "--store", str(store)]) == EXIT_OK
    assert main(["sweep", "--config", str(path), "--store", str(store)]) == EXIT_PARTIAL
    assert len((store / "records.jsonl").read_text().splitlines()) == 2
    assert len((store / "failures.jsonl").read_text().splitlines()) == 2
    out = tmp_path / "report"
    assert main(["report", "--kind", "table", "--store", str(store), "--rows", "pipeline", "--cols", "arch",
                 "--where", "arch=tinycnn", "--out", str(out)]) == EXIT_OK
    assert "±" in (out / "table.md").read_text()
    assert main(["report", "--kind", "contact_sheet", "--manifest", f"real={paths['train']}",
                 "--manifest", f"synthetic={paths['syn']}", "--out", str(out)]) == EXIT_OK
    assert (out / "contact_sheet.png").exists()
