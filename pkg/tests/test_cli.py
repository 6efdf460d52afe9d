import json
import logging
import math
import time

import numpy as np
import pytest

from aub.checkpoint import read_checkpoint
from aub.cli import main
from aub.data import load_csv, save_csv

GAUSS = """
seed = 0
[data]
generator = "gaussians"
n = 10000
means = [0.0, 4.0]
sds = [1.0, 1.0]
[model]
flow = { type = "affine" }
density = { type = "diag_gaussian" }
[train]
mode = "aub"
max_epochs = 200
batch_size = 500
lr_q = 1e-2
lr_t = 1e-2
"""

MOONS = """
seed = 0
[data]
generator = "moons"
n = 200
noise_sd = 0.05
[model]
flow = { type = "realnvp", n_layers = 2, hidden_dim = 8 }
density = { type = "%s" }
[train]
mode = "%s"
max_epochs = 3
batch_size = 64
"""


def cfg(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture
def run(capsys, caplog):
    caplog.set_level(logging.INFO, logger="aub")

    def invoke(*argv):
        caplog.clear()
        code = main(list(argv))
        return code, capsys.readouterr().out, caplog.text

    return invoke


def test_gen_data_moons(tmp_path, run):
    c = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"))
    code, _, _ = run("gen-data", "--config", c, "--out", str(tmp_path / "o"))
    assert code == 0
    for j in range(2):
        manifest = json.loads((tmp_path / "o" / "data" / f"domain_{j}" / "manifest.json").read_text())
        assert manifest["provenance"]["noise_sd"] == 0.05
        assert manifest["provenance"]["seed"] == 0
    first = (tmp_path / "o" / "data" / "domain_1" / "train.csv").read_bytes()
    run("gen-data", "--config", c, "--out", str(tmp_path / "o"))
    assert (tmp_path / "o" / "data" / "domain_1" / "train.csv").read_bytes() == first


def test_gen_data_eight_domains(tmp_path, run):
    c = cfg(tmp_path, """
[data]
generator = "tabular"
n_rows = 1000
split_features = [-1, -2, -3]
[model]
flow = { type = "realnvp", n_layers = 1, hidden_dim = 4 }
density = { type = "diag_gaussian" }
[train]
max_epochs = 1
""")
    assert run("gen-data", "--config", c, "--out", str(tmp_path / "o"))[0] == 0
    assert len(list((tmp_path / "o" / "data").glob("domain_*/manifest.json"))) == 8


def test_train_eval_translate_gaussians(tmp_path, run):
    c = cfg(tmp_path, GAUSS)
    out = str(tmp_path / "o")
    t0 = time.perf_counter()
    assert run("gen-data", "--config", c, "--out", out)[0] == 0
    code, stdout, _ = run("train", "--config", c, "--out", out)
    assert code == 0
    assert time.perf_counter() - t0 < 60
    best_val = float(stdout.strip().splitlines()[-1].split("=")[1])
    assert abs(best_val - 0.5 * math.log(2 * math.pi * math.e)) < 0.05
    for name in ("checkpoint_best.aub", "checkpoint_final.aub", "trace.jsonl"):
        assert (tmp_path / "o" / name).exists()

    code, stdout, _ = run("eval", "--config", c, "--out", out)
    assert code == 0
    last = stdout.strip().splitlines()[-1]
    assert last.startswith("test_aub=")
    assert math.isfinite(float(last.split("=", 1)[1]))
    report = (tmp_path / "o" / "report.json").read_bytes()
    run("eval", "--config", c, "--out", out)
    assert (tmp_path / "o" / "report.json").read_bytes() == report

    x = np.array([[0.0], [1.5], [-2.0]])
    save_csv(tmp_path / "in.csv", x)
    code, _, _ = run("translate", "--config", c, "--out", out, "--from", "0", "--to", "1",
                     "--input", str(tmp_path / "in.csv"))
    assert code == 0
    y = load_csv(tmp_path / "o" / "translated_0_to_1.csv")
    assert abs(y[0, 0] - 4.0) < 0.2
    run("translate", "--config", c, "--out", out, "--from", "1", "--to", "1", "--input", str(tmp_path / "in.csv"))
    assert np.max(np.abs(load_csv(tmp_path / "o" / "translated_1_to_1.csv") - x)) <= 1e-8


def test_translate_bad_index(tmp_path, run):
    c = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"))
    out = str(tmp_path / "o")
    run("gen-data", "--config", c, "--out", out)
    run("train", "--config", c, "--out", out)
    save_csv(tmp_path / "in.csv", np.zeros((2, 2)))
    code, _, err = run("translate", "--config", c, "--out", out, "--from", "0", "--to", "5",
                       "--input", str(tmp_path / "in.csv"))
    assert code != 0
    assert "domain indices" in err


def test_lrmf_three_domains_rejected_without_output(tmp_path, run):
    c = cfg(tmp_path, GAUSS.replace("[0.0, 4.0]", "[0.0, 4.0, 8.0]").replace("[1.0, 1.0]", "[1.0, 1.0, 1.0]")
            .replace('mode = "aub"', 'mode = "lrmf"'))
    code, _, err = run("train", "--config", c, "--out", str(tmp_path / "o"))
    assert code == 2
    assert "exactly 2 domains" in err
    assert not (tmp_path / "o").exists()


def test_alignflow_checkpoint_has_empty_density(tmp_path, run):
    c = cfg(tmp_path, MOONS % ("standard_normal", "alignflow_mle"))
    out = str(tmp_path / "o")
    run("gen-data", "--config", c, "--out", out)
    assert run("train", "--config", c, "--out", out)[0] == 0
    header, _ = read_checkpoint(tmp_path / "o" / "checkpoint_best.aub")
    assert [seg for seg in header["segments"] if seg[0].startswith("density")] == []


def test_train_without_bundle(tmp_path, run):
    c = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"))
    code, _, err = run("train", "--config", c, "--out", str(tmp_path / "o"))
    assert code == 1
    assert "gen-data" in err


def test_eval_fingerprint_mismatch(tmp_path, run):
    c = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"))
    out = str(tmp_path / "o")
    run("gen-data", "--config", c, "--out", out)
    run("train", "--config", c, "--out", out)
    c2 = cfg(tmp_path, (MOONS % ("diag_gaussian", "aub")).replace("max_epochs = 3", "max_epochs = 4"), "c2.toml")
    code, _, err = run("eval", "--config", c2, "--out", out)
    assert code == 1
    assert "fingerprint" in err


def test_bundle_from_other_data_rejected(tmp_path, run):
    c = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"))
    out = str(tmp_path / "o")
    run("gen-data", "--config", c, "--out", out)
    code, _, err = run("train", "--config", c, "--out", out, "--seed", "5")
    assert code == 1
    assert "different data section" in err


def test_runs_are_byte_reproducible(tmp_path, run):
    c = cfg(tmp_path, (MOONS % ("mog", "aub")).replace('"mog"', '"mog", n_components = 2'))
    blobs = {}
    for tag in ("a", "b"):
        out = str(tmp_path / tag)
        run("gen-data", "--config", c, "--out", out)
        run("train", "--config", c, "--out", out)
        run("eval", "--config", c, "--out", out)
        blobs[tag] = [(tmp_path / tag / n).read_bytes() for n in
                      ("checkpoint_best.aub", "checkpoint_final.aub", "report.json", "data/domain_0/train.csv")]
    assert blobs["a"] == blobs["b"]


def test_compare(tmp_path, run):
    paths = [cfg(tmp_path, MOONS % d, f"{d[1]}.toml") for d in
             [("diag_gaussian", "aub"), ("diag_gaussian", "lrmf"), ("standard_normal", "alignflow_mle")]]
    out = str(tmp_path / "cmp")
    code, stdout, _ = run("compare", "--config", *paths, "--out", out)
    assert code == 0
    rows = (tmp_path / "cmp" / "compare.csv").read_text().strip().splitlines()
    assert rows[0] == "name,mode,test_aub,params_flows,params_density,params_total,wall_time_s"
    assert [r.split(",")[1] for r in rows[1:]] == ["aub", "lrmf", "alignflow_mle"]
    assert (tmp_path / "cmp" / "compare.md").read_text().count("\n") == 5
    # second invocation reuses every cached run
    code, _, err = run("compare", "--config", *paths, "--out", out)
    assert err.count("cache hit") == 3
    assert (tmp_path / "cmp" / "compare.csv").read_text().strip().splitlines() == rows


def test_compare_single_config(tmp_path, run):
    p = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"))
    assert run("compare", "--config", p, "--out", str(tmp_path / "cmp"))[0] == 0
    assert len((tmp_path / "cmp" / "compare.csv").read_text().strip().splitlines()) == 2


def test_compare_mismatched_bundles(tmp_path, run):
    a = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"), "a.toml")
    b = cfg(tmp_path, (MOONS % ("diag_gaussian", "aub")).replace("n = 200", "n = 300"), "b.toml")
    code, _, err = run("compare", "--config", a, b, "--out", str(tmp_path / "cmp"))
    assert code == 1
    assert "same dataset" in err


def test_bad_worker_env(tmp_path, run, monkeypatch):
    monkeypatch.setenv("AUB_NUM_WORKERS", "many")
    p = cfg(tmp_path, MOONS % ("diag_gaussian", "aub"))
    assert run("compare", "--config", p, "--out", str(tmp_path / "cmp"))[0] == 2


def test_compare_parallel_workers(tmp_path, run, monkeypatch):
    monkeypatch.setenv("AUB_NUM_WORKERS", "2")
    paths = [cfg(tmp_path, MOONS % d, f"{d[1]}.toml") for d in [("diag_gaussian", "aub"), ("diag_gaussian", "lrmf")]]
    assert run("compare", "--config", *paths, "--out", str(tmp_path / "cmp"))[0] == 0
    assert len((tmp_path / "cmp" / "compare.csv").read_text().strip().splitlines()) == 3
