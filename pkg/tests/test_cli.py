import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import ortho_group

from csrkv.calib_io import read_capture
from csrkv.cli import main
from csrkv.codec import Dictionary
from csrkv.layer_merge import MergePlan
from csrkv.offline import OfflineDictionary


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def planted(tmp_path):
    path = tmp_path / "planted.csrc"
    assert run("synth", "--generator", "planted", "--layers", 3, "--heads", 2, "--head-dim", 16,
               "--tokens", 300, "--atoms", 24, "--sparsity", 2, "--noise", 0.01, "--out", path) == 0
    return path


def test_help_exits_zero():
    out = subprocess.run([sys.executable, "-m", "csrkv", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "merge-plan" in out.stdout
    for cmd in ("synth", "merge-plan", "train", "compress", "eval", "ablate"):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0


def test_synth_deterministic_and_echoes_config(tmp_path):
    a, b = tmp_path / "a.csrc", tmp_path / "b.csrc"
    assert run("synth", "--generator", "planted", "--seed", 7, "--out", a) == 0
    assert run("synth", "--generator", "planted", "--seed", 7, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    echo = json.loads((tmp_path / "synth.config.json").read_text())
    assert echo["seed"] == 7 and echo["generator"] == "planted"
    assert not list(tmp_path.glob(".*.tmp"))


def test_synth_invalid_spec(tmp_path, capsys):
    assert run("synth", "--layers", 0, "--out", tmp_path / "x.csrc") == 2
    assert "num_layers" in capsys.readouterr().err
    assert not (tmp_path / "x.csrc").exists()


def test_config_file_and_unknown_keys(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"layers": 2, "heads": 1, "tokens": 20, "seed": 3}))
    out = tmp_path / "c.csrc"
    assert run("synth", "--config", cfg, "--tokens", 10, "--out", out) == 0
    d = read_capture(out)
    assert d.header.num_layers == 2 and d.block(0, 0).count == 10
    cfg.write_text(json.dumps({"layers": 2, "typo": 1}))
    assert run("synth", "--config", cfg, "--out", out) == 2


def test_merge_plan_on_flat_drift(tmp_path):
    cap = tmp_path / "d.csrc"
    assert run("synth", "--generator", "drift", "--drift-rate", 0, "--layers", 4, "--heads", 2,
               "--tokens", 5000, "--head-dim", 16, "--out", cap) == 0
    plan_path = tmp_path / "plan.json"
    assert run("merge-plan", cap, "--out", plan_path) == 0
    plan = MergePlan.from_json(json.loads(plan_path.read_text()))
    plan.validate(4)
    assert plan.groups == ((0, 1, 2, 3),)
    assert run("merge-plan", cap, "--delta1", 0, "--out", plan_path) == 0
    assert MergePlan.from_json(json.loads(plan_path.read_text())).groups == ((0,), (1,), (2,), (3,))


def test_unreadable_capture(tmp_path):
    bad = tmp_path / "bad.csrc"
    bad.write_bytes(b"XXXXjunk")
    assert run("merge-plan", bad, "--out", tmp_path / "p.json") == 3
    assert run("merge-plan", tmp_path / "missing.csrc") == 3


def test_train_pipeline(planted, tmp_path):
    out1, out2 = tmp_path / "t1", tmp_path / "t2"
    args = ["train", planted, "--atoms", 24, "--s", 2, "--epochs", 3, "--lr", 0.02]
    assert run(*args, "--out-dir", out1) == 0
    assert run(*args, "--out-dir", out2, "--threads", 2) == 0
    assert (out1 / "dictionary.csrd").read_bytes() == (out2 / "dictionary.csrd").read_bytes()
    assert (out1 / "train_report.json").read_bytes() == (out2 / "train_report.json").read_bytes()
    report = json.loads((out1 / "train_report.json").read_text())
    assert all(r["train_mse"][-1] < r["initial_train_mse"] for r in report["reports"])
    assert (out1 / "train.config.json").exists()


def test_train_zero_epochs_is_kmeans_init(planted, tmp_path):
    assert run("train", planted, "--atoms", 8, "--s", 2, "--epochs", 0, "--out-dir", tmp_path) == 0
    off = OfflineDictionary.load(tmp_path / "dictionary.csrd")
    report = json.loads((tmp_path / "train_report.json").read_text())
    assert off.per_head_atoms == 8
    assert all(r["train_mse"] == [] for r in report["reports"])


def test_train_plan_mismatch(planted, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(MergePlan(((0, 1),)).dumps())
    assert run("train", planted, "--plan", plan, "--out-dir", tmp_path) == 4


@pytest.fixture
def trained(planted, tmp_path):
    out = tmp_path / "tr"
    assert run("train", planted, "--atoms", 24, "--s", 4, "--epochs", 1, "--out-dir", out) == 0
    return planted, out / "dictionary.csrd"


def test_compress_and_eval_snapshot(trained, tmp_path):
    cap, csrd = trained
    out = tmp_path / "cp"
    assert run("compress", cap, "--dict", csrd, "--s", 4, "--online-size", 16,
               "--prompt-tokens", 200, "--out-dir", out) == 0
    rep = json.loads((out / "memory_report.json").read_text())
    assert rep["schema_version"] == 1 and rep["bytes_online_dict"] == 6 * 8 * 16 * 2
    ev = tmp_path / "ev"
    assert run("eval", "--snapshot", out / "cache.csrs", "--dict", csrd, "--capture", cap, "--out-dir", ev) == 0
    report = json.loads((ev / "eval_report.json").read_text())
    assert len(report["lanes"]) == 6 and all(l["tokens"] == 300 for l in report["lanes"])
    assert all(0.0 <= l["mse"] for l in report["lanes"])


def test_compress_online_zero(trained, tmp_path):
    cap, csrd = trained
    assert run("compress", cap, "--dict", csrd, "--s", 2, "--online-size", 0, "--out-dir", tmp_path) == 0
    assert json.loads((tmp_path / "memory_report.json").read_text())["bytes_online_dict"] == 0


def test_compress_overflow(trained, tmp_path, capsys):
    cap, csrd = trained
    assert run("compress", cap, "--dict", csrd, "--online-size", 70000, "--out-dir", tmp_path) == 5
    assert "65535" in capsys.readouterr().err


def test_compress_csr8_reports_two_bits(tmp_path):
    cap = tmp_path / "c.csrc"
    assert run("synth", "--generator", "gmm", "--layers", 1, "--heads", 1, "--head-dim", 128,
               "--tokens", 40, "--out", cap) == 0
    assert run("compress", cap, "--s", 8, "--sn", 1, "--online-size", 512, "--outlier-threshold", 1.0,
               "--out-dir", tmp_path / "o") == 0
    rep = json.loads((tmp_path / "o" / "memory_report.json").read_text())
    assert rep["equivalent_bits_per_channel"] == 2.0


def test_eval_sweep_and_footprint(trained, tmp_path):
    cap, csrd = trained
    assert run("eval", "--capture", cap, "--dict", csrd, "--sweep-s", "1,2,4,8", "--attention",
               "--footprint", "0,512", "--out-dir", tmp_path) == 0
    with open(tmp_path / "sweep.csv") as fh:
        header = fh.readline().strip()
        rows = list(csv.DictReader(fh, fieldnames=header.split(",")))
    assert header == "s,s_n,mse,mean_cosine,outlier_fraction,attn_cosine,attn_max_abs"
    mse = [float(r["mse"]) for r in rows]
    assert all(b <= a + 1e-9 for a, b in zip(mse, mse[1:]))
    assert (tmp_path / "footprint.csv").read_text().splitlines()[0] == "seq_len,method,bytes"


def test_eval_lossless_config(tmp_path):
    cap = tmp_path / "c.csrc"
    assert run("synth", "--generator", "gmm", "--layers", 1, "--heads", 1, "--head-dim", 8,
               "--tokens", 64, "--out", cap) == 0
    Q = Dictionary(ortho_group.rvs(8, random_state=0))
    off = OfflineDictionary(kind="key", chunk_dim=8, s_n=1, per_head_atoms=8,
                            plan=MergePlan.singletons(1), num_heads=1, entries={(0, 0, 0): Q})
    off.save(tmp_path / "q.csrd")
    assert run("eval", "--capture", cap, "--dict", tmp_path / "q.csrd", "--sweep-s", 8, "--attention",
               "--out-dir", tmp_path / "e") == 0
    row = json.loads((tmp_path / "e" / "eval_report.json").read_text())["sweep"][0]
    assert row["mean_cosine"] == pytest.approx(1.0, abs=1e-4)
    assert row["attn_cosine"] == pytest.approx(1.0, abs=1e-4)


def test_eval_schema_mismatch(trained, tmp_path):
    cap, csrd = trained
    assert run("eval", "--snapshot", cap, "--out-dir", tmp_path) == 6
    assert run("eval", "--capture", cap, "--dict", cap, "--sweep-s", 2, "--out-dir", tmp_path) == 6


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("CSR_THREADS", "3")
    assert run("synth", "--layers", 1, "--tokens", 5, "--out", tmp_path / "x.csrc") == 0
    assert json.loads((tmp_path / "synth.config.json").read_text())["threads"] == 3
    monkeypatch.setenv("CSR_THREADS", "zero")
    assert run("synth", "--layers", 1, "--out", tmp_path / "x.csrc") == 2


def test_ablate_exit_zero_and_deterministic(tmp_path, capsys):
    assert run("ablate", "--seed", 0, "--out-dir", tmp_path / "a") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and all(l.startswith("PASS") for l in lines)
    assert run("ablate", "--seed", 0, "--out-dir", tmp_path / "b") == 0
    a = (tmp_path / "a" / "ablation_report.json").read_bytes()
    assert a == (tmp_path / "b" / "ablation_report.json").read_bytes()
    names = [r["name"] for r in json.loads(a)["ablations"]]
    assert names == ["dictionary_size", "chunking", "diversity_loss", "online_part"]
