import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fedtar.artifacts import load_cohort, cohort_stats, read_metrics_csv, write_metrics_csv
from fedtar.cli import main
from fedtar.config import ConfigError, load_config, parse_config

TINY = """
[cohort]
clients = 2
time_steps = 3
patients_per_client = 6
samples_per_patient = 5
input_dim = 3
drift_kind = "rotation"
drift_magnitude = 0.2
final_jump = 0.5

[model]
e = 4
rank = 2
embed_dim = 2
hyper_hidden = 3

[gmm]
n_comp = 3

[train]
steps = 2

[meta]
embed_dim = 2
hidden = 2

[experiment]
rounds = 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


# ---- config ---------------------------------------------------------------

def test_missing_field_named(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(TINY.replace("input_dim = 3\n", ""))
    assert run("gen-data", "--config", p, "--out", tmp_path / "o") == 2
    assert "cohort.input_dim" in capsys.readouterr().err


def test_syntax_error_has_line(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(TINY.replace("rank = 2", "rank = = 2"))
    assert run("simulate", "--config", p, "--out", tmp_path / "o") == 2
    lineno = TINY.splitlines().index("rank = 2") + 1
    assert f"line {lineno}" in capsys.readouterr().err


@pytest.mark.parametrize("text,needle", [
    (TINY + "\n[extra]\n", "[extra]"),
    (TINY.replace("steps = 2", "steps = 2\nlearning = 3"), "train.learning"),
    (TINY.replace("steps = 2", 'steps = "two"'), "train.steps"),
    (TINY.replace("[model]\n", "[model]\nin_dim = 5\n"), "model.in_dim"),
    (TINY.replace('drift_kind = "rotation"', 'drift_kind = "spin"'), "drift_kind"),
])
def test_config_errors(text, needle):
    with pytest.raises(ConfigError, match=None) as info:
        parse_config(text.encode())
    assert needle in str(info.value)


def test_shipped_default_config_loads():
    cfg, raw = load_config(Path(__file__).parents[1] / "configs" / "default.toml")
    assert cfg.cohort.clients == 5 and cfg.cohort.time_steps == 5 and cfg.cohort.final_jump > 0


# ---- gen-data -------------------------------------------------------------

def test_gen_data_byte_identical_and_round_trip(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-data", "--config", cfg_path, "--out", a) == 0
    assert run("gen-data", "--config", cfg_path, "--out", b) == 0
    for name in ("demographics.csv", "samples.csv", "cohort.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    logged = json.loads((a / "cohort.json").read_text())["stats"]
    assert cohort_stats(load_cohort(a)) == logged
    man = json.loads((a / "manifest.json").read_text())
    import hashlib
    assert man["config_sha256"] == hashlib.sha256(cfg_path.read_bytes()).hexdigest()


def test_default_output_root_from_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDTAR_OUT", str(tmp_path / "envroot"))
    assert run("gen-data", "--config", cfg_path) == 0
    assert (tmp_path / "envroot" / "samples.csv").exists()


# ---- simulate / report / verify -------------------------------------------

@pytest.fixture
def two_runs(cfg_path, tmp_path):
    out = tmp_path / "runs"
    assert run("simulate", "--config", cfg_path, "--method", "fedavg_pooled", "--out", out) == 0
    assert run("simulate", "--config", cfg_path, "--method", "fedtar", "--out", out) == 0
    return out


def test_simulate_outputs(two_runs):
    for m in ("fedavg_pooled", "fedtar"):
        rows = read_metrics_csv(two_runs / f"metrics_{m}_s0.csv")
        summary = json.loads((two_runs / f"summary_{m}_s0.json").read_text())
        assert summary["final_val_loss"] == rows[-1]["val_loss"]
        man = json.loads((two_runs / f"manifest_{m}_s0.json").read_text())
        assert man["status"] == "ok" and man["partial"] is False
    pooled = read_metrics_csv(two_runs / "metrics_fedavg_pooled_s0.csv")
    assert all(r["alpha_t"] is None for r in pooled)


def test_simulate_flags_override(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run("simulate", "--config", cfg_path, "--method", "uniform_alpha", "--seed", 3, "--rounds", 1,
               "--mode", "paper_literal", "--hypergrad", "first_order", "--out", out) == 0
    man = json.loads((out / "manifest_uniform_alpha_s3.json").read_text())
    assert (man["seed"], man["rounds"], man["mode"], man["hypergrad"]) == (3, 1, "paper_literal", "first_order")
    assert max(r["round"] for r in read_metrics_csv(out / "metrics_uniform_alpha_s3.csv")) == 1


def test_simulate_replay_byte_identical(cfg_path, tmp_path):
    for d in ("x", "y"):
        assert run("simulate", "--config", cfg_path, "--out", tmp_path / d) == 0
    for name in ("metrics_fedtar_s0.csv", "audit_fedtar_s0.jsonl", "summary_fedtar_s0.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_numerical_failure_exit_and_partial(tmp_path):
    p = tmp_path / "nan.toml"
    p.write_text(TINY.replace("steps = 2", "steps = 3\nlr = 1e8").replace("rounds = 2", "rounds = 3"))
    with np.errstate(all="ignore"):
        code = run("simulate", "--config", p, "--method", "uniform_alpha", "--out", tmp_path / "o")
    assert code == 3
    man = json.loads((tmp_path / "o" / "manifest_uniform_alpha_s0.json").read_text())
    assert man["partial"] is True and man["status"] == "numerical_failure"
    assert not (tmp_path / "o" / "summary_uniform_alpha_s0.json").exists()


def test_verify_closed_loop_and_faults(two_runs, tmp_path, capsys):
    for m in ("fedavg_pooled", "fedtar"):
        assert run("verify", two_runs / f"audit_{m}_s0.jsonl") == 0
    lines = (two_runs / "audit_fedtar_s0.jsonl").read_text().splitlines()
    rec = json.loads(lines[1])
    rec["alpha_t"] = 1.2
    bad = tmp_path / "tampered.jsonl"
    bad.write_text("\n".join(lines[:1] + [json.dumps(rec)] + lines[2:]) + "\n")
    capsys.readouterr()
    assert run("verify", bad) == 4
    out = capsys.readouterr().out
    assert "line 2 (round 1, t=2) alpha_range" in out
    rec = json.loads(lines[3])
    rec["w"][2] += 1e-6
    bad.write_text("\n".join(lines[:3] + [json.dumps(rec)] + lines[4:]) + "\n")
    assert run("verify", bad) == 4
    assert "reconstruction" in capsys.readouterr().out
    bad.write_text("\n".join(lines[:2] + ["{not json"] + lines[3:]) + "\n")
    assert run("verify", bad) == 4
    assert "line 3" in capsys.readouterr().out
    assert run("verify", tmp_path / "missing.jsonl") == 2


def test_report_pipeline(two_runs, tmp_path, capsys):
    base = two_runs / "metrics_fedavg_pooled_s0.csv"
    cand = two_runs / "metrics_fedtar_s0.csv"
    assert run("report", "--baseline", base, "--candidate", cand, "--rows", "all", "--out", tmp_path / "rep") == 0
    rep = json.loads((tmp_path / "rep" / "report_fedavg_pooled_vs_fedtar.json").read_text())
    assert rep["metrics"]["val_loss"]["n"] == 6 and rep["replicates"] == 5000


def test_report_identical_and_offset(two_runs, tmp_path):
    path = two_runs / "metrics_fedtar_s0.csv"
    rows = read_metrics_csv(path)
    out = tmp_path / "rep"
    assert run("report", "--baseline", path, "--candidate", path, "--rows", "all", "--out", out) == 0
    r = json.loads((out / "report_fedtar_vs_fedtar.json").read_text())["metrics"]["val_loss"]
    assert r["mean_diff"] == 0.0 and not r["significant"]
    better = [dict(row, method="shifted", val_loss=row["val_loss"] - 0.1, train_loss=row["train_loss"] - 0.1)
              for row in rows]
    shifted = tmp_path / "shifted.csv"
    write_metrics_csv(better, shifted)
    assert run("report", "--baseline", path, "--candidate", shifted, "--rows", "all", "--out", out) == 0
    first = (out / "report_fedtar_vs_shifted.json").read_bytes()
    r = json.loads(first)["metrics"]["val_loss"]
    assert r["significant"] and r["win_rate"] == 100.0 and abs(r["mean_diff"] - 0.1) < 1e-12
    assert run("report", "--baseline", path, "--candidate", shifted, "--rows", "all", "--out", out) == 0
    assert (out / "report_fedtar_vs_shifted.json").read_bytes() == first


def test_report_rejects_unpaired(two_runs, tmp_path, capsys):
    path = two_runs / "metrics_fedtar_s0.csv"
    rows = read_metrics_csv(path)
    short = tmp_path / "short.csv"
    write_metrics_csv(rows[:-1], short)
    assert run("report", "--baseline", path, "--candidate", short, "--rows", "all") == 2
    assert "unpaired" in capsys.readouterr().err


# ---- gradcheck ------------------------------------------------------------

def test_gradcheck_cases(capsys):
    assert run("gradcheck") == 0
    assert "PASS" in capsys.readouterr().out
    assert run("gradcheck", "--dims", "T=1,d_w=8") == 0
    assert "first_order_gap=0.000e+00" in capsys.readouterr().out
    assert run("gradcheck", "--zero-mlp") == 0
    assert "symmetric=yes" in capsys.readouterr().out
    assert run("gradcheck", "--dims", "d_w=51") == 2
    assert run("gradcheck", "--dims", "T=6,embed=3,hidden=2") == 2  # d_psi = 25
    assert run("gradcheck", "--dims", "bogus=1") == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fedtar", "gradcheck", "--instances", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.count("instance") == 2
