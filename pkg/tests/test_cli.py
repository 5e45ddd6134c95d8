import json

import numpy as np
import pytest
from pytest import fixture

from cascrank.cli import main
from cascrank.evaluation import synthetic_log
from cascrank.graph import write_log


@fixture
def data(tmp_path):
    log = synthetic_log(40, 30, [300, 120, 100], seed=4)
    path = tmp_path / "shop.tsv"
    write_log(log, path)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_ingest(tmp_path, data):
    out = tmp_path / "ing"
    assert run("ingest", "--data", data, "-o", out) == 0
    counts = json.loads((out / "counts.json").read_text())
    assert counts["records"] == {"view": 300, "cart": 120, "buy": 100}
    users = (out / "users.tsv").read_text().splitlines()
    assert users[0] == "u0\t0" or users[0].endswith("\t0")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "ingest"
    assert "numpy" in manifest["versions"]


def test_rank_top_k(tmp_path, data):
    out = tmp_path / "rank"
    code = run("rank", "--data", data, "--sequence", "view,cart,buy", "--user", "u7", "--k", "10",
               "--alpha", "0.3", "--beta", "0.4", "-o", out)
    assert code == 0
    lines = (out / "scores.tsv").read_text().splitlines()
    assert lines[0] == "user\titem\tscore\trank"
    rows = [line.split("\t") for line in lines[1:]]
    assert len(rows) == 10
    scores = [float(r[2]) for r in rows]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert [int(r[3]) for r in rows] == list(range(1, 11))
    diag = [json.loads(x) for x in (out / "diagnostics.jsonl").read_text().splitlines()]
    assert [b["behavior"] for b in diag[0]["behaviors"]] == ["view", "cart", "buy"]


def test_rank_exclude_seen(tmp_path, data):
    out = tmp_path / "rank"
    assert run("rank", "--data", data, "--user", "u3", "--k", "30", "--exclude-seen", "-o", out) == 0
    rows = [line.split("\t") for line in (out / "scores.tsv").read_text().splitlines()[1:]]
    bought = {line.split("\t")[1] for line in data.read_text().splitlines()
              if line.startswith("u3\t") and line.split("\t")[2] == "buy"}
    assert bought
    assert not bought & {r[1] for r in rows}


def test_evaluate_k_grid(tmp_path, data):
    out = tmp_path / "ev"
    assert run("evaluate", "--data", data, "--k", "10,30,50,100,200", "-o", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert list(rep["hr"]) == ["10", "30", "50", "100", "200"]
    assert list(rep["ndcg"]) == ["10", "30", "50", "100", "200"]


@pytest.mark.parametrize("variant", ["birank", "cohits", "rwr"])
def test_evaluate_baselines(tmp_path, data, variant):
    out = tmp_path / variant
    assert run("evaluate", "--data", data, "--variant", variant, "--k", "10", "-o", out) == 0
    assert run("evaluate", "--data", data, "--variant", variant, "--single-behavior", "--k", "10",
               "-o", out / "single") == 0


def test_deterministic_artifacts(tmp_path, data):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("evaluate", "--data", data, "--k", "10,20", "--jobs", "2", "-o", out) == 0
    for name in ("report.json", "report.tsv", "ranks.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    ma["config"].pop("output")
    mb["config"].pop("output")
    assert ma["config"] == mb["config"]


def test_sweep(tmp_path, data):
    out = tmp_path / "sw"
    assert run("sweep", "--data", data, "--step", "0.5", "--k", "10", "-o", out) == 0
    rows = (out / "sweep.tsv").read_text().splitlines()
    assert len(rows) == 6
    best = json.loads((out / "sweep_best.json").read_text())
    assert set(best) == {"hr@10", "ndcg@10"}


def test_permute(tmp_path, data):
    out = tmp_path / "perm"
    assert run("permute", "--data", data, "--sequence", "view,cart,buy", "--k", "10", "-o", out) == 0
    perms = (out / "permutations.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in perms[1:]] == ["view->cart->buy", "cart->view->buy"]
    prefixes = (out / "prefixes.tsv").read_text().splitlines()
    assert len(prefixes) == 4


def test_bench(tmp_path, data):
    out = tmp_path / "bench"
    assert run("bench", "--data", data, "--fractions", "0.5,1", "--max-iters", "3", "--queries", "4",
               "--seed", "1", "-o", out) == 0
    rows = (out / "bench.tsv").read_text().splitlines()
    assert rows[0] == "fraction\tusers\titems\tedges\tseconds"
    assert int(rows[-1].split("\t")[3]) == 520


def test_diagnose(tmp_path, data):
    out = tmp_path / "diag"
    assert run("diagnose", "--data", data, "--alpha", "0.3", "--beta", "0.4", "--user", "u1", "-o", out) == 0
    d = json.loads((out / "diagnose.json").read_text())
    assert d["gamma"] == pytest.approx(0.3)
    traj = d["users"][0]["trajectory"]
    assert {"residual", "smoothness", "query_fit", "cascade_fit", "objective"} <= set(traj[0])
    for s in d["spectral"]:
        assert s["measured"] <= s["bound"] + 1e-9
    assert (out / "trajectory.tsv").exists()


def test_config_file_and_flag_override(tmp_path, data):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[data]\n"
        f"data = {data.name}\n"
        "[model]\n"
        "sequence = view,cart,buy\n"
        "alpha = 0.2\n"
        "beta = 0.5\n"
        "[run]\n"
        "k = 10\n"
    )
    out = tmp_path / "cfg"
    assert run("evaluate", "--config", cfg, "--beta", "0.6", "-o", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["alpha"] == 0.2
    assert manifest["config"]["beta"] == 0.6
    assert manifest["config"]["k"] == [10]


def test_behavior_files(tmp_path):
    (tmp_path / "v.tsv").write_text("a\tx\t1\nb\ty\t2\na\ty\t3\n")
    (tmp_path / "b.tsv").write_text("a\tx\t4\nb\ty\t5\nb\tx\t6\n")
    out = tmp_path / "bf"
    assert run("rank", "--behavior-file", f"view={tmp_path / 'v.tsv'}", "--behavior-file",
               f"buy={tmp_path / 'b.tsv'}", "--k", "2", "-o", out) == 0
    assert len((out / "scores.tsv").read_text().splitlines()) == 1 + 2 * 2


@pytest.mark.parametrize("argv", [
    ["rank", "--alpha", "0.8", "--beta", "0.5"],
    ["rank", "--sequence", "view,buy", "--target", "cart"],
    ["rank", "--k", "0"],
    ["rank", "--user", "nobody"],
    ["rank", "--sequence", "view,view,buy"],
])
def test_config_errors_exit_2(tmp_path, data, argv, capsys):
    assert run(*argv, "--data", data, "-o", tmp_path / "x") == 2
    assert "configuration error" in capsys.readouterr().err


def test_missing_file_exit_2(tmp_path):
    assert run("rank", "--data", tmp_path / "nope.tsv", "-o", tmp_path / "x") == 2


def test_malformed_input_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("u\ti\tbuy\t1\nu\ti\n")
    assert run("rank", "--data", bad, "-o", tmp_path / "x") == 1
    assert "line 2" in capsys.readouterr().err


def test_module_entry_point(tmp_path, data):
    import subprocess
    import sys
    out = tmp_path / "m"
    res = subprocess.run([sys.executable, "-m", "cascrank", "ingest", "--data", str(data), "-o", str(out)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (out / "manifest.json").exists()
