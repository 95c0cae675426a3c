"""CLI tests over real subprocesses: exit codes, file outputs, determinism."""

import json
import subprocess
import sys

import pytest

RUN_INI = """\
[out]
dir = {out_dir}

[data]
sequences = seqs.tsv
names = names.tsv

[graph]
path = graph.tsv

[text]
provider = fixture
fixture = fixture.json
backend = hash
dim = 16

[model]
seed = 9
dim = 16
blocks = 1
heads = 2
max_len = 16
kt_input_dim = 8
kt_hidden = 8

[eval]
clusters = 2

[stage:graph]
epochs = 2

[stage:kt]
epochs = 1

[stage:seq]
epochs = 1

[stage:finetune]
epochs = 2
patience = 5
"""


def cli(*args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "conceptrec.cli", *args],
        cwd=str(cwd),
        capture_output=True,
        text=True,
        timeout=300,
    )


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with generated data and one completed `run`."""
    root = tmp_path_factory.mktemp("cli")
    res = cli(
        "gen-data",
        "--concepts", "6", "--learners", "10", "--walk-bias", "0.8",
        "--seed", "5", "--clusters", "2", "--out-degree", "1",
        "--min-len", "6", "--max-len", "10",
        "--out", "seqs.tsv", "--names-out", "names.tsv",
        "--graph-out", "graph.tsv", "--fixture-out", "fixture.json",
        cwd=root,
    )
    assert res.returncode == 0, res.stderr
    (root / "run.ini").write_text(RUN_INI.format(out_dir="out_a"))
    res = cli("--log", "metrics_a.jsonl", "run", "--config", "run.ini", cwd=root)
    assert res.returncode == 0, res.stderr
    return root


# ----------------------------------------------------------------- exit codes


def test_unknown_subcommand_exits_two(tmp_path):
    res = cli("frobnicate", cwd=tmp_path)
    assert res.returncode == 2


def test_missing_required_flag_exits_three(tmp_path):
    res = cli("evaluate", cwd=tmp_path)
    assert res.returncode == 3
    assert "config error: evaluate: model is required" in res.stderr


def test_missing_config_field_exits_three(tmp_path):
    (tmp_path / "bad.ini").write_text("[out]\nother = 1\n")
    res = cli("run", "--config", "bad.ini", cwd=tmp_path)
    assert res.returncode == 3
    assert "config error: [out] dir is required" in res.stderr

    (tmp_path / "worse.ini").write_text("[data]\nsequences = x.tsv\n")
    res = cli("run", "--config", "worse.ini", cwd=tmp_path)
    assert res.returncode == 3
    assert "config error: [out] section is required" in res.stderr


def test_missing_config_file_exits_three(tmp_path):
    res = cli("run", "--config", "nope.ini", cwd=tmp_path)
    assert res.returncode == 3
    assert "not found" in res.stderr


def test_unknown_learner_exits_one(ws):
    res = cli(
        "recommend", "--model", "out_a/model.ckpt",
        "--data", "seqs.tsv", "--graph", "graph.tsv", "--learner", "zzz",
        cwd=ws,
    )
    assert res.returncode == 1
    assert "error: learner 'zzz' not found" in res.stderr


# ----------------------------------------------------------------- artifacts


def test_run_report_has_the_seven_keys(ws):
    report = json.loads((ws / "out_a" / "report.json").read_text())
    assert set(report) == {
        "HR@1", "NDCG@5", "MRR",
        "consistency_all", "consistency_adherent", "DBI_raw", "DBI_adapted",
    }
    # the file is written with sorted keys
    assert list(report) == sorted(report)


def test_run_is_byte_deterministic(ws):
    (ws / "run_b.ini").write_text(RUN_INI.format(out_dir="out_b"))
    res = cli("--log", "metrics_b.jsonl", "run", "--config", "run_b.ini", cwd=ws)
    assert res.returncode == 0, res.stderr
    for name in ("report.json", "model.ckpt", "adapted_table.bin", "raw_table.bin"):
        a = (ws / "out_a" / name).read_bytes()
        b = (ws / "out_b" / name).read_bytes()
        assert a == b, name
    assert (ws / "metrics_a.jsonl").read_bytes() == (ws / "metrics_b.jsonl").read_bytes()


def test_metrics_log_is_json_lines_with_stage_rows(ws):
    rows = [
        json.loads(line)
        for line in (ws / "metrics_a.jsonl").read_text().splitlines()
    ]
    assert rows, "empty metrics log"
    for row in rows:
        assert set(row) == {"stage", "epoch", "loss", "val_metric"}
        if row["stage"] == "finetune":
            assert isinstance(row["val_metric"], float)
        else:
            assert row["val_metric"] is None
    stages = [row["stage"] for row in rows]
    assert stages == sorted(
        stages, key=("graph", "kt", "seq", "finetune").index
    )
    assert stages.count("graph") == 2 and stages.count("kt") == 1


def test_recommend_emits_sorted_json_lines(ws):
    res = cli(
        "recommend", "--model", "out_a/model.ckpt",
        "--data", "seqs.tsv", "--graph", "graph.tsv", "--top-k", "3",
        cwd=ws,
    )
    assert res.returncode == 0, res.stderr
    names = set(json.loads((ws / "names.tsv").read_text()))
    rows = [json.loads(line) for line in res.stdout.splitlines()]
    assert len(rows) == 10
    learners = [row["learner"] for row in rows]
    assert learners == sorted(learners)
    for row in rows:
        assert set(row) == {"learner", "ranking"}
        assert len(row["ranking"]) == 3
        assert set(row["ranking"]) <= names

    res = cli(
        "recommend", "--model", "out_a/model.ckpt",
        "--data", "seqs.tsv", "--graph", "graph.tsv",
        "--learner", learners[3], "--top-k", "2",
        cwd=ws,
    )
    assert res.returncode == 0, res.stderr
    only = [json.loads(line) for line in res.stdout.splitlines()]
    assert len(only) == 1 and only[0]["learner"] == learners[3]


def test_evaluate_command_reproduces_the_run_report(ws):
    res = cli(
        "evaluate", "--model", "out_a/model.ckpt",
        "--data", "seqs.tsv", "--graph", "graph.tsv",
        "--out", "eval_report.json",
        cwd=ws,
    )
    assert res.returncode == 0, res.stderr
    assert (ws / "eval_report.json").read_bytes() == (ws / "out_a" / "report.json").read_bytes()
    # one stdout line per metric
    assert len(res.stdout.splitlines()) == 7


def test_embed_report_reads_the_run_tables(ws):
    res = cli(
        "embed-report", "--raw", "out_a/raw_table.bin",
        "--adapted", "out_a/adapted_table.bin", "--k", "2",
        "--out", "emb.json",
        cwd=ws,
    )
    assert res.returncode == 0, res.stderr
    report = json.loads((ws / "emb.json").read_text())
    assert set(report) == {"DBI_raw", "DBI_adapted"}
    assert all(isinstance(v, float) for v in report.values())
