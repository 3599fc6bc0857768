import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

import csv
import json

import pytest

from src.cli import EXIT_ERROR, EXIT_OK, EXIT_PARTIAL, main
from src.core import dump_dataset
from src.storage import MANIFEST_NAME, TRACE_NAME, load_traces, read_manifest
from tests.factories import make_dataset

CONFIG = """
[[models]]
key = "A"
backend = "oracle"

[[models]]
key = "B"
backend = "oracle"

[[models]]
key = "C"
backend = "planner-only"

[backends.oracle]
type = "stochastic"
planner = { base_correct = 1.0, mean_prompt_tokens = 200, mean_completion_tokens = 20 }
executor = { harm_prob = 0.0, mean_prompt_tokens = 300, mean_completion_tokens = 20 }
critic = { harm_prob = 0.0, mean_prompt_tokens = 400, mean_completion_tokens = 20 }

[backends.planner-only]
type = "stochastic"
planner = { base_correct = 1.0 }

[pipeline]
planner = "A"
executor = "B"
critic = "A"
baseline = "A"
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "experiment.toml").write_text(CONFIG, encoding="utf-8")
    (tmp_path / "toy.jsonl").write_text(dump_dataset(make_dataset(6)), encoding="utf-8")
    return tmp_path


def _run(workspace, *extra):
    return main([
        "run", "--config", str(workspace / "experiment.toml"), "--dataset", str(workspace / "toy.jsonl"),
        "--quiet", *extra,
    ])


def test_validate_dataset(workspace, capsys):
    assert main(["validate-dataset", str(workspace / "toy.jsonl")]) == EXIT_OK
    assert "6 items" in capsys.readouterr().out


def test_validate_dataset_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "question": "q", "choices": {"A": "x", "B": "y"}, "gold": "Z"}\n', encoding="utf-8")
    assert main(["validate-dataset", str(path)]) == EXIT_ERROR
    assert "line 1" in capsys.readouterr().err


def test_run_and_report(workspace, capsys):
    assert _run(workspace, "--regime", "baseline", "--out", str(workspace / "runs" / "A")) == EXIT_OK
    assert _run(workspace, "--regime", "accountable", "--out", str(workspace / "runs" / "ABA")) == EXIT_OK
    assert (workspace / "runs" / "ABA" / MANIFEST_NAME).exists()

    out = workspace / "report"
    assert main(["report", "--traces", str(workspace / "runs"), "--out", str(out)]) == EXIT_OK
    assert "12 traces from 2 runs" in capsys.readouterr().out
    with open(out / "baseline.csv", newline="", encoding="utf-8") as f:
        (row,) = csv.DictReader(f)
    assert (row["model"], row["accuracy"]) == ("A", "100.00")
    assert "| toy | ABA | accountable |" in (out / "report.md").read_text(encoding="utf-8")

    assert main(["pareto", "--report", str(out / "configs.csv")]) == EXIT_OK
    with open(out / "frontier.csv", newline="", encoding="utf-8") as f:
        labels = [r["label"] for r in csv.DictReader(f)]
    # both are always right; the single call is cheaper
    assert labels == ["A"]
    assert (out / "plot_data.csv").exists()


def test_run_with_failing_stage_is_partial(workspace, capsys):
    code = _run(workspace, "--regime", "accountable", "--executor", "C", "--out", str(workspace / "run"))
    assert code == EXIT_PARTIAL
    assert "6 items with failed stages" in capsys.readouterr().out


def test_run_refuses_existing_dir_and_resumes(workspace, capsys):
    out = str(workspace / "run")
    assert _run(workspace, "--regime", "simple", "--out", out) == EXIT_OK
    assert _run(workspace, "--regime", "simple", "--out", out) == EXIT_ERROR
    assert "already holds a run" in capsys.readouterr().err
    assert _run(workspace, "--regime", "simple", "--out", out, "--resume") == EXIT_OK


def test_run_all_configs(workspace):
    assert _run(workspace, "--regime", "baseline", "--all-configs", "--out", str(workspace / "base")) == EXIT_OK
    assert sorted(p.name for p in (workspace / "base").iterdir()) == ["A", "B", "C"]


def test_pareto_three_points(tmp_path, capsys):
    report = tmp_path / "configs.csv"
    report.write_text(
        "dataset,label,regime,items,accuracy,median_cost,median_latency\n"
        "toy,AAA,accountable,10,95.00,0.010000,2.000\n"
        "toy,BBB,accountable,10,90.00,0.020000,1.000\n"
        "toy,CCC,accountable,10,99.00,0.050000,4.000\n",
        encoding="utf-8",
    )
    assert main(["pareto", "--report", str(report), "--out", str(tmp_path / "out")]) == EXIT_OK
    with open(tmp_path / "out" / "frontier.csv", newline="", encoding="utf-8") as f:
        assert [r["label"] for r in csv.DictReader(f)] == ["AAA", "CCC"]
    assert "2 of 3 on the frontier" in capsys.readouterr().out


def test_simulate_is_reproducible(tmp_path, capsys):
    outputs = []
    for name in ("one", "two"):
        out = tmp_path / name
        args = ["simulate", "--n", "300", "--seed", "42", "--out", str(out)]
        assert main(args) == EXIT_OK
        outputs.append(((out / TRACE_NAME).read_bytes(), (out / "calibration.json").read_bytes()))
    assert outputs[0] == outputs[1]
    assert "final_accuracy" in capsys.readouterr().out
    assert json.loads(outputs[0][1])["label"] == "ABC"


def test_simulate_needs_force_to_rerun(tmp_path):
    args = ["simulate", "--n", "50", "--out", str(tmp_path / "sim")]
    assert main(args) == EXIT_OK
    assert main(args) == EXIT_ERROR
    assert main(args + ["--force"]) == EXIT_OK


def test_simulate_from_profiles(workspace, capsys):
    args = ["simulate", "--profiles", str(workspace / "experiment.toml"), "--n", "100", "--out", str(workspace / "s")]
    assert main(args) == EXIT_OK
    assert "ABA" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--bogus"],
        ["simulate", "--q", "1.5"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    assert excinfo.value.code == 2


SEEDED_CONFIG = """
[[models]]
key = "A"
backend = "sim"

[backends.sim]
type = "stochastic"
seed = 0
planner = { base_correct = 0.5 }
executor = { repair_prob = 0.5, harm_prob = 0.3 }
critic = { repair_prob = 0.5, harm_prob = 0.3 }

[pipeline]
planner = "A"
executor = "A"
critic = "A"
"""


def _stage_answers(run_dir):
    return {t.task_id: t.stage_answers for t in load_traces(run_dir / TRACE_NAME)}


def test_resume_keeps_the_recorded_seed(tmp_path):
    (tmp_path / "experiment.toml").write_text(SEEDED_CONFIG, encoding="utf-8")
    (tmp_path / "toy.jsonl").write_text(dump_dataset(make_dataset(40)), encoding="utf-8")
    args = ["run", "--config", str(tmp_path / "experiment.toml"), "--dataset", str(tmp_path / "toy.jsonl"),
            "--regime", "accountable", "--quiet"]

    assert main(args + ["--seed", "42", "--out", str(tmp_path / "full")]) == EXIT_OK
    assert main(args + ["--seed", "42", "--out", str(tmp_path / "cut")]) == EXIT_OK
    trace_file = tmp_path / "cut" / TRACE_NAME
    lines = trace_file.read_text(encoding="utf-8").splitlines(keepends=True)
    trace_file.write_text("".join(lines[:20]), encoding="utf-8")

    assert main(args + ["--resume", "--out", str(tmp_path / "cut")]) == EXIT_OK
    assert read_manifest(tmp_path / "cut").seed == 42
    assert _stage_answers(tmp_path / "cut") == _stage_answers(tmp_path / "full")


def test_resume_refuses_a_different_seed(tmp_path, capsys):
    (tmp_path / "experiment.toml").write_text(SEEDED_CONFIG, encoding="utf-8")
    (tmp_path / "toy.jsonl").write_text(dump_dataset(make_dataset(4)), encoding="utf-8")
    args = ["run", "--config", str(tmp_path / "experiment.toml"), "--dataset", str(tmp_path / "toy.jsonl"),
            "--regime", "accountable", "--quiet", "--out", str(tmp_path / "run")]
    assert main(args + ["--seed", "42"]) == EXIT_OK
    assert main(args + ["--seed", "7", "--resume"]) == EXIT_ERROR
    assert "seed 42" in capsys.readouterr().err
