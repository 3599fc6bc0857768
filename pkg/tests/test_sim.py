import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

import itertools
import json

import pytest

from src.backends import RoleProfile, StochasticAgentProfile
from src.core import LETTERS, ErrorOrigin
from src.errors import ResumeError
from src.sim import (
    CALIBRATION_JSON,
    binomial_check,
    calibrate,
    chain_profiles,
    expected_rates,
    predict_accuracy,
    stage_probabilities,
    synthetic_dataset,
)
from src.storage import TRACE_NAME, load_traces


def test_golden_value():
    q, p_exec, p_final = stage_probabilities(0.6, 0.5, 0.1, 0.5, 0.1)
    assert p_exec == pytest.approx(0.74)
    assert p_final == pytest.approx(0.796)
    assert predict_accuracy(0.6, 0.5, 0.1, 0.5, 0.1) == pytest.approx(0.796)


@pytest.mark.parametrize(
    "args, expected",
    [
        ((1.0, 0.3, 0.0, 0.7, 0.0), 1.0),
        ((0.0, 1.0, 0.4, 0.0, 0.0), 1.0),
        ((0.37, 0.0, 0.0, 0.0, 0.0), 0.37),
    ],
)
def test_degenerate_chains(args, expected):
    assert predict_accuracy(*args) == pytest.approx(expected)


def test_monotonicity():
    # holds whenever r + h <= 1 at both stages
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    for q, r_e, h_e, r_c, h_c in itertools.product(grid, repeat=5):
        if r_e + h_e > 1 or r_c + h_c > 1:
            continue
        base = predict_accuracy(q, r_e, h_e, r_c, h_c)
        step = 0.2
        if q + step <= 1:
            assert predict_accuracy(q + step, r_e, h_e, r_c, h_c) >= base - 1e-12
        if r_e + step <= 1:
            assert predict_accuracy(q, r_e + step, h_e, r_c, h_c) >= base - 1e-12
        if r_c + step <= 1:
            assert predict_accuracy(q, r_e, h_e, r_c + step, h_c) >= base - 1e-12
        if h_e + step <= 1:
            assert predict_accuracy(q, r_e, h_e + step, r_c, h_c) <= base + 1e-12
        if h_c + step <= 1:
            assert predict_accuracy(q, r_e, h_e, r_c, h_c + step) <= base + 1e-12


@pytest.mark.parametrize(
    "worse, better",
    [
        ((0.2, 0.75, 0.5, 0.0, 0.0), (0.0, 0.75, 0.5, 0.0, 0.0)),
        ((0.2, 0.0, 0.0, 0.25, 1.0), (0.0, 0.0, 0.0, 0.25, 1.0)),
    ],
)
def test_not_monotone_when_repair_plus_harm_exceeds_one(worse, better):
    # a better planner hands more correct answers to a stage that harms them
    assert predict_accuracy(*worse) < predict_accuracy(*better)


def test_rejects_out_of_range():
    with pytest.raises(ValueError):
        predict_accuracy(1.2, 0, 0, 0, 0)


def test_expected_rates():
    rates = expected_rates(0.6, 0.5, 0.1, 0.5, 0.1)
    assert rates.planner_error == pytest.approx(0.4)
    assert rates.executor_repair_raw == pytest.approx(0.2)
    assert rates.executor_harm_raw == pytest.approx(0.06)
    assert rates.critic_repair_raw == pytest.approx(0.13)
    assert rates.critic_harm_raw == pytest.approx(0.074)


def test_synthetic_dataset():
    dataset = synthetic_dataset(400, seed=1)
    assert len(dataset) == 400
    assert all(len(item.choices) == 4 for item in dataset)
    golds = {item.gold for item in dataset}
    assert golds == set(LETTERS[:4])
    assert synthetic_dataset(400, seed=1).content_hash() == dataset.content_hash()


def test_binomial_check_degenerate():
    assert binomial_check("x", 10, 10, 1.0).within_3sigma
    off = binomial_check("x", 9, 10, 1.0)
    assert not off.within_3sigma and off.deviation_sigma is None


def test_calibration_golden(tmp_path):
    report = calibrate(chain_profiles(0.6, 0.5, 0.1, 0.5, 0.1), ("A", "B", "C"), 10_000, 42, tmp_path / "sim")
    accuracy = report.check("final_accuracy")
    assert accuracy.within_3sigma, report.summary()
    assert accuracy.expected == pytest.approx(0.796)
    assert accuracy.sigma == pytest.approx(0.004, abs=0.0005)
    planner = report.check("planner_error")
    assert planner.expected == pytest.approx(0.4)
    assert planner.within_3sigma
    assert {c.name for c in report.checks} >= {"executor_repair_conditional", "critic_harm_conditional"}

    written = json.loads((tmp_path / "sim" / CALIBRATION_JSON).read_text(encoding="utf-8"))
    assert written["n_items"] == 10_000


def test_calibration_deterministic_chain_is_exact(tmp_path):
    report = calibrate(chain_profiles(0.0, 1.0, 0.0, 0.0, 1.0), ("A", "B", "C"), 200, 3, tmp_path / "sim")
    for check in report.checks:
        assert check.measured == check.expected, check


def test_simulated_repairs_are_flagged(tmp_path):
    calibrate(chain_profiles(0.3, 1.0, 0.0, 0.0, 0.0), ("A", "B", "C"), 300, 9, tmp_path / "sim")
    traces = load_traces(tmp_path / "sim" / TRACE_NAME)
    for trace in traces:
        # with no harm, every planner error is an executor repair
        assert trace.flags.executor_repair == trace.flags.planner_error
        assert not trace.flags.executor_harm
        assert trace.origin == ErrorOrigin.NONE


def test_calibration_with_one_shared_profile(tmp_path):
    profile = StochasticAgentProfile(
        planner=RoleProfile(base_correct=0.7),
        executor=RoleProfile(repair_prob=0.4, harm_prob=0.05),
        critic=RoleProfile(repair_prob=0.3, harm_prob=0.05),
    )
    report = calibrate({"A": profile}, ("A", "A", "A"), 3000, 5, tmp_path / "sim")
    assert report.label == "AAA"
    assert report.check("final_accuracy").expected == pytest.approx(predict_accuracy(0.7, 0.4, 0.05, 0.3, 0.05), abs=1e-6)


def test_calibration_refuses_existing_run(tmp_path):
    profiles = chain_profiles(0.5, 0.5, 0.5, 0.5, 0.5)
    calibrate(profiles, ("A", "B", "C"), 50, 1, tmp_path / "sim")
    with pytest.raises(ResumeError):
        calibrate(profiles, ("A", "B", "C"), 50, 1, tmp_path / "sim")
    calibrate(profiles, ("A", "B", "C"), 50, 1, tmp_path / "sim", overwrite=True)


def test_calibration_files_are_reproducible(tmp_path):
    profiles = chain_profiles(0.6, 0.5, 0.1, 0.5, 0.1)
    outputs = []
    for name, parallelism in (("one", 1), ("two", 1), ("wide", 8)):
        calibrate(profiles, ("A", "B", "C"), 500, 42, tmp_path / name, parallelism=parallelism)
        outputs.append(
            ((tmp_path / name / CALIBRATION_JSON).read_bytes(), (tmp_path / name / TRACE_NAME).read_bytes())
        )
    assert outputs[0] == outputs[1] == outputs[2]
