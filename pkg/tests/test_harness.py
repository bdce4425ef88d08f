import os

import numpy as np
import pandas as pd
import pytest

from config import default_run_config
from logger import get_log_stream
from utils.file_loader import CheckpointMismatchError, load_checkpoint
from utils.harness import (METRIC_COLUMNS, EvalRecord, ScenarioSpec, TrainingDivergedError, evaluate,
                           generalization_matrix, normalize_cell, regime_comparison, robustness_table, switch_rate, train, train_agent,
                           travel_time_differences)

BASELINES = ["fixed", "greedy"]


def tiny_config():
    cfg = default_run_config()
    cfg["model"].update(layers=2, hidden=4, quantile_embedding=4, quantile_samples=2, target_quantile_samples=2,
                        eval_quantiles=4)
    cfg["training"].update(episodes=1, episode_horizon=20, batch_size=4, update_every=1, target_sync=5,
                           replay_capacity=200)
    cfg["sim"]["horizon"] = 60
    return cfg


def test_normalize_cell_example():
    values, degenerate = normalize_cell({"a": 100.0, "b": 200.0, "c": 300.0})
    assert values == {"a": 0.0, "b": 5000.0, "c": 10000.0}
    assert not degenerate


def test_normalize_cell_ties_and_size():
    values, degenerate = normalize_cell({"a": 7.0, "b": 7.0})
    assert degenerate and values == {"a": 0.0, "b": 0.0}
    with pytest.raises(ValueError):
        normalize_cell({"a": 1.0})


def test_switch_rate():
    frames = pd.DataFrame({"switches": [4, 4, 4]})
    assert switch_rate(frames, 4) * 1000 == pytest.approx(1000.0)
    assert switch_rate(pd.DataFrame({"switches": [0, 0]}), 4) == 0.0


def test_scenario_keys_pair_trips_across_missing_probabilities():
    a = ScenarioSpec(period=4.0, missing_probability=0.0, seeds=(0,))
    b = ScenarioSpec(period=4.0, missing_probability=0.4, seeds=(0,))
    assert a.demand_key == b.demand_key
    assert a.key != b.key
    with pytest.raises(ValueError):
        ScenarioSpec(seeds=(1, 1))
    with pytest.raises(FileNotFoundError):
        ScenarioSpec(network="no/such/network.json")


def test_evaluate_baselines_is_deterministic_and_paired():
    cfg = tiny_config()
    scenarios = [ScenarioSpec(horizon=200, seeds=(0, 1), missing_probability=p) for p in (0.0, 0.6)]
    first = evaluate(None, scenarios, cfg, BASELINES, workers=1)
    second = evaluate(None, scenarios, cfg, BASELINES, workers=1)
    order = [(r.scenario.key, r.method) for r in first]
    assert order == sorted(order)
    for a, b in zip(first, second):
        pd.testing.assert_frame_equal(a.rows, b.rows)
    by_key = {(r.scenario.missing_probability, r.method): r for r in first}
    # baselines do not observe the graph, so sensor failures cannot change them
    for method in BASELINES:
        pd.testing.assert_frame_equal(by_key[(0.0, method)].rows, by_key[(0.6, method)].rows)
    fingerprints = {tuple(r.rows["trip_fingerprint"]) for r in first}
    assert len(fingerprints) == 1
    fixed = by_key[(0.0, "fixed")]
    # green switches execute at t = 30, 62, ..., 190
    assert fixed.rows["executed_switch_rate"].tolist() == pytest.approx([0.03, 0.03])
    assert fixed.delay_curves.shape == (2, 200)
    assert (fixed.rows["arrivals"] > 0).all()


def test_evaluate_rejects_bad_requests():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        evaluate(None, [], cfg, BASELINES)
    with pytest.raises(ValueError):
        evaluate(None, [ScenarioSpec(horizon=10, seeds=(0,))], cfg, ["igrl"])


def test_train_resume_and_evaluate(tmp_path, grid2):
    cfg = tiny_config()
    out = str(tmp_path / "ckpt")
    paths = train(cfg, out, ["igrl", "dgrl"], root_seed=3, networks=[grid2])
    assert set(paths) == {"igrl", "dgrl"}
    assert load_checkpoint(paths["igrl"])["episode"] == 1
    assert len(pd.read_csv(os.path.join(out, "dgrl_training_log.csv"))) == 1

    cfg["training"]["episodes"] = 2
    train_agent("igrl", cfg, out, root_seed=3, resume=True, networks=[grid2])
    ckpt = load_checkpoint(paths["igrl"])
    assert ckpt["episode"] == 2
    assert ckpt["extra"]["updates"] > 0
    log = pd.read_csv(os.path.join(out, "igrl_training_log.csv"))
    assert log["episode"].tolist() == [0, 1]

    scenario = ScenarioSpec(horizon=30, seeds=(0,))
    records = evaluate(paths, [scenario], cfg, ["igrl", "dgrl", "rglight"], workers=1)
    assert [r.method for r in records] == ["dgrl", "igrl", "rglight"]

    other = tiny_config()
    other["model"]["hidden"] = 6
    with pytest.raises(CheckpointMismatchError):
        evaluate(paths, [scenario], other, ["igrl"], workers=1)


def test_training_with_missing_data_logs_warning(tmp_path, grid2):
    cfg = tiny_config()
    cfg["training"]["missing_probability"] = 0.2
    train_agent("igrl", cfg, str(tmp_path), networks=[grid2])
    assert "training with missing data" in get_log_stream().getvalue()


def test_divergence_is_reported(tmp_path, grid2):
    cfg = tiny_config()
    cfg["training"]["lr"] = float("nan")
    with pytest.raises(TrainingDivergedError):
        train_agent("igrl", cfg, str(tmp_path), networks=[grid2])


def test_unknown_agent_kind(tmp_path):
    with pytest.raises(ValueError):
        train_agent("rglight", tiny_config(), str(tmp_path))


def test_generalization_matrix_shape():
    cfg = tiny_config()
    matrix, records = generalization_matrix(None, cfg, scales=[2], demands=[4.0, 2.0], methods=BASELINES,
                                            seeds=(0,), workers=1)
    assert len(matrix) == 4
    assert list(matrix.columns[:5]) == ["scale", "demand", "method", "mean_delay", "normalized"]
    for _, cell in matrix.groupby(["scale", "demand"]):
        if cell["degenerate"].any():
            assert (cell["normalized"] == 0).all()
        else:
            assert sorted(cell["normalized"]) == [0.0, 10000.0]
    with pytest.raises(ValueError):
        generalization_matrix(None, cfg, scales=[2], demands=[4.0], methods=["fixed"], seeds=(0,))


def test_regime_comparison_and_tables():
    cfg = tiny_config()
    records = regime_comparison(None, cfg, size=2, periods=(4.0, 2.0), methods=BASELINES, seeds=(0, 1), workers=1)
    assert sorted({r.scenario.period for r in records}) == [2.0, 4.0]
    heavy = [r for r in records if r.scenario.period == 2.0]
    fixed = next(r for r in heavy if r.method == "fixed")
    greedy = next(r for r in heavy if r.method == "greedy")
    diffs = travel_time_differences(fixed, greedy)
    assert list(diffs.columns) == ["seed", "vehicle", "travel_time_a", "travel_time_b", "difference"]
    np.testing.assert_allclose(diffs["difference"], diffs["travel_time_a"] - diffs["travel_time_b"])
    with pytest.raises(ValueError):
        travel_time_differences(fixed, next(r for r in records if r.scenario.period == 4.0))

    table = robustness_table(records)
    assert set(table.index) == set(BASELINES)


def test_eval_record_summary():
    rows = pd.DataFrame({"seed": [0, 1], "sum_delay": [10.0, 20.0], "sum_queue": [1.0, 3.0],
                         "sum_travel_time": [5.0, 5.0], "mean_travel_time": [2.0, 2.0], "arrivals": [3, 5],
                         "requested_switch_rate": [0.1, 0.1], "executed_switch_rate": [0.05, 0.05],
                         "masked_switches": [0, 2]})
    rec = EvalRecord(ScenarioSpec(seeds=(0, 1)), "fixed", rows, np.zeros((2, 3)))
    summary = rec.summary()
    assert summary["sum_delay_mean"] == 15.0
    assert summary["sum_delay_std"] == 5.0
    assert rec.key.endswith("/fixed")


# ── acceptance experiments ────────────────────────────────────────────────────

RL = ["igrl", "dgrl", "rglight"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """IGRL and DGRL trained with the default budget on random 2-6 intersection networks."""
    cfg = default_run_config()
    paths = train(cfg, str(tmp_path_factory.mktemp("ckpt")), ["igrl", "dgrl"], root_seed=0)
    return cfg, paths


@pytest.mark.slow
def test_trained_methods_beat_fixed_time(trained):
    cfg, paths = trained
    scenario = ScenarioSpec(period=4.0, missing_probability=0.0, seeds=tuple(range(30)))
    records = evaluate(paths, [scenario], cfg, ["fixed", *RL])
    queue = {r.method: r.rows["sum_queue"].mean() for r in records}
    for method in RL:
        assert queue[method] <= 0.85 * queue["fixed"], method
    assert queue["rglight"] <= 1.05 * min(queue["igrl"], queue["dgrl"])


@pytest.mark.slow
def test_ensemble_degrades_no_worse_than_igrl(trained):
    cfg, paths = trained
    scenarios = [ScenarioSpec(missing_probability=p, seeds=tuple(range(30))) for p in (0.0, 0.4, 0.6)]
    records = evaluate(paths, scenarios, cfg, ["fixed", "igrl", "rglight"])
    delay = {(r.scenario.missing_probability, r.method): r.rows["sum_delay"].mean() for r in records}
    fixed = [r for r in records if r.method == "fixed"]
    columns = ["seed", *METRIC_COLUMNS]
    for other in fixed[1:]:
        pd.testing.assert_frame_equal(fixed[0].rows[columns].reset_index(drop=True),
                                      other.rows[columns].reset_index(drop=True))

    assert delay[(0.6, "rglight")] > delay[(0.0, "rglight")]
    for p in (0.4, 0.6):
        rglight = delay[(p, "rglight")] / delay[(0.0, "rglight")]
        igrl = delay[(p, "igrl")] / delay[(0.0, "igrl")]
        assert rglight <= igrl, p


@pytest.mark.slow
def test_trained_generalization_matrix(trained, tmp_path):
    cfg, paths = trained
    methods = ["fixed", "greedy", *RL]
    matrix, records = generalization_matrix(paths, cfg, scales=[2, 4, 6, 8], demands=[0.5, 1.0, 2.0, 4.0],
                                            methods=methods, seeds=(0, 1, 2))
    assert len(matrix) == 16 * len(methods)
    assert matrix["normalized"].between(0.0, 10_000.0).all()
    for _, cell in matrix.groupby(["scale", "demand"]):
        assert set(cell["method"]) == set(methods)
        if cell["degenerate"].any():
            continue
        best = cell.loc[cell["mean_delay"].idxmin()]
        worst = cell.loc[cell["mean_delay"].idxmax()]
        assert best["normalized"] == 0.0
        assert worst["normalized"] == 10_000.0

    matrix.to_csv(tmp_path / "matrix.csv", index=False)
    pd.testing.assert_frame_equal(pd.read_csv(tmp_path / "matrix.csv"), matrix.reset_index(drop=True), check_dtype=False)
