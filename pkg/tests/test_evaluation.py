import math

import numpy as np
import pytest

import evaluation
from data_ingest import build_cases, split_dataset
from evaluation import (
    CrossScenarioMatrix, MetricsReport, cross_scenario, evaluate_predictions,
    longitudinal_threshold, min_ade, min_fde, miss_flags, miss_rate,
)
from grad_engine import NumericFailureError
from predictor import ModelConfig, TrainConfig
from scenario_core import RigidTransform, normalize_case
from synthetic_oracle import brute_force_metrics, constant_velocity_predict


def _random_batch(rng, n=None, t_f=None):
    n = n or int(rng.integers(1, 8))
    t_f = t_f or int(rng.integers(1, 12))
    truths = rng.normal(scale=5.0, size=(n, t_f, 2))
    preds = truths + rng.normal(scale=1.2, size=(n, t_f, 2))
    valid = rng.integers(1, t_f + 1, size=n)
    masks = np.arange(t_f)[None, :] < valid[:, None]
    speeds = rng.uniform(0.0, 15.0, size=n)
    headings = rng.uniform(-math.pi, math.pi, size=n)
    return preds, truths, masks, speeds, headings


# ========== 指標 ==========

def test_perfect_predictions_score_zero():
    truths = np.random.default_rng(0).normal(size=(4, 6, 2))
    assert min_ade(truths, truths) == 0.0
    assert min_fde(truths, truths) == 0.0


def test_constant_offset_gives_three_four_five():
    truths = np.zeros((2, 5, 2))
    assert min_ade(truths + np.array([3.0, 4.0]), truths) == pytest.approx(5.0)


def test_fde_uses_last_valid_frame_only():
    truths = np.zeros((1, 4, 2))
    preds = truths.copy()
    preds[0, 1] = [9.0, 9.0]
    assert min_fde(preds, truths) == 0.0
    preds[0, 3] = [0.0, 2.0]
    assert min_fde(preds, truths) == pytest.approx(2.0)
    mask = np.array([[True, True, False, False]])
    assert min_fde(preds, truths, mask) == pytest.approx(math.hypot(9.0, 9.0))


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        min_ade(np.zeros((0, 3, 2)), np.zeros((0, 3, 2)))


@pytest.mark.parametrize("speed, expected", [(0.0, 1.0), (1.0, 1.0), (1.4, 1.0),
                                             (6.2, 1.5), (11.0, 2.0), (20.0, 2.0)])
def test_longitudinal_threshold(speed, expected):
    assert float(longitudinal_threshold(speed)) == pytest.approx(expected, abs=1e-12)


def test_threshold_is_continuous_at_breakpoints():
    for v in (1.4, 11.0):
        below = float(longitudinal_threshold(v - 1e-12))
        assert below == pytest.approx(float(longitudinal_threshold(v + 1e-12)))


def test_inside_both_thresholds_is_not_a_miss():
    truths = np.zeros((1, 3, 2))
    preds = truths.copy()
    preds[0, -1] = [0.5, 0.5]
    assert miss_rate(preds, truths, [5.0], [0.0]) == 0.0


def test_miss_axes_follow_final_heading():
    truths = np.zeros((1, 3, 2))
    preds = truths.copy()
    preds[0, -1] = [0.0, 1.5]  # 航向 π/2 時為縱向誤差
    assert miss_rate(preds, truths, [6.2], [math.pi / 2]) == 0.0
    assert miss_rate(preds, truths, [6.2], [0.0]) == 1.0


def test_miss_rate_monotone_in_threshold_scale():
    rng = np.random.default_rng(3)
    preds, truths, masks, speeds, headings = _random_batch(rng, n=50, t_f=10)
    rates = [miss_rate(preds, truths, speeds, headings, masks, scale) for scale in (0.5, 1.0, 2.0, 4.0)]
    assert rates == sorted(rates, reverse=True)


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        preds, truths, masks, speeds, headings = _random_batch(rng)
        oracle = brute_force_metrics(preds, truths, masks, speeds, headings)
        assert abs(min_ade(preds, truths, masks) - oracle.min_ade) <= 1e-12
        assert abs(min_fde(preds, truths, masks) - oracle.min_fde) <= 1e-12
        assert miss_rate(preds, truths, speeds, headings, masks) == oracle.miss_rate


def test_metrics_invariant_under_joint_rigid_transform():
    rng = np.random.default_rng(8)
    preds, truths, masks, speeds, headings = _random_batch(rng, n=20, t_f=8)
    transform = RigidTransform((123.0, -45.0), 2.1)
    t_preds, t_truths = transform.apply_points(preds), transform.apply_points(truths)
    t_headings = transform.apply_heading(headings)
    assert abs(min_ade(preds, truths, masks) - min_ade(t_preds, t_truths, masks)) <= 1e-9
    assert abs(min_fde(preds, truths, masks) - min_fde(t_preds, t_truths, masks)) <= 1e-9
    np.testing.assert_array_equal(miss_flags(preds, truths, speeds, headings, masks),
                                  miss_flags(t_preds, t_truths, speeds, t_headings, masks))


def test_world_and_normalized_frames_give_same_ade(case_factory):
    case = case_factory(speed=6.0, heading=1.1, start=(40.0, -12.0), t_f=12)
    norm = normalize_case(case)
    pred = constant_velocity_predict(norm) + 0.3
    world_pred = norm.normalization.inverse_points(pred)
    assert abs(min_ade(pred[None], norm.future_truth[None])
               - min_ade(world_pred[None], case.future_truth[None])) <= 1e-9


def test_metrics_report_validation():
    with pytest.raises(ValueError):
        MetricsReport(min_ade=-1.0, min_fde=0.0, miss_rate=0.0, case_count=1)
    with pytest.raises(ValueError):
        MetricsReport(min_ade=0.0, min_fde=0.0, miss_rate=1.5, case_count=1)


def test_evaluate_predictions_with_short_futures(case_factory):
    cases = [normalize_case(case_factory(t_f=10, valid=v, key=f"k{v}")) for v in (3, 10)]
    preds = [constant_velocity_predict(c) for c in cases]
    report = evaluate_predictions(preds, cases)
    assert report.case_count == 2
    assert report.min_ade < 1e-9 and report.miss_rate == 0.0
    assert set(report.to_dict()) == {'minADE', 'minFDE', 'MR', 'case_count'}


# ========== 跨場景矩陣 ==========

@pytest.fixture
def two_scenarios(straight_scenario):
    scenarios = {}
    for seed, name in enumerate(("a", "b")):
        cases = build_cases(straight_scenario.tracks, straight_scenario.polylines, t_h=10, t_f=6,
                            scenario_name=name, normalize=True)
        scenarios[name] = split_dataset(cases, 0.25, seed=seed, scenario_name=name)
    return scenarios


TINY_MODEL = ModelConfig(hidden_dim=4, num_layers=1, t_h=10, t_f=6)
ONE_EPOCH = TrainConfig(batch_size=8, epoch_count=1)


def test_cross_scenario_single_seed_matrix(two_scenarios):
    matrix = cross_scenario(two_scenarios, ONE_EPOCH, seeds=[0], model_config=TINY_MODEL)
    assert matrix.scenarios == ['a', 'b']
    assert not matrix.failures
    for train in ('a', 'b'):
        for test in ('a', 'b'):
            cell = matrix.cell(train, test)
            assert cell is not None
            assert all(cell[m]['std'] == 0.0 for m in ('minADE', 'minFDE', 'MR'))
    frame = matrix.to_frame()
    assert len(frame) == 4
    assert frame['in_distribution'].sum() == 2
    gap = matrix.generalization_gap()
    assert len(gap) == 2
    assert set(matrix.to_dict()['cells']) == {'a', 'b'}


def test_cross_scenario_needs_two_scenarios(two_scenarios):
    with pytest.raises(ValueError):
        cross_scenario({'a': two_scenarios['a']}, ONE_EPOCH, seeds=[0], model_config=TINY_MODEL)


def test_training_failure_poisons_only_its_row(two_scenarios, monkeypatch):
    original_fit = evaluation.VectorNetPredictor.fit

    def flaky_fit(self, cases, config):
        if cases[0].scenario_name == 'b':
            raise NumericFailureError("non-finite loss at epoch 1 batch 0")
        return original_fit(self, cases, config)

    monkeypatch.setattr(evaluation.VectorNetPredictor, 'fit', flaky_fit)

    matrix = cross_scenario(two_scenarios, ONE_EPOCH, seeds=[0], model_config=TINY_MODEL)
    assert "b" in matrix.failures and 'batch 0' in matrix.failures['b']
    assert matrix.cell('b', 'a') is None and matrix.cell('b', 'b') is None
    assert matrix.cell('a', 'b') is not None


def test_average_miss_rate_and_json_are_stable():
    cell = {m: {'mean': 0.5, 'std': 0.0} for m in ('minADE', 'minFDE', 'MR')}
    matrix = CrossScenarioMatrix(['x', 'y'], [0],
                                 {('x', 'x'): cell, ('x', 'y'): cell, ('y', 'x'): None, ('y', 'y'): None},
                                 {'y': 'seed 0: boom'})
    assert matrix.average_miss_rate()['x'] == 0.5
    assert math.isnan(matrix.average_miss_rate()['y'])
    assert matrix.to_json() == matrix.to_json()
    assert matrix.to_json().endswith("\n")
