import numpy as np
import pytest

import grad_engine as ge
import predictor
from grad_engine import NumericFailureError
from predictor import (
    ModelConfig, TrainConfig, VectorNetPredictor, init_params, parameter_shapes, predict, train,
)
from scenario_core import GraphInput, build_graph_input, normalize_case


def _reorder_polylines(graph: GraphInput, order):
    """依 order 重新排列 polyline 群組（節點列跟著移動）"""
    rows, slices, cursor = [], [], 0
    for j in order:
        start, stop = graph.polyline_slices[j]
        rows.append(graph.node_matrix[start:stop])
        slices.append((cursor, cursor + stop - start))
        cursor += stop - start
    return GraphInput(
        node_matrix=np.vstack(rows),
        polyline_slices=tuple(slices),
        polyline_kinds=tuple(graph.polyline_kinds[j] for j in order),
        polyline_ids=tuple(graph.polyline_ids[j] for j in order),
        target_index=order.index(graph.target_index),
    )


def _kink_outliers(errors, tol=1e-5):
    # 差分步長跨過 relu 折點或 max-pool 換手的座標不可微，允許少量例外
    return int((errors > tol).sum())


# ========== 設定 ==========

def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=7)
    with pytest.raises(ValueError):
        ModelConfig(num_heads=2)
    assert ModelConfig(hidden_dim=64).encoder_width == 32


def test_default_schedule_values():
    config = TrainConfig()
    assert (config.batch_size, config.initial_lr, config.lr_decay_factor,
            config.decay_every_epochs) == (64, 0.001, 0.3, 5)
    assert config.learning_rate_at(1) == pytest.approx(1e-3)
    assert config.learning_rate_at(5) == pytest.approx(1e-3)
    assert config.learning_rate_at(6) == pytest.approx(3e-4)
    assert config.learning_rate_at(11) == pytest.approx(9e-5)


def test_parameter_shapes_follow_hidden_width(tiny_model_config):
    shapes = parameter_shapes(tiny_model_config)
    assert shapes["context.0.weight"] == (16, 4)
    assert shapes["trajectory.1.weight"] == (8, 4)
    assert shapes["attention.query.weight"] == (8, 8)
    assert shapes["decoder.hidden.weight"] == (16, 8)
    assert shapes["decoder.output.bias"] == (12,)


# ========== 前向 ==========

def test_zero_decoder_predicts_all_zero(normalized_case, tiny_model_config):
    model = VectorNetPredictor(params=init_params(tiny_model_config, seed=3, zero_decoder=True))
    pred = model.predict(normalized_case)
    assert pred.shape == (6, 2)
    assert not pred.any()


def test_prediction_is_bit_identical_across_calls(normalized_case, tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=1)
    assert model.predict(normalized_case).tobytes() == model.predict(normalized_case).tobytes()
    assert np.isfinite(model.predict(normalized_case)).all()


def test_single_polyline_attention_returns_value_projection(tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=2)
    feats = np.random.default_rng(0).normal(size=(1, 8))
    context, weights = model.global_interaction(feats, 0)
    w = model.params.weights
    expected = feats[0] @ w["attention.value.weight"] + w["attention.value.bias"]
    np.testing.assert_allclose(context.data, expected, atol=1e-12)
    assert weights.tolist() == [1.0]


def test_identical_context_polylines_get_equal_attention(tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=2)
    rng = np.random.default_rng(1)
    target, other = rng.normal(size=8), rng.normal(size=8)
    _, weights = model.global_interaction(np.stack([target, other, other]), 0)
    assert abs(weights[1] - weights[2]) < 1e-15
    assert abs(weights.sum() - 1.0) < 1e-12


def test_node_order_within_polyline_does_not_matter(normalized_case, tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=4)
    graph = build_graph_input(normalized_case)
    matrix = graph.node_matrix.copy()
    for start, stop in graph.polyline_slices:
        matrix[start:stop] = matrix[start:stop][::-1]
    np.testing.assert_allclose(model.predict_graph(graph, matrix), model.predict_graph(graph), atol=1e-12)


def test_non_target_polyline_order_does_not_matter(normalized_case, tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=4)
    graph = build_graph_input(normalized_case)
    order = [0] + list(range(graph.num_polylines - 1, 0, -1))
    permuted = _reorder_polylines(graph, order)
    np.testing.assert_allclose(model.predict_graph(permuted), model.predict_graph(graph), atol=1e-12)


def test_target_can_sit_anywhere_in_the_global_graph(normalized_case, tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=6)
    graph = build_graph_input(normalized_case)
    order = list(range(1, graph.num_polylines)) + [0]
    np.testing.assert_allclose(model.predict_graph(_reorder_polylines(graph, order)),
                               model.predict_graph(graph), atol=1e-12)


# ========== 梯度 ==========

def test_input_gradient_matches_finite_differences(normalized_case, tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=8)
    graph = build_graph_input(normalized_case)

    def fn(matrix):
        return model.score_and_gradient(graph, normalized_case, matrix)

    errors = ge.finite_difference_errors(fn, graph.node_matrix, h=1e-5, floor=1e-4)
    assert _kink_outliers(errors) <= max(1, errors.size // 100)


@pytest.mark.parametrize("name", ["context.0.weight", "attention.value.weight", "decoder.hidden.bias"])
def test_parameter_gradient_matches_finite_differences(normalized_case, tiny_model_config, name):
    model = VectorNetPredictor(tiny_model_config, seed=9)
    graph = build_graph_input(normalized_case)
    base = model.params

    def fn(weight):
        params = base.copy()
        params.weights[name] = weight
        loss, grads = model.loss_and_gradients(graph, normalized_case, params)
        return loss, grads[name]

    errors = ge.finite_difference_errors(fn, base.weights[name], h=1e-5, floor=1e-4)
    assert _kink_outliers(errors) <= 1


def test_gradient_is_zero_at_perfect_fit(normalized_case, tiny_model_config):
    params = init_params(tiny_model_config, seed=0, zero_decoder=True)
    params.weights["decoder.output.bias"] = normalized_case.future_truth.reshape(-1).copy()
    model = VectorNetPredictor(params=params)
    graph = build_graph_input(normalized_case)
    loss, grads = model.loss_and_gradients(graph, normalized_case)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


# ========== 訓練 ==========

def test_fit_records_history_and_is_deterministic(straight_cases, tiny_model_config):
    config = TrainConfig(batch_size=8, epoch_count=2, seed=5)
    a = VectorNetPredictor(tiny_model_config).fit(straight_cases, config)
    b = VectorNetPredictor(tiny_model_config).fit(straight_cases, config)
    assert list(a.training_history.columns) == ['epoch', 'loss', 'learning_rate']
    assert a.training_history['epoch'].tolist() == [1, 2]
    assert np.isfinite(a.training_history['loss']).all()
    assert a.params.to_vector().tobytes() == b.params.to_vector().tobytes()
    assert a.is_fitted


def test_fit_rejects_empty_training_set(tiny_model_config):
    with pytest.raises(ValueError, match="empty"):
        VectorNetPredictor(tiny_model_config).fit([], TrainConfig())


def test_numeric_failure_names_epoch_and_batch(straight_cases, tiny_model_config, monkeypatch):
    def broken(self, graph, case, params=None):
        raise NumericFailureError("non-finite values produced by affine")

    monkeypatch.setattr(VectorNetPredictor, 'loss_and_gradients', broken)
    with pytest.raises(NumericFailureError, match="epoch 1 batch 0"):
        VectorNetPredictor(tiny_model_config).fit(straight_cases, TrainConfig(epoch_count=1))


def test_train_returns_params_and_history(straight_cases, tiny_model_config):
    params, history = train(straight_cases, TrainConfig(batch_size=16, epoch_count=1),
                            tiny_model_config)
    assert params.all_finite()
    assert len(history) == 1
    assert predict(straight_cases[0], params).shape == (6, 2)


# ========== 檢查點 ==========

def test_checkpoint_round_trip(tmp_path, normalized_case, tiny_model_config):
    model = VectorNetPredictor(tiny_model_config, seed=12)
    path = tmp_path / "model.joblib"
    model.save_model(path)
    restored = VectorNetPredictor.load_model(path)
    assert restored.config == tiny_model_config
    assert restored.predict(normalized_case).tobytes() == model.predict(normalized_case).tobytes()


def test_checkpoint_with_wrong_version_rejected(tmp_path):
    import joblib

    path = tmp_path / "model.joblib"
    joblib.dump({'format_version': 99}, path)
    with pytest.raises(ValueError, match="unsupported checkpoint"):
        VectorNetPredictor.load_model(path)


def test_world_frame_prediction_round_trip(case_factory, tiny_model_config):
    case = case_factory(t_f=6, start=(12.0, 7.0), heading=0.9)
    norm = normalize_case(case)
    model = VectorNetPredictor(tiny_model_config, seed=1)
    world = norm.normalization.inverse_points(model.predict(norm))
    assert world.shape == (6, 2)
    np.testing.assert_allclose(norm.normalization.apply_points(world), model.predict(norm), atol=1e-9)


def test_module_exports_format_version():
    assert predictor.CHECKPOINT_FORMAT_VERSION == 1
