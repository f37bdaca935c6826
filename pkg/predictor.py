"""
向量化圖軌跡預測模型
Predictor - 兩組 polyline 子圖、目標查詢的全域注意力與 MLP 解碼器，以及訓練迴圈

所有運算都經過 grad_engine，因此同一個前向可以對參數（訓練）
或對輸入節點特徵（歸因）求梯度。
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import joblib
import numpy as np
import pandas as pd
from tqdm import tqdm

import grad_engine as ge
from data_ingest import DatasetSplit
from grad_engine import NumericFailureError, Tape, Tensor
from scenario_core import (
    DEFAULT_T_F, DEFAULT_T_H, FeatureSchema, GraphInput, PredictionCase,
    build_graph_input,
)

CHECKPOINT_FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

STACKS = ('context', 'trajectory')


@dataclass(frozen=True)
class ModelConfig:
    """模型結構參數，預設值為桌面規模"""
    hidden_dim: int = 64  # D
    num_layers: int = 3  # L
    t_h: int = DEFAULT_T_H
    t_f: int = DEFAULT_T_F
    num_heads: int = 1
    layer_norm: bool = True
    input_dim: int = FeatureSchema.default().width

    def __post_init__(self):
        if self.hidden_dim < 2 or self.hidden_dim % 2:
            raise ValueError(f"hidden_dim must be an even number >= 2, got {self.hidden_dim}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.t_f < 1 or self.t_h < 2:
            raise ValueError(f"invalid horizons t_h={self.t_h}, t_f={self.t_f}")

    @property
    def encoder_width(self) -> int:
        # 每層 concat(enc, pool) 後寬度回到 D
        return self.hidden_dim // 2


@dataclass(frozen=True)
class TrainConfig:
    """訓練超參數：batch 64、初始學習率 0.001、每 5 epoch 衰減到 30%"""
    batch_size: int = 64
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.3
    decay_every_epochs: int = 5
    epoch_count: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.initial_lr <= 0 or self.decay_every_epochs < 1 or self.epoch_count < 1:
            raise ValueError("initial_lr, decay_every_epochs and epoch_count must be positive")

    def learning_rate_at(self, epoch: int) -> float:
        """第 epoch 輪（從 1 起算）的學習率"""
        return self.initial_lr * self.lr_decay_factor ** ((epoch - 1) // self.decay_every_epochs)


@dataclass
class ModelParams:
    """所有可學習權重，依名稱索引"""
    config: ModelConfig
    weights: Dict[str, np.ndarray]
    seed: int = 0

    @property
    def names(self) -> List[str]:
        return list(self.weights)

    @property
    def num_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights.values())

    def copy(self) -> 'ModelParams':
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()}, self.seed)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([w.reshape(-1) for w in self.weights.values()])

    def from_vector(self, vector: np.ndarray) -> 'ModelParams':
        weights, cursor = {}, 0
        for name, w in self.weights.items():
            weights[name] = np.asarray(vector[cursor:cursor + w.size], dtype=np.float64).reshape(w.shape)
            cursor += w.size
        return ModelParams(self.config, weights, self.seed)

    def tensors(self, trainable: bool = True) -> Dict[str, Tensor]:
        role = ge.TensorRole.PARAMETER if trainable else ge.TensorRole.CONSTANT
        return {name: Tensor(w, role, name) for name, w in self.weights.items()}


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, half = config.hidden_dim, config.encoder_width
    shapes: Dict[str, Tuple[int, ...]] = {}
    for stack in STACKS:
        fan_in = config.input_dim
        for layer in range(config.num_layers):
            shapes[f"{stack}.{layer}.weight"] = (fan_in, half)
            shapes[f"{stack}.{layer}.bias"] = (half,)
            fan_in = d
    for proj in ('query', 'key', 'value'):
        shapes[f"attention.{proj}.weight"] = (d, d)
        shapes[f"attention.{proj}.bias"] = (d,)
    shapes["decoder.hidden.weight"] = (2 * d, d)
    shapes["decoder.hidden.bias"] = (d,)
    shapes["decoder.output.weight"] = (d, 2 * config.t_f)
    shapes["decoder.output.bias"] = (2 * config.t_f,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, zero_decoder: bool = False) -> ModelParams:
    """Glorot uniform 初始化，偏置為零；zero_decoder 讓輸出層全為零"""
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith('.bias'):
            weights[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = rng.uniform(-limit, limit, size=shape)
    if zero_decoder:
        weights["decoder.output.weight"][:] = 0.0
        weights["decoder.output.bias"][:] = 0.0
    return ModelParams(config, weights, seed)


class BaseTrajectoryModel(ABC):
    """所有軌跡預測模型的基類"""

    def __init__(self, model_name: str):
        self.model_name = model_name
        self.is_fitted = False
        self.training_history: Optional[pd.DataFrame] = None
        self.logger = logging.getLogger(f"Predictor.{model_name}")

    @abstractmethod
    def fit(self, cases: Sequence[PredictionCase], config: TrainConfig) -> 'BaseTrajectoryModel':
        """訓練模型"""
        pass

    @abstractmethod
    def predict(self, case: PredictionCase) -> np.ndarray:
        """預測 (T_f, 2) 正規化座標軌跡"""
        pass

    def predict_many(self, cases: Sequence[PredictionCase]) -> np.ndarray:
        return np.stack([self.predict(c) for c in cases]) if cases else np.zeros((0, 0, 2))


class VectorNetPredictor(BaseTrajectoryModel):
    """
    VectorNet 風格預測器

    - 兩組子圖堆疊：軌跡 polyline 與地圖 polyline 各自編碼
    - 每層：enc = relu(layer_norm(affine(x)))，輸出 concat(enc, max_pool(enc))
    - 全域圖：目標 polyline 特徵為 query，所有 polyline 特徵為 key / value
    - 解碼器：concat(注意力輸出, 目標特徵) -> relu(affine) -> affine -> (T_f, 2)
    """

    def __init__(self, config: Optional[ModelConfig] = None,
                 params: Optional[ModelParams] = None, seed: int = 0,
                 schema: Optional[FeatureSchema] = None):
        super().__init__("VectorNet")
        self.config = params.config if params is not None else (config or ModelConfig())
        self.params = params if params is not None else init_params(self.config, seed)
        self.schema = schema or FeatureSchema.default()
        if self.schema.width != self.config.input_dim:
            raise ValueError(f"schema width {self.schema.width} != input_dim {self.config.input_dim}")
        self.is_fitted = params is not None
        self._graph_cache: Dict[str, GraphInput] = {}

    # ========== 前向 ==========

    def _weights(self, params: Optional[Dict[str, Tensor]]) -> Dict[str, Tensor]:
        return params if params is not None else self.params.tensors(trainable=False)

    def subgraph_layer(self, node_features: Union[Tensor, np.ndarray], stack: str = 'context',
                       layer: int = 0, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """每列變成 concat(enc(row), max_pool(enc(all rows)))，寬度 D"""
        w = self._weights(params)
        x = node_features if isinstance(node_features, Tensor) else ge.constant(node_features)
        if x.data.ndim != 2 or x.shape[0] == 0:
            raise ge.ShapeError(f"subgraph_layer expects a non-empty matrix, got {x.shape}")
        h = ge.affine(x, w[f"{stack}.{layer}.weight"], w[f"{stack}.{layer}.bias"])
        if self.config.layer_norm:
            h = ge.layer_norm(h)
        enc = ge.relu(h)
        pooled = ge.max_pool_rows(enc)
        return ge.concat(enc, ge.broadcast_rows(pooled, x.shape[0]))

    def encode_polyline(self, nodes: Union[Tensor, np.ndarray], stack: str = 'context',
                        params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """L 層子圖後對所有節點 max-pool，得到寬度 D 的 polyline 特徵"""
        x = nodes
        for layer in range(self.config.num_layers):
            x = self.subgraph_layer(x, stack, layer, params)
        return ge.max_pool_rows(x)

    def global_interaction(self, polyline_features: Union[Tensor, np.ndarray], target_index: int,
                           params: Optional[Dict[str, Tensor]] = None) -> Tuple[Tensor, np.ndarray]:
        """目標查詢的單頭 cross-attention，回傳 (情境特徵, 注意力權重)"""
        w = self._weights(params)
        feats = (polyline_features if isinstance(polyline_features, Tensor)
                 else ge.constant(polyline_features))
        query = ge.affine(ge.take_row(feats, target_index),
                          w["attention.query.weight"], w["attention.query.bias"])
        keys = ge.affine(feats, w["attention.key.weight"], w["attention.key.bias"])
        values = ge.affine(feats, w["attention.value.weight"], w["attention.value.bias"])
        return ge.scaled_dot_attention(query, keys, values)

    def forward(self, graph: GraphInput, params: Optional[Dict[str, Tensor]] = None,
                node_input: Optional[Tensor] = None) -> Tuple[Tensor, np.ndarray]:
        """回傳 (預測軌跡 (T_f, 2), 注意力權重)"""
        w = self._weights(params)
        x = node_input if node_input is not None else ge.constant(graph.node_matrix)
        features = []
        for (start, stop), kind in zip(graph.polyline_slices, graph.polyline_kinds):
            stack = 'trajectory' if kind.is_trajectory else 'context'
            features.append(self.encode_polyline(ge.slice_rows(x, start, stop), stack, w))
        feats = ge.stack_rows(features)
        context, attention = self.global_interaction(feats, graph.target_index, w)
        target = ge.take_row(feats, graph.target_index)
        hidden = ge.relu(ge.affine(ge.concat(context, target),
                                   w["decoder.hidden.weight"], w["decoder.hidden.bias"]))
        out = ge.affine(hidden, w["decoder.output.weight"], w["decoder.output.bias"])
        return ge.reshape(out, (self.config.t_f, 2)), attention

    def graph_for(self, case: PredictionCase) -> GraphInput:
        key = f"{case.scenario_name}/{case.case_key}"
        graph = self._graph_cache.get(key)
        if graph is None:
            graph = build_graph_input(case, self.schema)
            self._graph_cache[key] = graph
        return graph

    def predict_graph(self, graph: GraphInput, node_matrix: Optional[np.ndarray] = None) -> np.ndarray:
        node_input = ge.constant(node_matrix) if node_matrix is not None else None
        pred, _ = self.forward(graph, node_input=node_input)
        return pred.data.copy()

    def predict(self, case: PredictionCase) -> np.ndarray:
        return self.predict_graph(build_graph_input(case, self.schema))

    # ========== 梯度 ==========

    def score_and_gradient(self, graph: GraphInput, case: PredictionCase,
                           node_matrix: np.ndarray) -> Tuple[float, np.ndarray]:
        """NMSE 分數與其對節點特徵矩陣的梯度（歸因使用）"""
        with Tape() as tape:
            x = ge.input_tensor(node_matrix, "nodes")
            pred, _ = self.forward(graph, node_input=x)
            score = ge.scale(ge.mse(pred, case.future_truth, case.future_mask), -1.0)
        grads = ge.gradients(tape, score)
        return score.item(), grads.input_grads["nodes"]

    def loss_and_gradients(self, graph: GraphInput, case: PredictionCase,
                           params: Optional[ModelParams] = None) -> Tuple[float, Dict[str, np.ndarray]]:
        params = params or self.params
        with Tape() as tape:
            tensors = params.tensors(trainable=True)
            pred, _ = self.forward(graph, params=tensors)
            loss = ge.mse(pred, case.future_truth, case.future_mask)
        return loss.item(), ge.gradients(tape, loss).param_grads

    # ========== 訓練 ==========

    def fit(self, cases: Sequence[PredictionCase], config: TrainConfig) -> 'VectorNetPredictor':
        """
        Adam + 階梯式學習率衰減，最小化有效幀上的平均平方位移

        Args:
            cases: 正規化後的訓練樣本
            config: 訓練超參數

        Returns:
            self（training_history 為每 epoch 的 loss 與學習率）
        """
        if not cases:
            raise ValueError("training set is empty")

        params = init_params(self.config, config.seed)
        rng = np.random.default_rng(config.seed)
        graphs = [self.graph_for(c) for c in cases]
        m = {k: np.zeros_like(v) for k, v in params.weights.items()}
        v = {k: np.zeros_like(w) for k, w in params.weights.items()}
        step = 0
        records = []

        quiet = not self.logger.isEnabledFor(logging.INFO)
        for epoch in tqdm(range(1, config.epoch_count + 1), desc="train", disable=quiet):
            lr = config.learning_rate_at(epoch)
            order = rng.permutation(len(cases))
            epoch_loss = 0.0
            for batch_id, start in enumerate(range(0, len(cases), config.batch_size)):
                batch = order[start:start + config.batch_size]
                grad_sum = {k: np.zeros_like(w) for k, w in params.weights.items()}
                batch_loss = 0.0
                try:
                    for i in batch:
                        loss, grads = self.loss_and_gradients(graphs[i], cases[i], params)
                        batch_loss += loss
                        for name, g in grads.items():
                            grad_sum[name] += g
                except NumericFailureError as exc:
                    raise NumericFailureError(
                        f"training aborted at epoch {epoch} batch {batch_id}: {exc}") from exc
                if not np.isfinite(batch_loss):
                    raise NumericFailureError(
                        f"non-finite loss at epoch {epoch} batch {batch_id}")

                step += 1
                scale = 1.0 / len(batch)
                for name, w in params.weights.items():
                    g = grad_sum[name] * scale
                    m[name] = ADAM_BETA1 * m[name] + (1.0 - ADAM_BETA1) * g
                    v[name] = ADAM_BETA2 * v[name] + (1.0 - ADAM_BETA2) * g * g
                    m_hat = m[name] / (1.0 - ADAM_BETA1 ** step)
                    v_hat = v[name] / (1.0 - ADAM_BETA2 ** step)
                    w -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
                if not params.all_finite():
                    raise NumericFailureError(
                        f"non-finite parameters after epoch {epoch} batch {batch_id}")
                epoch_loss += batch_loss

            mean_loss = epoch_loss / len(cases)
            records.append({'epoch': epoch, 'loss': mean_loss, 'learning_rate': lr})
            self.logger.info(f"epoch {epoch}/{config.epoch_count} loss={mean_loss:.6f} lr={lr:.2e}")

        self.params = params
        self.is_fitted = True
        self.training_history = pd.DataFrame(records, columns=['epoch', 'loss', 'learning_rate'])
        self.logger.info(f"模型訓練完成，樣本數: {len(cases)}，參數量: {params.num_parameters}")
        return self

    # ========== 存取 ==========

    def save_model(self, file_path: Union[str, Path]):
        """保存參數檢查點（joblib 版本化字典）"""
        payload = {
            'format_version': CHECKPOINT_FORMAT_VERSION,
            'model_config': asdict(self.config),
            'seed': self.params.seed,
            'weights': {k: np.array(w, dtype=np.float64) for k, w in self.params.weights.items()},
        }
        joblib.dump(payload, file_path)
        self.logger.info(f"模型已保存到: {file_path}")

    @classmethod
    def load_model(cls, file_path: Union[str, Path]) -> 'VectorNetPredictor':
        """載入參數檢查點"""
        payload = joblib.load(file_path)
        version = payload.get('format_version') if isinstance(payload, dict) else None
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {version!r} in {file_path}")
        config = ModelConfig(**payload['model_config'])
        expected = parameter_shapes(config)
        weights = payload['weights']
        if set(weights) != set(expected) or any(weights[k].shape != s for k, s in expected.items()):
            raise ValueError(f"checkpoint {file_path} does not match its model config")
        params = ModelParams(config, {k: weights[k] for k in expected}, int(payload['seed']))
        return cls(params=params)


def predict(case: PredictionCase, params: ModelParams) -> np.ndarray:
    """單一樣本預測（正規化座標）"""
    return VectorNetPredictor(params=params).predict(case)


def train(split: Union[DatasetSplit, Sequence[PredictionCase]], config: TrainConfig,
          model_config: Optional[ModelConfig] = None) -> Tuple[ModelParams, pd.DataFrame]:
    """在 split.train 上訓練，回傳 (參數, loss 歷史)"""
    cases = split.train if isinstance(split, DatasetSplit) else list(split)
    model = VectorNetPredictor(config=model_config or ModelConfig(), seed=config.seed)
    model.fit(cases, config)
    return model.params, model.training_history
