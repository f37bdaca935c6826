"""
軌跡預測的積分梯度歸因
Attribution - NMSE 分數、混合 baseline、Riemann 和路徑積分、完備性診斷與各種彙總

F(x) 為模型預測對真值的負均方位移誤差 (NMSE)，IG 沿 baseline -> 輸入的直線路徑積分。
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from grad_engine import NumericFailureError
from scenario_core import (
    FeatureSchema, GraphInput, PolylineKind, PredictionCase, build_graph_input,
)

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 10.0
DEFAULT_STEPS = 64
COMPLETENESS_STEPS = 512
SHADE_PERCENTILE = 99.0
UNIFORM_SHADE = 0.5

POLYLINE_GROUPS = ('target', 'environment', 'map')


class ScoreModel(Protocol):
    """歸因需要的模型介面：分數與其對節點矩陣的梯度"""

    def score_and_gradient(self, graph: GraphInput, case: PredictionCase,
                           node_matrix: np.ndarray) -> Tuple[float, np.ndarray]:
        ...


@dataclass
class BaselineSpec:
    """baseline 產生參數：連續特徵加上 N(x̄_i, σ) 雜訊，離散特徵歸零"""
    sigma: float = DEFAULT_SIGMA
    feature_means: Optional[np.ndarray] = None  # 每欄訓練集平均
    seed: int = 0
    schema: FeatureSchema = field(default_factory=FeatureSchema.default)
    global_mean: float = 0.0  # 全高斯 baseline 使用

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.feature_means is None:
            self.feature_means = np.zeros(self.schema.width)
        self.feature_means = np.asarray(self.feature_means, dtype=np.float64)
        if self.feature_means.shape != (self.schema.width,):
            raise ValueError(f"feature_means must have shape ({self.schema.width},)")
        if not np.all(np.isfinite(self.feature_means)) or not np.isfinite(self.global_mean):
            raise ValueError("feature means must be finite")

    def with_sigma(self, sigma: float) -> 'BaselineSpec':
        return BaselineSpec(sigma, self.feature_means.copy(), self.seed, self.schema,
                            self.global_mean)

    @classmethod
    def from_training(cls, cases: Sequence[PredictionCase], sigma: float = DEFAULT_SIGMA,
                      seed: int = 0, schema: Optional[FeatureSchema] = None) -> 'BaselineSpec':
        schema = schema or FeatureSchema.default()
        means, global_mean = compute_feature_means(cases, schema)
        return cls(sigma, means, seed, schema, global_mean)


def compute_feature_means(cases: Sequence[PredictionCase],
                          schema: Optional[FeatureSchema] = None) -> Tuple[np.ndarray, float]:
    """
    訓練集節點矩陣的逐欄平均（離散欄設為 0）與整體平均

    Returns:
        (feature_means, global_mean)
    """
    schema = schema or FeatureSchema.default()
    if not cases:
        raise ValueError("cannot compute feature means over an empty training set")
    matrix = np.vstack([build_graph_input(c, schema).node_matrix for c in cases])
    means = matrix.mean(axis=0)
    means[schema.discrete_mask()] = 0.0
    return means, float(matrix.mean())


def _baseline_rng(spec: BaselineSpec, case_key: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed, zlib.crc32(case_key.encode('utf-8'))])


def make_baseline(graph: GraphInput, spec: BaselineSpec, case_key: str = "") -> np.ndarray:
    """
    混合 baseline：type one-hot 與 polyline id 歸零（無效類型 / 不存在），
    連續群組為 x_i + ε_i，ε_i ~ N(x̄_i, σ)；輸入矩陣不變
    """
    x = graph.node_matrix
    noise = _baseline_rng(spec, case_key).normal(
        loc=spec.feature_means, scale=spec.sigma, size=x.shape)
    baseline = x + noise
    baseline[:, spec.schema.discrete_mask()] = 0.0
    return baseline


def zero_baseline(graph: GraphInput) -> np.ndarray:
    return np.zeros_like(graph.node_matrix)


def gaussian_baseline(graph: GraphInput, spec: BaselineSpec, case_key: str = "") -> np.ndarray:
    """每個元素都取自同一個 N(μ, σ)，μ 為訓練節點矩陣的整體平均"""
    return _baseline_rng(spec, case_key).normal(
        loc=spec.global_mean, scale=spec.sigma, size=graph.node_matrix.shape)


def nmse_score(prediction: np.ndarray, future_truth: np.ndarray, mask: np.ndarray) -> float:
    """-(1/T) Σ ‖p̂_t − p_t‖²，只計有效幀；恆 <= 0，完美預測為 0"""
    mask = np.asarray(mask, dtype=bool)
    valid = int(mask.sum())
    if valid == 0:
        raise ValueError("nmse_score: mask selects no frames")
    diff = np.asarray(prediction, dtype=np.float64)[mask] - np.asarray(future_truth)[mask]
    return -float((diff ** 2).sum()) / valid


@dataclass
class AttributionResult:
    """逐節點、逐特徵的 IG 矩陣與完備性診斷"""
    case_key: str
    ig: np.ndarray  # (N, F)
    score_input: float
    score_baseline: float
    steps: int
    completeness_gap: float
    node_polyline_index: np.ndarray
    polyline_kinds: Tuple[PolylineKind, ...]
    polyline_ids: Tuple[int, ...]
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not np.all(np.isfinite(self.ig)):
            raise NumericFailureError(f"non-finite attribution for case {self.case_key}")

    @property
    def score_delta(self) -> float:
        return self.score_input - self.score_baseline

    @property
    def relative_gap(self) -> float:
        delta = abs(self.score_delta)
        return self.completeness_gap / delta if delta > 0 else float('nan')

    @property
    def node_polyline_ids(self) -> np.ndarray:
        return np.asarray(self.polyline_ids)[self.node_polyline_index]


def integrate_path(score_and_gradient, x: np.ndarray, baseline: np.ndarray,
                   m: int) -> np.ndarray:
    """
    右端點 Riemann 和：(x - x') * (1/m) Σ_{k=1..m} ∇F(x' + k/m (x - x'))

    梯度依 k 順序累加，結果與執行環境無關。
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if x.shape != baseline.shape:
        raise ValueError(f"baseline shape {baseline.shape} != input shape {x.shape}")
    delta = x - baseline
    total = np.zeros_like(x, dtype=np.float64)
    for k in range(1, m + 1):
        point = baseline + (k / m) * delta
        try:
            _, grad = score_and_gradient(point)
        except NumericFailureError as exc:
            raise NumericFailureError(f"integrated gradients step k={k}: {exc}") from exc
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise NumericFailureError(f"non-finite gradient at integrated gradients step k={k}")
        total += grad
    return delta * total / m


def integrated_gradients(model: ScoreModel, case: PredictionCase,
                         spec: Optional[BaselineSpec] = None, m: int = DEFAULT_STEPS,
                         baseline: Optional[np.ndarray] = None,
                         graph: Optional[GraphInput] = None) -> AttributionResult:
    """
    計算單一樣本的 IG

    Args:
        model: 提供 score_and_gradient 的模型
        case: 正規化後的樣本
        spec: baseline 參數；提供 baseline 矩陣時只用到 sigma
        m: Riemann 步數
        baseline: 直接指定 baseline 矩陣
        graph: 已建好的圖輸入

    Returns:
        AttributionResult
    """
    spec = spec or BaselineSpec()
    graph = graph or build_graph_input(case, spec.schema)
    x = np.array(graph.node_matrix, dtype=np.float64)
    x_base = make_baseline(graph, spec, case.case_key) if baseline is None else np.asarray(baseline)

    def fn(point):
        return model.score_and_gradient(graph, case, point)

    ig = integrate_path(fn, x, x_base, m)
    score_input = float(fn(x)[0])
    score_baseline = float(fn(x_base)[0])
    gap = abs(float(ig.sum()) - (score_input - score_baseline))

    result = AttributionResult(
        case_key=case.case_key,
        ig=ig,
        score_input=score_input,
        score_baseline=score_baseline,
        steps=m,
        completeness_gap=gap,
        node_polyline_index=graph.node_polyline_index,
        polyline_kinds=graph.polyline_kinds,
        polyline_ids=graph.polyline_ids,
        sigma=spec.sigma,
    )
    logger.debug(f"IG {case.case_key}: F(x)={score_input:.4f} F(x')={score_baseline:.4f} "
                 f"gap={gap:.3e} (m={m})")
    return result


# ========== 彙總 ==========

@dataclass
class VectorRelevance:
    """逐節點相關度與第 99 百分位數正規化後的著色值"""
    relevance: np.ndarray
    normalizer: float
    shade: np.ndarray


def aggregate_by_vector(result: AttributionResult,
                        percentile: float = SHADE_PERCENTILE) -> VectorRelevance:
    """relevance = |Σ_features ig|；著色以百分位數截斷，正規化值為 0 時改用均勻著色"""
    relevance = np.abs(result.ig.sum(axis=1))
    normalizer = float(np.percentile(relevance, percentile)) if relevance.size else 0.0
    if normalizer > 0:
        shade = np.clip(relevance / normalizer, 0.0, 1.0)
    else:
        shade = np.full_like(relevance, UNIFORM_SHADE)
    return VectorRelevance(relevance, normalizer, shade)


def _percentages(masses: Dict[str, float]) -> Dict[str, float]:
    total = sum(masses.values())
    if total <= 0:
        return {k: 0.0 for k in masses}
    return {k: 100.0 * v / total for k, v in masses.items()}


def _polyline_group(kind: PolylineKind) -> str:
    if kind is PolylineKind.TARGET_TRAJECTORY:
        return 'target'
    if kind is PolylineKind.AGENT_TRAJECTORY:
        return 'environment'
    return 'map'


def aggregate_by_polyline_type(result: AttributionResult) -> Dict[str, float]:
    """目標軌跡 : 其他參與者軌跡 : 地圖 的 |ig| 百分比"""
    node_mass = np.abs(result.ig).sum(axis=1)
    masses = {g: 0.0 for g in POLYLINE_GROUPS}
    for j, kind in enumerate(result.polyline_kinds):
        masses[_polyline_group(kind)] += float(node_mass[result.node_polyline_index == j].sum())
    return _percentages(masses)


def aggregate_by_feature_group(result: AttributionResult,
                               schema: Optional[FeatureSchema] = None) -> Dict[str, float]:
    """各特徵群組 (origin, destination, type, state, id) 的 |ig| 百分比"""
    schema = schema or FeatureSchema.default()
    if result.ig.shape[1] != schema.width:
        raise ValueError(f"schema width {schema.width} != attribution width {result.ig.shape[1]}")
    column_mass = np.abs(result.ig).sum(axis=0)
    return _percentages({name: float(column_mass[start:stop].sum())
                         for name, start, stop, _ in schema.groups})


def aggregate_by_polyline(result: AttributionResult) -> pd.DataFrame:
    """逐 polyline 的 |ig| 占比"""
    node_mass = np.abs(result.ig).sum(axis=1)
    mass = np.array([node_mass[result.node_polyline_index == j].sum()
                     for j in range(len(result.polyline_ids))])
    total = mass.sum()
    share = mass / total if total > 0 else np.zeros_like(mass)
    return pd.DataFrame({
        'polyline_id': list(result.polyline_ids),
        'kind': [k.value for k in result.polyline_kinds],
        'group': [_polyline_group(k) for k in result.polyline_kinds],
        'share': 100.0 * share,
    })


def concentration_index(result: AttributionResult) -> float:
    """polyline 占比的 Herfindahl 指數 Σ s_j²；接近 1 表示歸因集中在少數 polyline"""
    share = aggregate_by_polyline(result)['share'].to_numpy() / 100.0
    return float((share ** 2).sum())


def average_ratios(results: Sequence[AttributionResult],
                   schema: Optional[FeatureSchema] = None) -> pd.DataFrame:
    """逐樣本比例表，最後一列 'mean' 為跨樣本平均"""
    rows = []
    for r in results:
        row = {'case_key': r.case_key}
        row.update(aggregate_by_polyline_type(r))
        row.update({f"feature_{k}": v for k, v in aggregate_by_feature_group(r, schema).items()})
        row['concentration'] = concentration_index(r)
        rows.append(row)
    frame = pd.DataFrame(rows)
    if not frame.empty:
        mean_row = frame.drop(columns=['case_key']).mean(numeric_only=True)
        mean_row['case_key'] = 'mean'
        frame = pd.concat([frame, mean_row.to_frame().T], ignore_index=True)
    return frame


def attribution_frame(results: Sequence[AttributionResult]) -> pd.DataFrame:
    """CSV 傾印：case_key,polyline_id,node_index,feature_index,ig"""
    frames = []
    for r in results:
        n, f = r.ig.shape
        frames.append(pd.DataFrame({
            'case_key': r.case_key,
            'polyline_id': np.repeat(r.node_polyline_ids, f),
            'node_index': np.repeat(np.arange(n), f),
            'feature_index': np.tile(np.arange(f), n),
            'ig': r.ig.reshape(-1),
        }))
    columns = ['case_key', 'polyline_id', 'node_index', 'feature_index', 'ig']
    return pd.concat(frames, ignore_index=True)[columns] if frames else pd.DataFrame(columns=columns)


# ========== baseline 掃描 ==========

def _score(model, graph: GraphInput, case: PredictionCase, matrix: np.ndarray) -> float:
    if hasattr(model, 'predict_graph'):
        return nmse_score(model.predict_graph(graph, matrix), case.future_truth, case.future_mask)
    return float(model.score_and_gradient(graph, case, matrix)[0])


def baseline_sweep(model, cases: Sequence[PredictionCase], sigmas: Sequence[float],
                   spec: Optional[BaselineSpec] = None) -> pd.DataFrame:
    """
    各 σ 下四條曲線的平均 NMSE：實際輸入、本方法 baseline、全零、全高斯

    有效的 baseline 應讓模型分數明顯低於實際輸入。
    """
    if len(sigmas) == 0:
        raise ValueError("sigmas must be non-empty")
    if not cases:
        raise ValueError("baseline sweep needs at least one case")
    spec = spec or BaselineSpec()
    graphs = [build_graph_input(c, spec.schema) for c in cases]

    actual = float(np.mean([_score(model, g, c, g.node_matrix) for g, c in zip(graphs, cases)]))
    all_zero = float(np.mean([_score(model, g, c, zero_baseline(g))
                              for g, c in zip(graphs, cases)]))
    rows = []
    for sigma in sigmas:
        sigma_spec = spec.with_sigma(float(sigma))
        proposed = np.mean([_score(model, g, c, make_baseline(g, sigma_spec, c.case_key))
                            for g, c in zip(graphs, cases)])
        gaussian = np.mean([_score(model, g, c, gaussian_baseline(g, sigma_spec, c.case_key))
                            for g, c in zip(graphs, cases)])
        rows.append({'sigma': float(sigma), 'actual': actual, 'proposed': float(proposed),
                     'all_zero': all_zero, 'all_gaussian': float(gaussian)})
        logger.info(f"sweep sigma={sigma}: actual={actual:.3f} proposed={proposed:.3f} "
                    f"zero={all_zero:.3f} gaussian={gaussian:.3f}")
    return pd.DataFrame(rows, columns=['sigma', 'actual', 'proposed', 'all_zero', 'all_gaussian'])


class AttributionAnalyzer:
    """
    歸因分析器

    功能包括：
    - 逐樣本 IG（可跨樣本平行）
    - 目標 / 環境 / 地圖比例與特徵群組比例
    - polyline 集中度（過度依賴少數 polyline 的指標）
    """

    def __init__(self, config: Dict[str, Any], feature_means: Optional[np.ndarray] = None,
                 global_mean: float = 0.0):
        self.config = config
        self.steps = int(config.get('steps', DEFAULT_STEPS))
        self.max_cases = config.get('max_cases')
        self.spec = BaselineSpec(
            sigma=float(config.get('sigma', DEFAULT_SIGMA)),
            feature_means=feature_means,
            seed=int(config.get('seed', 0)),
            global_mean=global_mean,
        )
        self.logger = logging.getLogger('AttributionAnalyzer')

    def analyze(self, model: ScoreModel, cases: Sequence[PredictionCase],
                n_jobs: int = 1) -> List[AttributionResult]:
        selected = list(cases)[:self.max_cases] if self.max_cases else list(cases)
        results = Parallel(n_jobs=n_jobs)(
            delayed(integrated_gradients)(model, c, self.spec, self.steps) for c in selected
        )
        self.logger.info(f"integrated gradients computed for {len(results)} cases (m={self.steps})")
        return list(results)

    def generate_attribution_report(self, results: Sequence[AttributionResult]) -> Dict[str, Any]:
        """逐樣本完備性、比例與集中度，加上跨樣本平均"""
        ratios = average_ratios(results, self.spec.schema)
        per_case = []
        for r in results:
            per_case.append({
                'case_key': r.case_key,
                'score_input': r.score_input,
                'score_baseline': r.score_baseline,
                'completeness_gap': r.completeness_gap,
                'relative_gap': None if np.isnan(r.relative_gap) else r.relative_gap,
                'polyline_type': aggregate_by_polyline_type(r),
                'feature_group': aggregate_by_feature_group(r, self.spec.schema),
                'concentration': concentration_index(r),
            })
        mean = ratios.iloc[-1].drop('case_key').astype(float).to_dict() if results else {}
        return {
            'sigma': self.spec.sigma,
            'steps': self.steps,
            'seed': self.spec.seed,
            'case_count': len(results),
            'cases': per_case,
            'mean': mean,
        }
