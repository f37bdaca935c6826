"""
評估引擎
Evaluation - minADE / minFDE / Miss Rate 指標，以及跨場景泛化矩陣

單一模態預測下，每個樣本的 min 只針對一個假設；報表對樣本取平均。
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from data_ingest import DatasetSplit
from predictor import BaseTrajectoryModel, ModelConfig, ModelParams, TrainConfig, VectorNetPredictor
from scenario_core import PredictionCase

logger = logging.getLogger(__name__)

LATERAL_THRESHOLD = 1.0
METRIC_NAMES = ('minADE', 'minFDE', 'MR')


@dataclass
class MetricsReport:
    """評估指標"""
    min_ade: float  # 公尺
    min_fde: float  # 公尺
    miss_rate: float  # [0, 1]
    case_count: int

    def __post_init__(self):
        if self.min_ade < 0 or self.min_fde < 0 or not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError(f"invalid metrics {self}")

    def to_dict(self) -> Dict[str, float]:
        return {'minADE': self.min_ade, 'minFDE': self.min_fde,
                'MR': self.miss_rate, 'case_count': self.case_count}


def _as_batch(predictions, truths, masks=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    preds = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truths, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] == 0:
        raise ValueError("empty batch")
    if preds.shape != truth.shape or preds.shape[-1] != 2:
        raise ValueError(f"prediction shape {preds.shape} != truth shape {truth.shape}")
    mask = (np.ones(preds.shape[:2], dtype=bool) if masks is None
            else np.asarray(masks, dtype=bool))
    if mask.shape != preds.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match {preds.shape[:2]}")
    if not mask.any(axis=1).all():
        raise ValueError("every case needs at least one valid frame")
    return preds, truth, mask


def _last_valid_index(mask: np.ndarray) -> np.ndarray:
    return mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)


def min_ade(predictions, truths, masks=None) -> float:
    """每個樣本在有效幀上的平均位移誤差，再對樣本取平均"""
    preds, truth, mask = _as_batch(predictions, truths, masks)
    disp = np.linalg.norm(preds - truth, axis=-1)
    per_case = (disp * mask).sum(axis=1) / mask.sum(axis=1)
    return float(per_case.mean())


def final_displacement(predictions, truths, masks=None) -> np.ndarray:
    """最後一個有效幀的位移向量 (n, 2)"""
    preds, truth, mask = _as_batch(predictions, truths, masks)
    rows = np.arange(preds.shape[0])
    last = _last_valid_index(mask)
    return preds[rows, last] - truth[rows, last]


def min_fde(predictions, truths, masks=None) -> float:
    return float(np.linalg.norm(final_displacement(predictions, truths, masks), axis=-1).mean())


def longitudinal_threshold(speed):
    """縱向門檻：v < 1.4 為 1 m，1.4 到 11 之間線性，v > 11 為 2 m"""
    return np.clip(1.0 + (np.asarray(speed, dtype=np.float64) - 1.4) / 9.6, 1.0, 2.0)


def miss_flags(predictions, truths, final_speeds, final_headings, masks=None,
               threshold_scale: float = 1.0) -> np.ndarray:
    """
    逐樣本判斷是否 miss

    最後有效幀誤差轉到真值航向座標系：縱軸沿航向，橫向門檻 1 m，
    縱向門檻依最後真值速度決定；threshold_scale 同時放大兩個門檻。
    """
    error = final_displacement(predictions, truths, masks)
    psi = np.asarray(final_headings, dtype=np.float64)
    speeds = np.asarray(final_speeds, dtype=np.float64)
    if psi.shape != (error.shape[0],) or speeds.shape != psi.shape:
        raise ValueError("final_speeds and final_headings need one value per case")
    c, s = np.cos(psi), np.sin(psi)
    lon = c * error[:, 0] + s * error[:, 1]
    lat = -s * error[:, 0] + c * error[:, 1]
    return ((np.abs(lat) > LATERAL_THRESHOLD * threshold_scale)
            | (np.abs(lon) > longitudinal_threshold(speeds) * threshold_scale))


def miss_rate(predictions, truths, final_speeds, final_headings, masks=None,
              threshold_scale: float = 1.0) -> float:
    flags = miss_flags(predictions, truths, final_speeds, final_headings, masks, threshold_scale)
    return float(flags.mean())


def evaluate_predictions(predictions: Sequence[np.ndarray],
                         cases: Sequence[PredictionCase]) -> MetricsReport:
    """以樣本真值計算三項指標"""
    if not cases:
        raise ValueError("empty batch")
    truths = np.stack([c.future_truth for c in cases])
    masks = np.stack([c.future_mask for c in cases])
    speeds = np.array([c.final_speed for c in cases])
    headings = np.array([c.final_heading for c in cases])
    preds = np.asarray(predictions, dtype=np.float64)
    return MetricsReport(
        min_ade=min_ade(preds, truths, masks),
        min_fde=min_fde(preds, truths, masks),
        miss_rate=miss_rate(preds, truths, speeds, headings, masks),
        case_count=len(cases),
    )


def evaluate_model(model: BaseTrajectoryModel,
                   cases: Sequence[PredictionCase]) -> Tuple[MetricsReport, np.ndarray]:
    predictions = model.predict_many(cases)
    return evaluate_predictions(predictions, cases), predictions


# ========== 跨場景矩陣 ==========

@dataclass
class CrossScenarioMatrix:
    """
    (訓練場景 × 測試場景) 指標矩陣

    每格保存各指標跨 seed 的 mean 與 std（母體標準差）；對角線為同場景基準。
    訓練失敗的列記錄在 failures，該列所有格為 None。
    """
    scenarios: List[str]
    seeds: List[int]
    cells: Dict[Tuple[str, str], Optional[Dict[str, Dict[str, float]]]] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)

    def cell(self, train: str, test: str) -> Optional[Dict[str, Dict[str, float]]]:
        return self.cells.get((train, test))

    def is_diagonal(self, train: str, test: str) -> bool:
        return train == test

    def to_dict(self) -> Dict:
        grid = {}
        for train in self.scenarios:
            grid[train] = {test: self.cells.get((train, test)) for test in self.scenarios}
        return {
            'scenarios': list(self.scenarios),
            'seeds': list(self.seeds),
            'diagonal': [[s, s] for s in self.scenarios],
            'cells': grid,
            'failures': dict(self.failures),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_frame(self) -> pd.DataFrame:
        """試算表用的扁平表格"""
        rows = []
        for train in self.scenarios:
            for test in self.scenarios:
                row = {'train': train, 'test': test,
                       'in_distribution': train == test,
                       'status': 'failed' if train in self.failures else 'ok'}
                cell = self.cells.get((train, test))
                for metric in METRIC_NAMES:
                    row[f"{metric}_mean"] = cell[metric]['mean'] if cell else np.nan
                    row[f"{metric}_std"] = cell[metric]['std'] if cell else np.nan
                rows.append(row)
        return pd.DataFrame(rows)

    def generalization_gap(self) -> pd.DataFrame:
        """每個非對角格相對測試場景自身基準的指標增量"""
        rows = []
        for train in self.scenarios:
            for test in self.scenarios:
                if train == test:
                    continue
                cell = self.cells.get((train, test))
                bench = self.cells.get((test, test))
                row = {'train': train, 'test': test}
                for metric in METRIC_NAMES:
                    row[f"delta_{metric}"] = (cell[metric]['mean'] - bench[metric]['mean']
                                              if cell and bench else np.nan)
                rows.append(row)
        return pd.DataFrame(rows, columns=['train', 'test'] + [f"delta_{m}" for m in METRIC_NAMES])

    def average_miss_rate(self) -> pd.Series:
        """每個訓練場景在所有測試場景上的平均 MR"""
        values = {}
        for train in self.scenarios:
            rates = [self.cells[(train, t)]['MR']['mean'] for t in self.scenarios
                     if self.cells.get((train, t))]
            values[train] = float(np.mean(rates)) if rates else np.nan
        return pd.Series(values, name='average_MR')


def _train_job(name: str, split: DatasetSplit, train_config: TrainConfig,
               model_config: ModelConfig) -> Tuple[str, int, Optional[ModelParams], Optional[str]]:
    try:
        model = VectorNetPredictor(config=model_config, seed=train_config.seed)
        model.fit(split.train, train_config)
        return name, train_config.seed, model.params, None
    except (ArithmeticError, ValueError) as exc:
        return name, train_config.seed, None, f"{type(exc).__name__}: {exc}"


class CrossScenarioEngine:
    """
    跨場景泛化驗證

    每個 (場景, seed) 在該場景訓練集上訓練一個模型，
    再於所有場景的測試集上評估。
    """

    def __init__(self, train_config: TrainConfig, seeds: Sequence[int],
                 model_config: Optional[ModelConfig] = None, n_jobs: int = 1):
        if not seeds:
            raise ValueError("need at least one seed")
        self.train_config = train_config
        self.seeds = [int(s) for s in seeds]
        self.model_config = model_config or ModelConfig()
        self.n_jobs = n_jobs
        self.logger = logging.getLogger('CrossScenarioEngine')

    def run(self, scenarios: Dict[str, DatasetSplit]) -> CrossScenarioMatrix:
        names = list(scenarios)
        if len(names) < 2:
            raise ValueError(f"need at least 2 scenarios, got {len(names)}")

        jobs = [(name, replace(self.train_config, seed=seed))
                for name in names for seed in self.seeds]
        results = Parallel(n_jobs=self.n_jobs)(
            delayed(_train_job)(name, scenarios[name], cfg, self.model_config)
            for name, cfg in jobs
        )

        matrix = CrossScenarioMatrix(scenarios=names, seeds=self.seeds)
        per_row: Dict[str, List[ModelParams]] = {name: [] for name in names}
        for name, seed, params, error in results:
            if error is not None:
                self.logger.error(f"training failed for scenario '{name}' seed {seed}: {error}")
                matrix.failures.setdefault(name, f"seed {seed}: {error}")
            else:
                per_row[name].append(params)

        for train in names:
            if train in matrix.failures:
                for test in names:
                    matrix.cells[(train, test)] = None
                continue
            models = [VectorNetPredictor(params=p) for p in per_row[train]]
            try:
                row = {test: self._aggregate([evaluate_model(m, scenarios[test].test)[0]
                                              for m in models])
                       for test in names}
            except (ArithmeticError, ValueError) as exc:
                self.logger.error(f"evaluation failed for row '{train}': {exc}")
                matrix.failures[train] = f"evaluation: {type(exc).__name__}: {exc}"
                row = {test: None for test in names}
            for test in names:
                matrix.cells[(train, test)] = row[test]
            self.logger.info(f"cross-scenario row '{train}' evaluated on {len(names)} scenarios")
        return matrix

    @staticmethod
    def _aggregate(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
        values = {
            'minADE': [r.min_ade for r in reports],
            'minFDE': [r.min_fde for r in reports],
            'MR': [r.miss_rate for r in reports],
        }
        return {metric: {'mean': float(np.mean(v)), 'std': float(np.std(v))}
                for metric, v in values.items()}


def cross_scenario(scenarios: Dict[str, DatasetSplit], train_config: TrainConfig,
                   seeds: Sequence[int], model_config: Optional[ModelConfig] = None,
                   n_jobs: int = 1) -> CrossScenarioMatrix:
    return CrossScenarioEngine(train_config, seeds, model_config, n_jobs).run(scenarios)
