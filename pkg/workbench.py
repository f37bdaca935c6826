"""
向量化軌跡預測工作台 - 主系統整合器
VecProbe Workbench - 把資料匯入、訓練、評估、跨場景驗證、歸因、baseline 掃描、
渲染與合成場景串成可重現的執行

每個指令寫出自己的產物與一份執行 manifest（設定雜湊、種子、套件版本），
相同設定與種子會產生逐位元相同的數值產物；指令失敗時移除已寫出的部分產物。
"""

import json
import logging
import platform
from dataclasses import dataclass, field
from enum import Enum
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import joblib
import pandas as pd

from attribution import (
    AttributionAnalyzer, BaselineSpec, attribution_frame, baseline_sweep, integrated_gradients,
)
from data_ingest import DatasetSplit, build_cases, load_scenario, split_dataset
from evaluation import cross_scenario, evaluate_model, evaluate_predictions
from predictor import ModelConfig, TrainConfig, VectorNetPredictor
from scenario_core import build_graph_input
from synthetic_oracle import SynthKind, SynthSpec, constant_velocity_predict, generate
from system_config import ConfigManager, RunConfig, derive_seed

DATASET_FORMAT_VERSION = 1
COMMANDS = ('synth', 'ingest', 'train', 'evaluate', 'cross', 'attribute', 'sweep', 'render')
VERSIONED_PACKAGES = ('numpy', 'pandas', 'scipy', 'scikit-learn', 'joblib',
                      'matplotlib', 'pydantic', 'PyYAML')


class RunStatus(Enum):
    """執行狀態枚舉"""
    IDLE = "idle"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class RunRecord:
    """單一指令的執行紀錄"""
    command: str
    status: RunStatus = RunStatus.IDLE
    artifacts: List[Path] = field(default_factory=list)
    error: Optional[str] = None


def model_config_from(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        hidden_dim=cfg.model.hidden_dim,
        num_layers=cfg.model.num_layers,
        t_h=cfg.horizons.t_h,
        t_f=cfg.horizons.t_f,
        num_heads=cfg.model.num_heads,
        layer_norm=cfg.model.layer_norm,
    )


def train_config_from(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **cfg.train.model_dump())


def synth_spec_from(cfg: RunConfig, kind: Optional[str] = None,
                    seed: Optional[int] = None) -> SynthSpec:
    s = cfg.synth
    return SynthSpec(
        kind=SynthKind(kind or s.kind),
        agent_count=s.agent_count,
        speed_range=(s.speed_min, s.speed_max),
        duration_frames=s.duration_frames,
        noise_std=s.noise_std,
        seed=derive_seed(cfg.seed, 'synth') if seed is None else seed,
        recording_count=s.recording_count,
        curve_radius=s.curve_radius,
    )


def package_versions() -> Dict[str, str]:
    versions = {'python': platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'unavailable'
    return versions


def _dump_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


class VecProbeWorkbench:
    """工作台主整合器，一個指令對應一個方法"""

    def __init__(self, config_manager: ConfigManager):
        self.config_manager = config_manager
        self.config = config_manager.config
        self.logger = logging.getLogger(__name__)
        self.status = RunStatus.IDLE
        self.history: List[RunRecord] = []
        self._record: Optional[RunRecord] = None
        self.callbacks: Dict[str, List[Callable]] = {'status_change': [], 'artifact': []}

    # ========== 狀態與回調 ==========

    def add_callback(self, event_type: str, callback: Callable):
        if event_type not in self.callbacks:
            raise ValueError(f"unknown event type '{event_type}'")
        self.callbacks[event_type].append(callback)

    def _notify(self, event_type: str, data: Any):
        for callback in self.callbacks[event_type]:
            try:
                callback(data)
            except Exception as exc:
                self.logger.error(f"callback for '{event_type}' failed: {exc}")

    def _set_status(self, status: RunStatus):
        self.status = status
        if self._record is not None:
            self._record.status = status
        self._notify('status_change', status)

    # ========== 產物 ==========

    @property
    def output_dir(self) -> Path:
        return self.config.output_dir

    def _artifact(self, name: Union[str, Path]) -> Path:
        """登記產物；Path 照原樣使用（可在 output_dir 之外），字串相對於 output_dir"""
        path = name if isinstance(name, Path) else self.output_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if self._record is not None:
            self._record.artifacts.append(path)
        self._notify('artifact', path)
        return path

    def _write_text(self, name: str, text: str) -> Path:
        path = self._artifact(name)
        path.write_text(text, encoding='utf-8')
        return path

    def _write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        return self._write_text(name, frame.to_csv(index=False))

    def _cleanup(self, record: RunRecord):
        for path in record.artifacts:
            if path.exists():
                path.unlink()
                self.logger.warning(f"removed partial artifact {path}")

    def _manifest_name(self, path: Path) -> str:
        try:
            return str(path.relative_to(self.output_dir))
        except ValueError:
            return str(path)

    def _write_manifest(self, command: str, extra: Optional[Dict[str, Any]] = None):
        record = self._record
        artifacts = sorted(self._manifest_name(p) for p in record.artifacts)
        payload = {
            'command': command,
            'config_hash': self.config_manager.config_hash(),
            'seed': self.config.seed,
            'versions': package_versions(),
            'artifacts': artifacts,
        }
        payload.update(extra or {})
        self._write_text(f"{command}_manifest.json", _dump_json(payload))

    def run(self, command: str) -> RunRecord:
        """執行單一指令；失敗時移除部分產物並重新拋出例外"""
        if command not in COMMANDS:
            raise ValueError(f"unknown command '{command}', expected one of {COMMANDS}")
        self._record = RunRecord(command)
        self.history.append(self._record)
        self._set_status(RunStatus.RUNNING)
        self.logger.info(f"running '{command}' (seed={self.config.seed}, out={self.output_dir})")
        try:
            extra = getattr(self, f"cmd_{command}")()
            self._write_manifest(command, extra)
        except BaseException as exc:
            self._record.error = f"{type(exc).__name__}: {exc}"
            self._cleanup(self._record)
            self._set_status(RunStatus.FAILED)
            raise
        self._set_status(RunStatus.COMPLETED)
        record, self._record = self._record, None
        return record

    # ========== 資料與模型 ==========

    def _ingest_split(self) -> DatasetSplit:
        cfg = self.config
        return load_scenario(
            cfg.paths.tracks, cfg.paths.map,
            t_h=cfg.horizons.t_h, t_f=cfg.horizons.t_f, stride=cfg.horizons.stride,
            test_fraction=cfg.split.test_fraction, seed=derive_seed(cfg.seed, 'split'),
            n_jobs=cfg.jobs,
        )

    def load_split(self) -> DatasetSplit:
        path = self.config.dataset_path
        if not path.exists():
            self.logger.info(f"dataset cache {path} missing, ingesting raw files")
            return self._ingest_split()
        payload = joblib.load(path)
        if payload.get('format_version') != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset cache format in {path}")
        return payload['split']

    def load_model(self) -> VectorNetPredictor:
        return VectorNetPredictor.load_model(self.config.checkpoint_path)

    def _baseline_spec(self, split: DatasetSplit) -> BaselineSpec:
        cfg = self.config
        return BaselineSpec.from_training(split.train, sigma=cfg.attribution.sigma,
                                          seed=derive_seed(cfg.seed, 'baseline'))

    def _selected_test_cases(self, split: DatasetSplit, limit: int):
        if not split.test:
            raise ValueError("test split is empty")
        return split.test[:limit]

    # ========== 指令 ==========

    def cmd_synth(self) -> Dict[str, Any]:
        scenario = generate(synth_spec_from(self.config))
        for name, text in (('tracks.csv', scenario.csv_text),
                           ('map.json', scenario.map_text),
                           ('manifest.json', scenario.manifest_text)):
            self._write_text(f"scenario/{name}", text)
        return {'scenario': scenario.manifest}

    def cmd_ingest(self) -> Dict[str, Any]:
        split = self._ingest_split()
        path = self._artifact(self.config.dataset_path)
        joblib.dump({'format_version': DATASET_FORMAT_VERSION, 'split': split}, path)
        summary = split.summary()
        self._write_text('dataset_summary.json', _dump_json(summary))
        return {'dataset': summary}

    def cmd_train(self) -> Dict[str, Any]:
        cfg = self.config
        split = self.load_split()
        seed = derive_seed(cfg.seed, 'train')
        model = VectorNetPredictor(config=model_config_from(cfg), seed=seed)
        model.fit(split.train, train_config_from(cfg, seed))
        path = self._artifact(cfg.checkpoint_path)
        model.save_model(path)
        self._write_frame('loss_history.csv', model.training_history)
        return {'train_seed': seed, 'final_loss': float(model.training_history['loss'].iloc[-1])}

    def cmd_evaluate(self) -> Dict[str, Any]:
        split = self.load_split()
        model = self.load_model()
        cases = self._selected_test_cases(split, len(split.test))
        report, _ = evaluate_model(model, cases)
        reference = evaluate_predictions([constant_velocity_predict(c) for c in cases], cases)
        metrics = {
            'scenario': split.scenario_name,
            'split': 'test',
            'model': report.to_dict(),
            'constant_velocity': reference.to_dict(),
        }
        self._write_text('metrics.json', _dump_json(metrics))
        self.logger.info(f"test metrics: {report.to_dict()}")
        return {'metrics': report.to_dict()}

    def cmd_cross(self) -> Dict[str, Any]:
        cfg = self.config
        split_seed = derive_seed(cfg.seed, 'split')
        scenarios: Dict[str, DatasetSplit] = {}
        if cfg.cross.scenarios:
            for directory in cfg.cross.scenarios:
                d = Path(directory)
                scenarios[d.name] = load_scenario(
                    d / 'tracks.csv', d / 'map.json', cfg.horizons.t_h, cfg.horizons.t_f,
                    cfg.horizons.stride, cfg.split.test_fraction, split_seed, d.name, cfg.jobs)
        else:
            for kind in cfg.cross.synthetic_kinds:
                generated = generate(synth_spec_from(cfg, kind))
                cases = build_cases(generated.tracks, generated.polylines, cfg.horizons.t_h,
                                    cfg.horizons.t_f, cfg.horizons.stride, cfg.jobs,
                                    scenario_name=kind, normalize=True)
                scenarios[kind] = split_dataset(cases, cfg.split.test_fraction, split_seed, kind)

        matrix = cross_scenario(scenarios, train_config_from(cfg, 0), cfg.cross.seeds,
                                model_config_from(cfg), n_jobs=cfg.jobs)
        self._write_text('cross_matrix.json', matrix.to_json())
        self._write_frame('cross_matrix.csv', matrix.to_frame())
        gap = matrix.generalization_gap()
        average = matrix.average_miss_rate()
        gap['train_average_MR'] = gap['train'].map(average)
        self._write_frame('generalization_gap.csv', gap)
        return {'failures': dict(matrix.failures)}

    def cmd_attribute(self) -> Dict[str, Any]:
        cfg = self.config
        split = self.load_split()
        model = self.load_model()
        spec = self._baseline_spec(split)
        analyzer = AttributionAnalyzer(
            {'sigma': spec.sigma, 'steps': cfg.attribution.steps,
             'seed': spec.seed, 'max_cases': cfg.attribution.max_cases},
            feature_means=spec.feature_means, global_mean=spec.global_mean)
        results = analyzer.analyze(model, self._selected_test_cases(split, cfg.attribution.max_cases),
                                   n_jobs=cfg.jobs)
        self._write_frame('attributions.csv', attribution_frame(results))
        report = analyzer.generate_attribution_report(results)
        self._write_text('attribution_summary.json', _dump_json(report))
        return {'attributed_cases': len(results)}

    def cmd_sweep(self) -> Dict[str, Any]:
        cfg = self.config
        split = self.load_split()
        model = self.load_model()
        cases = self._selected_test_cases(split, cfg.attribution.max_cases)
        frame = baseline_sweep(model, cases, cfg.attribution.sweep_sigmas, self._baseline_spec(split))
        self._write_frame('baseline_sweep.csv', frame)
        return {'sigmas': list(cfg.attribution.sweep_sigmas)}

    def cmd_render(self) -> Dict[str, Any]:
        from visualization import render_scene

        cfg = self.config
        split = self.load_split()
        model = self.load_model()
        spec = self._baseline_spec(split)
        rendered = []
        for case in self._selected_test_cases(split, cfg.render.max_cases):
            graph = build_graph_input(case, spec.schema)
            result = integrated_gradients(model, case, spec, cfg.attribution.steps, graph=graph)
            safe_key = case.case_key.replace('/', '_')
            render_scene(case, graph, result, model.predict_graph(graph),
                         self._artifact(f"scene_{safe_key}.svg"))
            rendered.append(case.case_key)
        return {'rendered_cases': rendered}


def get_workbench(config_path: Optional[str] = None, seed: Optional[int] = None,
                  output_dir: Optional[str] = None, jobs: Optional[int] = None) -> VecProbeWorkbench:
    """建立工作台（套用命令列覆寫）"""
    manager = ConfigManager(config_path)
    manager.apply_overrides(seed=seed, output_dir=output_dir, jobs=jobs)
    return VecProbeWorkbench(manager)
