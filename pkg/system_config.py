"""
系統配置管理
System Config - 扁平 YAML（點號分段鍵）載入、pydantic 驗證、種子分流與日誌設定

設定檔範例：
    train.batch_size: 64
    attribution.sigma: 10.0
    seed: 7
未知鍵一律視為錯誤，不會默默套用預設值。
"""

import hashlib
import json
import logging
import os
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

LOG_ENV_VAR = 'VECPROBE_LOG'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class ConfigError(ValueError):
    """設定錯誤（退出碼 2）"""
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class PathsConfig(_Section):
    """檔案路徑；checkpoint 與 dataset 預設放在 output_dir 之下"""
    tracks: Optional[str] = None
    map: Optional[str] = None
    output_dir: str = 'runs'
    checkpoint: Optional[str] = None
    dataset: Optional[str] = None


class HorizonsConfig(_Section):
    t_h: int = Field(10, ge=2)
    t_f: int = Field(30, ge=1)
    hz: int = 10
    stride: Optional[int] = Field(None, ge=1)  # 預設等於 t_h
    max_seg_len: float = Field(2.0, gt=0)

    @field_validator('hz')
    @classmethod
    def _fixed_rate(cls, value: int) -> int:
        if value != 10:
            raise ValueError('only 10 Hz recordings are supported')
        return value


class ModelSection(_Section):
    hidden_dim: int = Field(64, ge=2)
    num_layers: int = Field(3, ge=1)
    num_heads: int = 1
    layer_norm: bool = True

    @field_validator('num_heads')
    @classmethod
    def _single_head(cls, value: int) -> int:
        if value != 1:
            raise ValueError('only single-head attention is supported')
        return value

    @field_validator('hidden_dim')
    @classmethod
    def _even_width(cls, value: int) -> int:
        if value % 2:
            raise ValueError('hidden_dim must be even')
        return value


class TrainSection(_Section):
    batch_size: int = Field(64, ge=1)
    initial_lr: float = Field(1e-3, gt=0)
    lr_decay_factor: float = Field(0.3, gt=0, le=1)
    decay_every_epochs: int = Field(5, ge=1)
    epoch_count: int = Field(30, ge=1)


class AttributionSection(_Section):
    sigma: float = Field(10.0, ge=0)
    steps: int = Field(64, ge=1)
    max_cases: int = Field(20, ge=1)
    sweep_sigmas: List[float] = Field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0, 40.0, 50.0])

    @field_validator('sweep_sigmas')
    @classmethod
    def _non_empty(cls, value: List[float]) -> List[float]:
        if not value or any(s < 0 for s in value):
            raise ValueError('sweep_sigmas must be a non-empty list of non-negative values')
        return value


class SplitSection(_Section):
    test_fraction: float = Field(0.2, gt=0, lt=1)


class SynthSection(_Section):
    kind: str = 'straight-lane'
    agent_count: int = Field(4, ge=1)
    speed_min: float = Field(4.0, ge=0)
    speed_max: float = Field(6.0, ge=0)
    duration_frames: int = Field(50, ge=11)
    noise_std: float = Field(0.0, ge=0)
    recording_count: int = Field(8, ge=1)
    curve_radius: float = Field(20.0, gt=0)


class CrossSection(_Section):
    scenarios: List[str] = Field(default_factory=list)  # 場景目錄（含 tracks.csv / map.json）
    synthetic_kinds: List[str] = Field(default_factory=lambda: ['straight-lane', 'curved-lane'])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])


class RenderSection(_Section):
    max_cases: int = Field(5, ge=1)


class RunConfig(_Section):
    """一次執行的完整設定，所有預設值皆在此定義"""
    paths: PathsConfig = Field(default_factory=PathsConfig)
    horizons: HorizonsConfig = Field(default_factory=HorizonsConfig)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    attribution: AttributionSection = Field(default_factory=AttributionSection)
    split: SplitSection = Field(default_factory=SplitSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    cross: CrossSection = Field(default_factory=CrossSection)
    render: RenderSection = Field(default_factory=RenderSection)
    seed: int = Field(0, ge=0)
    jobs: int = Field(1, ge=1)

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.paths.checkpoint) if self.paths.checkpoint else self.output_dir / 'model.joblib'

    @property
    def dataset_path(self) -> Path:
        return Path(self.paths.dataset) if self.paths.dataset else self.output_dir / 'dataset.joblib'


def expand_dotted(flat: Dict[str, Any]) -> Dict[str, Any]:
    """{'train.batch_size': 8} -> {'train': {'batch_size': 8}}"""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if not isinstance(key, str):
            raise ConfigError(f"config keys must be strings, got {key!r}")
        parts = key.split('.')
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
            if not isinstance(cursor, dict):
                raise ConfigError(f"config key '{key}' conflicts with a scalar value")
        if isinstance(value, dict):
            cursor.setdefault(parts[-1], {}).update(expand_dotted(value))
        else:
            cursor[parts[-1]] = value
    return nested


def _format_validation_error(exc: ValidationError) -> str:
    messages = []
    for err in exc.errors():
        key = '.'.join(str(p) for p in err['loc'])
        if err['type'] == 'extra_forbidden':
            messages.append(f"unknown config key '{key}'")
        else:
            messages.append(f"{key}: {err['msg']}")
    return '; '.join(messages)


class ConfigManager:
    """載入、驗證與覆寫執行設定"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Dict[str, Any]] = None):
        self.config_path = Path(config_path) if config_path else None
        self.logger = logging.getLogger('ConfigManager')
        raw = self._load_file(self.config_path) if self.config_path else {}
        raw.update(overrides or {})
        self.config = self._build(raw)

    @staticmethod
    def _load_file(path: Path) -> Dict[str, Any]:
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding='utf-8'))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must be a key-value mapping")
        return data

    @staticmethod
    def _build(raw: Dict[str, Any]) -> RunConfig:
        try:
            return RunConfig.model_validate(expand_dotted(raw))
        except ValidationError as exc:
            raise ConfigError(_format_validation_error(exc)) from exc

    def apply_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                        jobs: Optional[int] = None) -> RunConfig:
        """命令列旗標覆寫設定檔"""
        data = self.config.model_dump()
        if seed is not None:
            data['seed'] = seed
        if output_dir is not None:
            data['paths']['output_dir'] = output_dir
        if jobs is not None:
            data['jobs'] = jobs
        self.config = self._build(data)
        return self.config

    def validate_config(self, command: str) -> bool:
        """確認指令需要的輸入路徑在執行前可解析"""
        cfg = self.config
        needs_raw = command == 'ingest' or (
            command in ('train', 'evaluate', 'attribute', 'sweep', 'render')
            and not cfg.dataset_path.exists())
        if needs_raw:
            for label, value in (('paths.tracks', cfg.paths.tracks), ('paths.map', cfg.paths.map)):
                if not value:
                    raise ConfigError(f"command '{command}' needs {label}")
                if not Path(value).exists():
                    raise ConfigError(f"{label} does not exist: {value}")
        if command in ('evaluate', 'attribute', 'sweep', 'render') and not cfg.checkpoint_path.exists():
            raise ConfigError(f"checkpoint not found: {cfg.checkpoint_path} (run 'train' first)")
        if command == 'cross':
            for directory in cfg.cross.scenarios:
                for name in ('tracks.csv', 'map.json'):
                    if not (Path(directory) / name).exists():
                        raise ConfigError(f"cross scenario {directory} lacks {name}")
        return True

    def config_hash(self) -> str:
        canonical = json.dumps(self.config.model_dump(mode='json'), sort_keys=True,
                               separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


_config_manager: Optional[ConfigManager] = None


def get_config_manager(config_path: Optional[Union[str, Path]] = None) -> ConfigManager:
    """取得設定管理器；指定新路徑時重新載入"""
    global _config_manager
    if _config_manager is None or config_path is not None:
        _config_manager = ConfigManager(config_path)
    return _config_manager


def derive_seed(root_seed: int, stream: str) -> int:
    """由根種子與串流名稱 (train / split / baseline / synth) 衍生獨立子種子"""
    sequence = np.random.SeedSequence([int(root_seed), zlib.crc32(stream.encode('utf-8'))])
    return int(sequence.generate_state(1)[0])


def setup_logging(level: Optional[str] = None) -> int:
    """讀取 .env 與 VECPROBE_LOG，設定根 logger"""
    load_dotenv()
    name = (level or os.getenv(LOG_ENV_VAR, 'INFO')).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ConfigError(f"invalid log level '{name}' in {LOG_ENV_VAR}")
    root = logging.getLogger()
    root.setLevel(numeric)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    return numeric
