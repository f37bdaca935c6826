"""
資料匯入模組
Data Ingest - 解析 INTERACTION 格式軌跡 CSV 與 JSON 地圖，切成預測樣本並分割訓練/測試集
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, ValidationError
from sklearn.model_selection import GroupShuffleSplit

from scenario_core import (
    DEFAULT_T_F, DEFAULT_T_H, AgentKind, DataValidationError, Polyline,
    PolylineKind, PredictionCase, TrackPoint, normalize_case, wrap_angle,
)

logger = logging.getLogger(__name__)

TRACK_COLUMNS = [
    'case_id', 'track_id', 'frame_id', 'timestamp_ms', 'agent_type',
    'x', 'y', 'vx', 'vy', 'psi_rad', 'length', 'width',
]
INT_COLUMNS = ['case_id', 'track_id', 'frame_id', 'timestamp_ms']
FLOAT_COLUMNS = ['x', 'y', 'vx', 'vy', 'psi_rad', 'length', 'width']
KEY_COLUMNS = ['case_id', 'track_id', 'frame_id']

PathLike = Union[str, Path]


@dataclass(eq=False)
class TrackFile:
    """型別化後的軌跡表，欄位順序與檔案一致"""
    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def case_ids(self) -> List[int]:
        return sorted(int(c) for c in self.frame['case_id'].unique())

    def equals(self, other: 'TrackFile') -> bool:
        return self.frame.reset_index(drop=True).equals(other.frame.reset_index(drop=True))


@dataclass
class DatasetSplit:
    """依錄製片段 (case_id) 分割的訓練/測試集"""
    train: List[PredictionCase]
    test: List[PredictionCase]
    seed: int
    scenario_name: str = ""

    @property
    def train_case_ids(self) -> List[int]:
        return sorted({c.case_id for c in self.train})

    @property
    def test_case_ids(self) -> List[int]:
        return sorted({c.case_id for c in self.test})

    def summary(self) -> Dict[str, int]:
        return {
            'train_cases': len(self.train),
            'test_cases': len(self.test),
            'train_recordings': len(self.train_case_ids),
            'test_recordings': len(self.test_case_ids),
        }


# ========== 軌跡檔 ==========

def _line_of(frame: pd.DataFrame, mask) -> int:
    """第一個命中列在原始檔案中的行號（index 保留讀檔時的位置，第 1 行是表頭）"""
    return int(frame.index[np.flatnonzero(np.asarray(mask))[0]]) + 2


def _validate_track_frame(raw: pd.DataFrame) -> pd.DataFrame:
    if list(raw.columns) != TRACK_COLUMNS:
        raise DataValidationError(
            f"track header mismatch: expected {','.join(TRACK_COLUMNS)}, "
            f"got {','.join(map(str, raw.columns))}"
        )

    typed = pd.DataFrame(index=raw.index)
    for col in INT_COLUMNS + FLOAT_COLUMNS:
        coerced = pd.to_numeric(raw[col], errors='coerce')
        bad = coerced.isna() | ~np.isfinite(coerced)
        if col in INT_COLUMNS:
            bad |= (coerced % 1 != 0)
        if bad.any():
            value = raw.loc[bad, col].iloc[0]
            raise DataValidationError(
                f"malformed value '{value}' in column {col} at line {_line_of(raw, bad)}"
            )
        typed[col] = (coerced.astype(np.int64) if col in INT_COLUMNS
                      else raw[col].astype(np.float64))

    kinds = {k.value for k in AgentKind}
    unknown = ~raw['agent_type'].isin(kinds)
    if unknown.any():
        raise DataValidationError(
            f"unknown agent_type '{raw.loc[unknown, 'agent_type'].iloc[0]}' "
            f"at line {_line_of(raw, unknown)}"
        )
    typed['agent_type'] = raw['agent_type'].astype(object)
    typed = typed[TRACK_COLUMNS].copy()

    negative = (typed['length'] < 0) | (typed['width'] < 0)
    if negative.any():
        raise DataValidationError(f"negative extent at line {_line_of(typed, negative)}")

    heading = typed['psi_rad']
    outside = (heading <= -np.pi) | (heading > np.pi)
    if outside.any():
        logger.warning(f"wrapping {int(outside.sum())} headings into (-pi, pi]")
        typed.loc[outside, 'psi_rad'] = wrap_angle(heading[outside].to_numpy())

    duplicated = typed.duplicated(subset=KEY_COLUMNS)
    if duplicated.any():
        row = typed[duplicated].iloc[0]
        raise DataValidationError(
            f"duplicate key (case_id={row.case_id}, track_id={row.track_id}, "
            f"frame_id={row.frame_id})"
        )

    ordered = typed.sort_values(KEY_COLUMNS, kind='mergesort')
    step = ordered.groupby(['case_id', 'track_id'])['timestamp_ms'].diff()
    non_monotone = step <= 0
    if non_monotone.any():
        row = ordered[non_monotone].iloc[0]
        raise DataValidationError(
            f"non-monotone timestamps in case {row.case_id} track {row.track_id} "
            f"at frame {row.frame_id}"
        )
    return typed.reset_index(drop=True)


def parse_tracks(path: PathLike) -> TrackFile:
    """
    解析軌跡 CSV

    Args:
        path: CSV 路徑，表頭必須與 TRACK_COLUMNS 一致

    Returns:
        TrackFile
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False,
                          encoding='utf-8')
    except pd.errors.ParserError as exc:
        raise DataValidationError(f"malformed track file {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise DataValidationError(f"empty track file {path}") from exc
    blank = raw.fillna('').apply(lambda col: col.str.strip()).eq('').all(axis=1)
    frame = _validate_track_frame(raw[~blank])
    logger.info(f"parsed {len(frame)} track rows from {path}")
    return TrackFile(frame)


def tracks_to_csv_text(tracks: TrackFile) -> str:
    return tracks.frame[TRACK_COLUMNS].to_csv(index=False)


def write_tracks(tracks: TrackFile, path: PathLike):
    Path(path).write_text(tracks_to_csv_text(tracks), encoding='utf-8')


# ========== 地圖檔 ==========

class PolylineRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    id: int
    kind: str
    points: List[Tuple[float, float]]


class MapRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    polylines: List[PolylineRecord]


def polylines_from_record(record: MapRecord) -> List[Polyline]:
    seen = set()
    polylines: List[Polyline] = []
    for item in record.polylines:
        if item.id in seen:
            raise DataValidationError(f"duplicate polyline id {item.id}")
        seen.add(item.id)
        kind = PolylineKind.parse(item.kind)
        if kind.is_trajectory:
            raise DataValidationError(
                f"polyline {item.id}: trajectory kind '{item.kind}' is not a map element"
            )
        if len(item.points) < 2:
            raise DataValidationError(f"polyline {item.id} has fewer than 2 points")
        points = np.array(item.points, dtype=np.float64)
        repeated = np.flatnonzero((np.diff(points, axis=0) == 0).all(axis=1))
        if repeated.size:
            raise DataValidationError(
                f"polyline {item.id}: identical consecutive points at index {int(repeated[0]) + 1}"
            )
        polylines.append(Polyline(id=item.id, kind=kind, points=points))
    return polylines


def parse_map_text(text: str, source: str = "<map>") -> List[Polyline]:
    try:
        record = MapRecord.model_validate_json(text)
    except ValidationError as exc:
        raise DataValidationError(f"invalid map file {source}: {exc}") from exc
    return polylines_from_record(record)


def parse_map(path: PathLike) -> List[Polyline]:
    """解析 JSON 地圖 {"polylines": [{"id", "kind", "points"}]}"""
    polylines = parse_map_text(Path(path).read_text(encoding='utf-8'), str(path))
    logger.info(f"parsed {len(polylines)} map polylines from {path}")
    return polylines


def map_to_json_text(polylines: Sequence[Polyline]) -> str:
    payload = {'polylines': [
        {'id': int(p.id), 'kind': p.kind.value,
         'points': [[float(x), float(y)] for x, y in p.points]}
        for p in polylines
    ]}
    return json.dumps(payload, indent=2) + "\n"


def write_map(polylines: Sequence[Polyline], path: PathLike):
    Path(path).write_text(map_to_json_text(polylines), encoding='utf-8')


# ========== 樣本切窗 ==========

def _row_to_point(row) -> TrackPoint:
    return TrackPoint(
        frame=int(row.frame_id),
        timestamp_ms=int(row.timestamp_ms),
        position=(float(row.x), float(row.y)),
        velocity=(float(row.vx), float(row.vy)),
        heading=float(row.psi_rad),
        agent_kind=AgentKind(row.agent_type),
        extent=(float(row.length), float(row.width)),
    )


def _build_recording_cases(case_id: int, rows: pd.DataFrame, polylines: Tuple[Polyline, ...],
                           t_h: int, t_f: int, stride: int,
                           scenario_name: str) -> List[PredictionCase]:
    tracks: Dict[int, Dict[int, TrackPoint]] = {}
    for row in rows.itertuples(index=False):
        tracks.setdefault(int(row.track_id), {})[int(row.frame_id)] = _row_to_point(row)

    first = int(rows['frame_id'].min())
    last = int(rows['frame_id'].max())
    cases: List[PredictionCase] = []

    for start in range(first, last + 1, stride):
        obs = range(start, start + t_h)
        histories: Dict[int, Tuple[TrackPoint, ...]] = {}
        for track_id in sorted(tracks):
            points = tuple(tracks[track_id][f] for f in obs if f in tracks[track_id])
            if len(points) >= 2:
                histories[track_id] = points

        for target_id in sorted(histories):
            frames = tracks[target_id]
            if len(histories[target_id]) != t_h:
                continue
            future: List[TrackPoint] = []
            for f in range(start + t_h, start + t_h + t_f):
                if f not in frames:
                    break
                future.append(frames[f])
            if not future:
                continue

            valid = len(future)
            truth = np.zeros((t_f, 2))
            speed = np.zeros(t_f)
            heading = np.zeros(t_f)
            truth[:valid] = [p.position for p in future]
            speed[:valid] = [p.speed for p in future]
            heading[:valid] = [p.heading for p in future]
            mask = np.zeros(t_f, dtype=bool)
            mask[:valid] = True

            cases.append(PredictionCase(
                case_key=f"{case_id}-{target_id}-{start}",
                case_id=case_id,
                target_id=target_id,
                map_polylines=polylines,
                agent_histories=dict(histories),
                future_truth=truth,
                future_mask=mask,
                future_speed=speed,
                future_heading=heading,
                history_frames=t_h,
                scenario_name=scenario_name,
            ))
    return cases


def build_cases(tracks: TrackFile, polylines: Sequence[Polyline],
                t_h: int = DEFAULT_T_H, t_f: int = DEFAULT_T_F,
                stride: Optional[int] = None, n_jobs: int = 1,
                scenario_name: str = "", normalize: bool = False) -> List[PredictionCase]:
    """
    把軌跡切成 (目標, 視窗起點) 樣本

    視窗起點從每段錄製的第一幀開始、每 stride 幀一個；觀測幀為 start..start+t_h-1，
    未來真值從 start+t_h 開始，只收連續存在的前綴幀（允許短未來）。
    沒有完整歷史的參與者不當目標，但在視窗內有 >=2 幀時保留為情境。

    Args:
        tracks: 軌跡表
        polylines: 場景地圖
        t_h / t_f: 觀測與預測幀數
        stride: 視窗步長，預設 t_h
        n_jobs: 跨錄製片段平行處理的 worker 數
        normalize: 是否順便做目標中心正規化
    """
    stride = t_h if stride is None else stride
    if min(t_h, t_f, stride) < 1:
        raise ValueError(f"t_h, t_f and stride must be >= 1, got {t_h}, {t_f}, {stride}")
    if t_h < 2:
        raise ValueError("t_h must be >= 2 so the target trajectory yields a vector node")

    frame = tracks.frame.sort_values(KEY_COLUMNS, kind='mergesort')
    polylines = tuple(polylines)
    groups = [(int(case_id), rows) for case_id, rows in frame.groupby('case_id', sort=True)]

    if n_jobs == 1 or len(groups) < 2:
        nested = [_build_recording_cases(cid, rows, polylines, t_h, t_f, stride, scenario_name)
                  for cid, rows in groups]
    else:
        nested = Parallel(n_jobs=n_jobs)(
            delayed(_build_recording_cases)(cid, rows, polylines, t_h, t_f, stride, scenario_name)
            for cid, rows in groups
        )

    cases = [case for chunk in nested for case in chunk]
    if normalize:
        cases = [normalize_case(c) for c in cases]
    logger.info(f"built {len(cases)} cases from {len(groups)} recordings "
                f"(t_h={t_h}, t_f={t_f}, stride={stride})")
    return cases


# ========== 資料集分割 ==========

def split_dataset(cases: Sequence[PredictionCase], test_fraction: float = 0.2,
                  seed: int = 0, scenario_name: Optional[str] = None) -> DatasetSplit:
    """依 case_id 分組隨機分割，同一段錄製的所有視窗落在同一側"""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    case_ids = np.array(sorted({c.case_id for c in cases}), dtype=np.int64)
    if len(case_ids) < 2:
        raise DataValidationError(
            f"need at least 2 distinct case_ids to split, got {len(case_ids)}"
        )

    splitter = GroupShuffleSplit(n_splits=1, test_size=test_fraction, random_state=seed)
    train_idx, test_idx = next(splitter.split(case_ids.reshape(-1, 1), groups=case_ids))
    test_ids = set(case_ids[test_idx].tolist())

    train = [c for c in cases if c.case_id not in test_ids]
    test = [c for c in cases if c.case_id in test_ids]
    if scenario_name is None:
        scenario_name = cases[0].scenario_name if cases else ""
    split = DatasetSplit(train=train, test=test, seed=seed, scenario_name=scenario_name)
    logger.info(f"split '{scenario_name}': {split.summary()}")
    return split


def load_scenario(tracks_path: PathLike, map_path: PathLike,
                  t_h: int = DEFAULT_T_H, t_f: int = DEFAULT_T_F,
                  stride: Optional[int] = None, test_fraction: float = 0.2,
                  seed: int = 0, scenario_name: Optional[str] = None,
                  n_jobs: int = 1) -> DatasetSplit:
    """解析 + 切窗 + 正規化 + 分割"""
    name = scenario_name or Path(tracks_path).parent.name
    tracks = parse_tracks(tracks_path)
    polylines = parse_map(map_path)
    cases = build_cases(tracks, polylines, t_h, t_f, stride, n_jobs,
                        scenario_name=name, normalize=True)
    return split_dataset(cases, test_fraction, seed, scenario_name=name)
