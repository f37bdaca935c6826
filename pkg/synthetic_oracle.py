"""
合成場景產生器與暴力法參考實作
Synthetic Oracle - 桌面規模實驗用的決定性合成場景，以及獨立的指標參考實作

產生的軌跡在 10 Hz 下滿足 p[t+1] = p[t] + v[t]·dt（加雜訊之前），
航向沿著速度方向；輸出格式與 data_ingest 完全一致。
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from data_ingest import TRACK_COLUMNS, TrackFile, map_to_json_text, tracks_to_csv_text
from evaluation import MetricsReport
from scenario_core import (
    DEFAULT_T_H, FRAME_DT, AgentKind, Polyline, PolylineKind, PredictionCase, wrap_angle,
)

logger = logging.getLogger(__name__)

LANE_HALF_WIDTH = 1.75
MAP_SAMPLE_STEP = 2.0
MERGE_COS = 0.85
MERGE_RADIUS = 40.0

AGENT_EXTENTS = {
    AgentKind.CAR: (4.5, 1.8),
    AgentKind.TRUCK: (8.0, 2.5),
    AgentKind.PEDESTRIAN: (0.0, 0.0),
    AgentKind.BICYCLE: (1.8, 0.6),
}


class SynthKind(Enum):
    """合成場景類型"""
    STRAIGHT_LANE = "straight-lane"
    CURVED_LANE = "curved-lane"
    MERGE = "merge"
    CROSSING = "crossing"


@dataclass(frozen=True)
class SynthSpec:
    """合成場景參數"""
    kind: SynthKind = SynthKind.STRAIGHT_LANE
    agent_count: int = 4
    speed_range: Tuple[float, float] = (4.0, 6.0)
    duration_frames: int = 50
    noise_std: float = 0.0
    seed: int = 0
    recording_count: int = 1
    curve_radius: float = 20.0

    def __post_init__(self):
        if self.duration_frames < DEFAULT_T_H + 1:
            raise ValueError(f"duration_frames must be >= {DEFAULT_T_H + 1}")
        low, high = self.speed_range
        if low < 0 or high < low:
            raise ValueError(f"invalid speed range {self.speed_range}")
        if self.agent_count < 1 or self.recording_count < 1:
            raise ValueError("agent_count and recording_count must be >= 1")
        if self.noise_std < 0 or self.curve_radius <= 0:
            raise ValueError("noise_std must be >= 0 and curve_radius > 0")


# ========== 參考路徑 ==========

@dataclass(frozen=True)
class _PathPiece:
    start: Tuple[float, float]
    heading: float
    length: float
    curvature: float  # 帶號 1/R，0 為直線

    def pose(self, s: float) -> Tuple[np.ndarray, float]:
        x0, y0 = self.start
        if self.curvature == 0.0:
            return (np.array([x0 + s * math.cos(self.heading), y0 + s * math.sin(self.heading)]),
                    self.heading)
        k = self.curvature
        h = self.heading + k * s
        return (np.array([x0 + (math.sin(h) - math.sin(self.heading)) / k,
                          y0 - (math.cos(h) - math.cos(self.heading)) / k]), h)


class ReferencePath:
    """由直線與圓弧串成、以弧長參數化的路徑；超出終點沿最後航向延伸"""

    def __init__(self, start: Tuple[float, float], heading: float,
                 pieces: Sequence[Tuple[float, float]]):
        self.pieces: List[_PathPiece] = []
        position, h = (float(start[0]), float(start[1])), float(heading)
        for length, curvature in pieces:
            piece = _PathPiece(position, h, float(length), float(curvature))
            end, h = piece.pose(piece.length)
            position = (float(end[0]), float(end[1]))
            self.pieces.append(piece)
        self.end = position
        self.end_heading = h

    @property
    def length(self) -> float:
        return sum(p.length for p in self.pieces)

    def pose(self, s: float) -> Tuple[np.ndarray, float]:
        if s < 0:
            first = self.pieces[0]
            return first.pose(0.0)[0] + s * np.array([math.cos(first.heading),
                                                      math.sin(first.heading)]), first.heading
        for piece in self.pieces:
            if s <= piece.length:
                return piece.pose(s)
            s -= piece.length
        return (np.array(self.end) + s * np.array([math.cos(self.end_heading),
                                                   math.sin(self.end_heading)]),
                self.end_heading)

    def sample(self, offset: float = 0.0, step: float = MAP_SAMPLE_STEP,
               s_from: float = 0.0, s_to: Optional[float] = None) -> np.ndarray:
        """沿路徑取樣點，offset 為左側法向位移"""
        s_to = self.length if s_to is None else s_to
        count = max(1, math.ceil((s_to - s_from) / step))
        points = []
        for s in np.linspace(s_from, s_to, count + 1):
            p, h = self.pose(float(s))
            points.append(p + offset * np.array([-math.sin(h), math.cos(h)]))
        return np.array(points)


@dataclass
class _Layout:
    paths: Dict[str, ReferencePath]
    polylines: List[Polyline]


def _polyline(pid: int, kind: PolylineKind, points) -> Polyline:
    return Polyline(id=pid, kind=kind, points=np.asarray(points, dtype=np.float64))


def _lane_polylines(path: ReferencePath, first_id: int = 1) -> List[Polyline]:
    return [
        _polyline(first_id, PolylineKind.BORDER, path.sample(LANE_HALF_WIDTH)),
        _polyline(first_id + 1, PolylineKind.BORDER, path.sample(-LANE_HALF_WIDTH)),
        _polyline(first_id + 2, PolylineKind.VIRTUAL_LINE, path.sample(0.0)),
    ]


def _straight_layout(spec: SynthSpec) -> _Layout:
    path = ReferencePath((-40.0, 0.0), 0.0, [(80.0, 0.0)])
    return _Layout({'lane': path}, _lane_polylines(path))


def _curved_layout(spec: SynthSpec) -> _Layout:
    r = spec.curve_radius
    path = ReferencePath((-15.0, 0.0), 0.0,
                         [(15.0, 0.0), (0.5 * math.pi * r, 1.0 / r), (15.0, 0.0)])
    return _Layout({'lane': path}, _lane_polylines(path))


def _merge_layout(spec: SynthSpec) -> _Layout:
    theta = math.acos(MERGE_COS)
    arc = MERGE_RADIUS * theta
    main = ReferencePath((-40.0, 0.0), 0.0, [(100.0, 0.0)])
    ramp = ReferencePath((-40.0, -12.0), 0.0,
                         [(10.0, 0.0), (arc, 1.0 / MERGE_RADIUS),
                          (arc, -1.0 / MERGE_RADIUS), (20.0, 0.0)])
    merge_s = 10.0 + 2.0 * arc
    polylines = [
        _polyline(1, PolylineKind.BORDER, main.sample(LANE_HALF_WIDTH)),
        _polyline(2, PolylineKind.BORDER, main.sample(-LANE_HALF_WIDTH)),
        _polyline(3, PolylineKind.VIRTUAL_LINE, main.sample(0.0)),
        _polyline(4, PolylineKind.VIRTUAL_LINE, ramp.sample(0.0, s_to=merge_s)),
    ]
    return _Layout({'main': main, 'ramp': ramp}, polylines)


def _crossing_layout(spec: SynthSpec) -> _Layout:
    w = LANE_HALF_WIDTH
    road_a = ReferencePath((-40.0, 0.0), 0.0, [(80.0, 0.0)])
    road_b = ReferencePath((0.0, -40.0), 0.5 * math.pi, [(80.0, 0.0)])
    crosswalk = ReferencePath((-8.0, -6.0), 0.5 * math.pi, [(12.0, 0.0)])

    borders = [
        [(-50.0, w), (-w, w)], [(w, w), (50.0, w)],
        [(-50.0, -w), (-w, -w)], [(w, -w), (50.0, -w)],
        [(-w, -50.0), (-w, -w)], [(-w, w), (-w, 50.0)],
        [(w, -50.0), (w, -w)], [(w, w), (w, 50.0)],
    ]
    polylines = [_polyline(i + 1, PolylineKind.BORDER, pts) for i, pts in enumerate(borders)]
    polylines += [
        _polyline(9, PolylineKind.STOP_LINE, [(-4.0, -w), (-4.0, 0.0)]),
        _polyline(10, PolylineKind.STOP_LINE, [(0.0, -4.0), (w, -4.0)]),
        _polyline(11, PolylineKind.CROSSWALK,
                  [(-10.0, -2.5), (-6.0, -2.5), (-6.0, 2.5), (-10.0, 2.5), (-10.0, -2.5)]),
        _polyline(12, PolylineKind.VIRTUAL_LINE, road_a.sample(0.0)),
        _polyline(13, PolylineKind.VIRTUAL_LINE, road_b.sample(0.0)),
    ]
    return _Layout({'road_a': road_a, 'road_b': road_b, 'crosswalk': crosswalk}, polylines)


_LAYOUTS = {
    SynthKind.STRAIGHT_LANE: _straight_layout,
    SynthKind.CURVED_LANE: _curved_layout,
    SynthKind.MERGE: _merge_layout,
    SynthKind.CROSSING: _crossing_layout,
}


# ========== 參與者 ==========

def _assign_agent(kind: SynthKind, index: int) -> Tuple[str, AgentKind]:
    """回傳 (路徑名稱, 參與者類型)"""
    if kind is SynthKind.CROSSING and index % 4 == 3:
        vru = AgentKind.PEDESTRIAN if (index // 4) % 2 == 0 else AgentKind.BICYCLE
        return 'crosswalk', vru
    vehicle = AgentKind.TRUCK if index % 5 == 4 else AgentKind.CAR
    if kind is SynthKind.MERGE:
        return ('main' if index % 2 == 0 else 'ramp'), vehicle
    if kind is SynthKind.CROSSING:
        return ('road_a' if index % 2 == 0 else 'road_b'), vehicle
    return 'lane', vehicle


def integrate_along_path(path: ReferencePath, s0: float, speed: float,
                         frames: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    以中點航向積分：p[t+1] = p[t] + v·dt·dir(ψ_mid)

    回報速度使用同一個 ψ_mid，因此位移與速度在雜訊前完全一致。

    Returns:
        positions (n, 2), velocities (n, 2), headings (n,)
    """
    positions = np.zeros((frames, 2))
    velocities = np.zeros((frames, 2))
    headings = np.zeros(frames)
    step = speed * FRAME_DT
    positions[0] = path.pose(s0)[0]
    for t in range(frames):
        _, psi = path.pose(s0 + step * (t + 0.5))
        direction = np.array([math.cos(psi), math.sin(psi)])
        velocities[t] = speed * direction
        headings[t] = wrap_angle(psi)
        if t + 1 < frames:
            positions[t + 1] = positions[t] + step * direction
    return positions, velocities, headings


def _recording_rows(spec: SynthSpec, layout: _Layout, case_id: int,
                    rng: np.random.Generator) -> List[list]:
    rows = []
    for index in range(spec.agent_count):
        path_name, agent_kind = _assign_agent(spec.kind, index)
        path = layout.paths[path_name]
        if path_name == 'crosswalk':
            speed = float(rng.uniform(1.0, 1.6))
            if agent_kind is AgentKind.BICYCLE:
                speed *= 2.5
            s0 = float(rng.uniform(0.0, 2.0))
        else:
            speed = float(rng.uniform(*spec.speed_range))
            s0 = float(rng.uniform(0.0, 15.0))
        positions, velocities, headings = integrate_along_path(
            path, s0, speed, spec.duration_frames)
        if spec.noise_std > 0:
            positions = positions + rng.normal(0.0, spec.noise_std, size=positions.shape)
        length, width = AGENT_EXTENTS[agent_kind]
        for t in range(spec.duration_frames):
            rows.append([
                case_id, index + 1, t, t * int(1000 * FRAME_DT), agent_kind.value,
                float(positions[t, 0]), float(positions[t, 1]),
                float(velocities[t, 0]), float(velocities[t, 1]), float(headings[t]),
                length, width,
            ])
    return rows


@dataclass
class GeneratedScenario:
    """generate() 的輸出：軌跡表、地圖與 manifest"""
    spec: SynthSpec
    tracks: TrackFile
    polylines: List[Polyline]
    manifest: Dict[str, object] = field(default_factory=dict)

    @property
    def csv_text(self) -> str:
        return tracks_to_csv_text(self.tracks)

    @property
    def map_text(self) -> str:
        return map_to_json_text(self.polylines)

    @property
    def manifest_text(self) -> str:
        return json.dumps(self.manifest, indent=2, sort_keys=True) + "\n"

    def write_to(self, directory: Union[str, Path]) -> Dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            'tracks': directory / 'tracks.csv',
            'map': directory / 'map.json',
            'manifest': directory / 'manifest.json',
        }
        paths['tracks'].write_text(self.csv_text, encoding='utf-8')
        paths['map'].write_text(self.map_text, encoding='utf-8')
        paths['manifest'].write_text(self.manifest_text, encoding='utf-8')
        logger.info(f"synthetic scenario '{self.spec.kind.value}' written to {directory}")
        return paths


def generate(spec: SynthSpec) -> GeneratedScenario:
    """
    產生合成場景

    每段錄製 (case_id = 1..recording_count) 使用由 (seed, 錄製序號) 衍生的亂數流，
    相同 spec 產生逐位元相同的檔案。
    """
    layout = _LAYOUTS[spec.kind](spec)
    rows: List[list] = []
    for recording in range(spec.recording_count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, recording]))
        rows.extend(_recording_rows(spec, layout, recording + 1, rng))

    frame = pd.DataFrame(rows, columns=TRACK_COLUMNS)
    for col in ('case_id', 'track_id', 'frame_id', 'timestamp_ms'):
        frame[col] = frame[col].astype(np.int64)
    for col in ('x', 'y', 'vx', 'vy', 'psi_rad', 'length', 'width'):
        frame[col] = frame[col].astype(np.float64)
    frame['agent_type'] = frame['agent_type'].astype(object)

    agent_kinds = Counter(_assign_agent(spec.kind, i)[1].value for i in range(spec.agent_count))
    manifest = {
        'kind': spec.kind.value,
        'seed': spec.seed,
        'agent_count': spec.agent_count,
        'recording_count': spec.recording_count,
        'duration_frames': spec.duration_frames,
        'row_count': len(frame),
        'polyline_count': len(layout.polylines),
        'polyline_kinds': dict(sorted(Counter(p.kind.value for p in layout.polylines).items())),
        'agent_kinds': dict(sorted(agent_kinds.items())),
    }
    return GeneratedScenario(spec, TrackFile(frame), layout.polylines, manifest)


# ========== 參考預測器 ==========

def constant_velocity_predict(case: PredictionCase, horizon: Optional[int] = None) -> np.ndarray:
    """沿最後觀測速度等速外推 T_f 幀（正規化座標）"""
    history = case.target_history
    if len(history) < 2:
        raise ValueError("constant velocity prediction needs >= 2 history frames")
    horizon = case.horizon if horizon is None else horizon
    last = history[-1]
    steps = np.arange(1, horizon + 1, dtype=np.float64)[:, None] * FRAME_DT
    return np.array(last.position) + steps * np.array(last.velocity)


# ========== 暴力法指標 ==========

def _longitudinal_threshold(speed: float) -> float:
    if speed < 1.4:
        return 1.0
    if speed <= 11.0:
        return 1.0 + (speed - 1.4) / 9.6
    return 2.0


def brute_force_metrics(predictions, truths, masks, speeds, headings) -> MetricsReport:
    """
    逐幀迴圈計算 minADE / minFDE / MR，直接依公式撰寫

    speeds 與 headings 為每個樣本最後一個有效真值幀的速度與航向。
    """
    n = len(predictions)
    if n == 0:
        raise ValueError("empty batch")

    ade_total = 0.0
    fde_total = 0.0
    misses = 0
    for i in range(n):
        last = -1
        frame_total = 0.0
        valid = 0
        for t in range(len(truths[i])):
            if not masks[i][t]:
                continue
            dx = float(predictions[i][t][0]) - float(truths[i][t][0])
            dy = float(predictions[i][t][1]) - float(truths[i][t][1])
            frame_total += math.sqrt(dx * dx + dy * dy)
            valid += 1
            last = t
        if valid == 0:
            raise ValueError(f"case {i} has no valid frame")
        ade_total += frame_total / valid

        dx = float(predictions[i][last][0]) - float(truths[i][last][0])
        dy = float(predictions[i][last][1]) - float(truths[i][last][1])
        fde_total += math.sqrt(dx * dx + dy * dy)

        psi = float(headings[i])
        lon = dx * math.cos(psi) + dy * math.sin(psi)
        lat = -dx * math.sin(psi) + dy * math.cos(psi)
        if abs(lat) > 1.0 or abs(lon) > _longitudinal_threshold(float(speeds[i])):
            misses += 1

    return MetricsReport(min_ade=ade_total / n, min_fde=fde_total / n,
                         miss_rate=misses / n, case_count=n)
