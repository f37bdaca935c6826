"""
場景核心型別 - 向量化軌跡預測工作台
Scenario Core - 場景資料結構、分段程序 (segmentation) 與目標中心正規化

提供 TrackPoint / Polyline / VectorNode / PredictionCase 等不可變型別，
以及把 polyline 轉換為向量節點、組裝圖輸入矩陣的純函數。
"""

import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# 固定 10 Hz：1 秒觀測 = 10 幀，3 秒預測 = 30 幀
FRAME_RATE_HZ = 10
FRAME_DT = 1.0 / FRAME_RATE_HZ
DEFAULT_T_H = 10
DEFAULT_T_F = 30
DEFAULT_MAX_SEG_LEN = 2.0

# 正規化判斷容差
NORMALIZED_TOL = 1e-9


class DataValidationError(ValueError):
    """輸入資料驗證失敗（退出碼 3）"""
    pass


class AgentKind(Enum):
    """交通參與者類型"""
    CAR = "car"
    TRUCK = "truck"
    PEDESTRIAN = "pedestrian"
    BICYCLE = "bicycle"

    @classmethod
    def parse(cls, value: str) -> 'AgentKind':
        try:
            return cls(value)
        except ValueError:
            raise DataValidationError(f"unknown agent_type '{value}'") from None


class PolylineKind(Enum):
    """Polyline 類型，順序決定 one-hot 欄位位置"""
    TARGET_TRAJECTORY = "target-trajectory"
    AGENT_TRAJECTORY = "agent-trajectory"
    LANE_MARKING = "lane-marking"
    BORDER = "border"
    VIRTUAL_LINE = "virtual-line"
    STOP_LINE = "stop-line"
    CROSSWALK = "crosswalk"

    @classmethod
    def parse(cls, value: str) -> 'PolylineKind':
        try:
            return cls(value)
        except ValueError:
            raise DataValidationError(f"unknown polyline kind '{value}'") from None

    @property
    def index(self) -> int:
        return list(PolylineKind).index(self)

    @property
    def is_trajectory(self) -> bool:
        return self in (PolylineKind.TARGET_TRAJECTORY, PolylineKind.AGENT_TRAJECTORY)


NUM_POLYLINE_KINDS = len(PolylineKind)
MAP_KINDS = tuple(k for k in PolylineKind if not k.is_trajectory)


def wrap_angle(angle):
    """把角度包到 (-π, π]，純量或陣列皆可"""
    return np.pi - np.mod(np.pi - angle, 2.0 * np.pi)


@dataclass(frozen=True)
class TrackPoint:
    """單一幀的參與者狀態"""
    frame: int
    timestamp_ms: int
    position: Tuple[float, float]  # 公尺
    velocity: Tuple[float, float]  # 公尺/秒
    heading: float  # 弧度 (-π, π]
    agent_kind: AgentKind
    extent: Tuple[float, float] = (0.0, 0.0)  # (length, width)

    def __post_init__(self):
        if self.extent[0] < 0 or self.extent[1] < 0:
            raise DataValidationError(
                f"negative extent {self.extent} at frame {self.frame}"
            )
        values = (*self.position, *self.velocity, self.heading, *self.extent)
        if not all(math.isfinite(v) for v in values):
            raise DataValidationError(f"non-finite track value at frame {self.frame}")

    @property
    def speed(self) -> float:
        return math.hypot(self.velocity[0], self.velocity[1])


@dataclass(frozen=True, eq=False)
class Polyline:
    """有序點鏈，描述地圖元素或軌跡"""
    id: int
    kind: PolylineKind
    points: np.ndarray  # (n, 2)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise DataValidationError(f"polyline {self.id}: points must be (n, 2)")
        if points.shape[0] < 2:
            raise DataValidationError(f"polyline {self.id} has fewer than 2 points")
        if self.id < 1:
            raise DataValidationError(f"polyline id must be >= 1, got {self.id}")
        if not np.all(np.isfinite(points)):
            raise DataValidationError(f"polyline {self.id} has non-finite points")
        points.setflags(write=False)
        object.__setattr__(self, 'points', points)


@dataclass(frozen=True)
class VectorNode:
    """一個 polyline 片段的特徵列"""
    origin: Tuple[float, float]
    destination: Tuple[float, float]
    type_onehot: Tuple[int, ...]
    state: Tuple[float, float, float, float]  # (speed, heading, length, width)
    polyline_id: int

    @property
    def length(self) -> float:
        return math.hypot(self.destination[0] - self.origin[0],
                          self.destination[1] - self.origin[1])

    def to_row(self) -> np.ndarray:
        return np.array(
            [*self.origin, *self.destination, *self.type_onehot, *self.state,
             float(self.polyline_id)],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class FeatureSchema:
    """
    節點特徵列的欄位配置

    每個特徵群組對應一段連續欄位，並標記是否為離散特徵。
    離散群組在 baseline 中歸零，連續群組加上高斯雜訊。
    """
    groups: Tuple[Tuple[str, int, int, bool], ...]  # (name, start, stop, discrete)

    def __post_init__(self):
        cursor = 0
        for name, start, stop, _ in self.groups:
            if start != cursor or stop <= start:
                raise ValueError(f"feature group '{name}' breaks contiguous layout")
            cursor = stop
        if cursor == 0:
            raise ValueError("feature schema is empty")

    @classmethod
    def default(cls, num_kinds: int = NUM_POLYLINE_KINDS) -> 'FeatureSchema':
        k = num_kinds
        return cls(groups=(
            ('origin', 0, 2, False),
            ('destination', 2, 4, False),
            ('type', 4, 4 + k, True),
            ('state', 4 + k, 8 + k, False),
            ('id', 8 + k, 9 + k, True),
        ))

    @property
    def width(self) -> int:
        return self.groups[-1][2]

    @property
    def group_names(self) -> List[str]:
        return [g[0] for g in self.groups]

    def group_slice(self, name: str) -> slice:
        for group_name, start, stop, _ in self.groups:
            if group_name == name:
                return slice(start, stop)
        raise KeyError(name)

    def discrete_mask(self) -> np.ndarray:
        mask = np.zeros(self.width, dtype=bool)
        for _, start, stop, discrete in self.groups:
            mask[start:stop] = discrete
        return mask

    def continuous_mask(self) -> np.ndarray:
        return ~self.discrete_mask()


@dataclass(frozen=True)
class RigidTransform:
    """
    世界座標 -> 目標中心座標的剛體變換

    p' = R(-rotation) (p - translation)
    """
    translation: Tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0

    @classmethod
    def identity(cls) -> 'RigidTransform':
        return cls()

    @property
    def is_identity(self) -> bool:
        return self.translation == (0.0, 0.0) and self.rotation == 0.0

    def _cos_sin(self) -> Tuple[float, float]:
        return math.cos(self.rotation), math.sin(self.rotation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        c, s = self._cos_sin()
        dx = points[..., 0] - self.translation[0]
        dy = points[..., 1] - self.translation[1]
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        c, s = self._cos_sin()
        vx, vy = vectors[..., 0], vectors[..., 1]
        return np.stack([c * vx + s * vy, -s * vx + c * vy], axis=-1)

    def apply_heading(self, heading):
        return wrap_angle(np.asarray(heading, dtype=np.float64) - self.rotation)

    def inverse_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        c, s = self._cos_sin()
        x, y = points[..., 0], points[..., 1]
        return np.stack([c * x - s * y + self.translation[0],
                         s * x + c * y + self.translation[1]], axis=-1)

    def then(self, other: 'RigidTransform') -> 'RigidTransform':
        """先套用 self 再套用 other 的合成變換"""
        c, s = self._cos_sin()
        tx = self.translation[0] + c * other.translation[0] - s * other.translation[1]
        ty = self.translation[1] + s * other.translation[0] + c * other.translation[1]
        return RigidTransform((float(tx), float(ty)),
                              float(wrap_angle(self.rotation + other.rotation)))


@dataclass(frozen=True, eq=False)
class PredictionCase:
    """一個監督樣本：地圖、歷史軌跡、目標未來真值與正規化變換"""
    case_key: str
    case_id: int
    target_id: int
    map_polylines: Tuple[Polyline, ...]
    agent_histories: Dict[int, Tuple[TrackPoint, ...]]
    future_truth: np.ndarray  # (T_f, 2)
    future_mask: np.ndarray  # (T_f,) bool，前綴有效
    future_speed: np.ndarray  # (T_f,)
    future_heading: np.ndarray  # (T_f,)
    history_frames: int = DEFAULT_T_H
    normalization: RigidTransform = field(default_factory=RigidTransform.identity)
    scenario_name: str = ""

    def __post_init__(self):
        target = self.agent_histories.get(self.target_id)
        if not target:
            raise DataValidationError(f"case {self.case_key}: target history is empty")
        if len(target) != self.history_frames:
            raise DataValidationError(
                f"case {self.case_key}: target history has {len(target)} frames, "
                f"expected {self.history_frames}"
            )
        mask = np.asarray(self.future_mask, dtype=bool)
        valid = int(mask.sum())
        if valid == 0 or not mask[:valid].all():
            raise DataValidationError(
                f"case {self.case_key}: future mask must be a non-empty prefix"
            )
        object.__setattr__(self, 'future_mask', mask)

    @property
    def horizon(self) -> int:
        return int(self.future_truth.shape[0])

    @property
    def valid_frames(self) -> int:
        return int(self.future_mask.sum())

    @property
    def target_history(self) -> Tuple[TrackPoint, ...]:
        return self.agent_histories[self.target_id]

    @property
    def final_speed(self) -> float:
        return float(self.future_speed[self.valid_frames - 1])

    @property
    def final_heading(self) -> float:
        return float(self.future_heading[self.valid_frames - 1])

    def is_normalized(self, tol: float = NORMALIZED_TOL) -> bool:
        last = self.target_history[-1]
        return (abs(last.position[0]) <= tol and abs(last.position[1]) <= tol
                and abs(last.heading) <= tol)

    def world_future(self) -> np.ndarray:
        return self.normalization.inverse_points(self.future_truth)


# ========== 分段程序 ==========

def _onehot(kind: PolylineKind) -> Tuple[int, ...]:
    row = [0] * NUM_POLYLINE_KINDS
    row[kind.index] = 1
    return tuple(row)


def segment_polyline(polyline: Polyline,
                     max_seg_len: float = DEFAULT_MAX_SEG_LEN,
                     states: Optional[np.ndarray] = None) -> List[VectorNode]:
    """
    把 polyline 切成向量節點

    地圖 polyline 以不超過 max_seg_len 的等長片段重新取樣；
    軌跡 polyline 每對相鄰幀產生一個節點，states[i] 為第 i+1 幀的運動狀態。

    Args:
        polyline: 輸入 polyline
        max_seg_len: 地圖片段最大長度（公尺）
        states: 軌跡 polyline 的 (n, 4) 狀態陣列

    Returns:
        依序串接的 VectorNode 列表
    """
    if max_seg_len <= 0:
        raise ValueError(f"max_seg_len must be positive, got {max_seg_len}")

    points = polyline.points
    onehot = _onehot(polyline.kind)

    if polyline.kind.is_trajectory:
        if states is None:
            states = np.zeros((len(points), 4))
        if len(states) != len(points):
            raise DataValidationError(
                f"polyline {polyline.id}: {len(states)} states for {len(points)} points"
            )
        return [
            VectorNode(
                origin=(float(points[i, 0]), float(points[i, 1])),
                destination=(float(points[i + 1, 0]), float(points[i + 1, 1])),
                type_onehot=onehot,
                state=tuple(float(v) for v in states[i + 1]),
                polyline_id=polyline.id,
            )
            for i in range(len(points) - 1)
        ]

    if np.all(points == points[0]):
        raise DataValidationError(f"degenerate polyline {polyline.id}: all points identical")

    zero_state = (0.0, 0.0, 0.0, 0.0)
    nodes: List[VectorNode] = []
    for a, b in zip(points[:-1], points[1:]):
        seg_len = float(np.hypot(*(b - a)))
        if seg_len == 0.0:
            continue
        pieces = max(1, math.ceil(seg_len / max_seg_len - 1e-9))
        cuts = a + (b - a) * (np.arange(pieces + 1)[:, None] / pieces)
        cuts[-1] = b
        for start, stop in zip(cuts[:-1], cuts[1:]):
            nodes.append(VectorNode(
                origin=(float(start[0]), float(start[1])),
                destination=(float(stop[0]), float(stop[1])),
                type_onehot=onehot,
                state=zero_state,
                polyline_id=polyline.id,
            ))
    return nodes


def trajectory_states(track: Sequence[TrackPoint]) -> np.ndarray:
    """每幀的 (speed, heading, length, width)"""
    return np.array([[p.speed, p.heading, p.extent[0], p.extent[1]] for p in track],
                    dtype=np.float64).reshape(len(track), 4)


def segment_trajectory(track: Sequence[TrackPoint], kind: PolylineKind,
                       polyline_id: int) -> List[VectorNode]:
    """軌跡版本的分段：每對相鄰幀一個節點，允許靜止車輛的零長度片段"""
    if not kind.is_trajectory:
        raise ValueError(f"{kind.value} is not a trajectory kind")
    points = np.array([p.position for p in track], dtype=np.float64)
    polyline = Polyline(id=polyline_id, kind=kind, points=points)
    return segment_polyline(polyline, states=trajectory_states(track))


# ========== 正規化 ==========

def _transform_track(track: Sequence[TrackPoint],
                     transform: RigidTransform) -> Tuple[TrackPoint, ...]:
    positions = transform.apply_points(np.array([p.position for p in track]))
    velocities = transform.apply_vectors(np.array([p.velocity for p in track]))
    headings = transform.apply_heading(np.array([p.heading for p in track]))
    return tuple(
        replace(p,
                position=(float(positions[i, 0]), float(positions[i, 1])),
                velocity=(float(velocities[i, 0]), float(velocities[i, 1])),
                heading=float(headings[i]))
        for i, p in enumerate(track)
    )


def normalize_case(case: PredictionCase) -> PredictionCase:
    """
    目標中心正規化：目標最後觀測位置移到 (0,0)，航向轉為 0

    變換會與既有的 normalization 合成，方便把預測轉回世界座標。
    """
    last = case.target_history[-1]
    if last.position == (0.0, 0.0) and last.heading == 0.0:
        return case

    step = RigidTransform((float(last.position[0]), float(last.position[1])),
                          float(last.heading))
    histories = {agent_id: _transform_track(track, step)
                 for agent_id, track in case.agent_histories.items()}
    polylines = tuple(
        Polyline(id=p.id, kind=p.kind, points=step.apply_points(p.points))
        for p in case.map_polylines
    )
    # 目標最後觀測點強制為精確原點
    target = histories[case.target_id]
    histories[case.target_id] = target[:-1] + (
        replace(target[-1], position=(0.0, 0.0), heading=0.0),
    )
    return replace(
        case,
        map_polylines=polylines,
        agent_histories=histories,
        future_truth=step.apply_points(case.future_truth),
        future_heading=step.apply_heading(case.future_heading),
        normalization=case.normalization.then(step),
    )


# ========== 圖輸入 ==========

@dataclass(frozen=True, eq=False)
class GraphInput:
    """依 polyline 分組的節點矩陣，以及各組的類型與 id"""
    node_matrix: np.ndarray  # (N, width)
    polyline_slices: Tuple[Tuple[int, int], ...]
    polyline_kinds: Tuple[PolylineKind, ...]
    polyline_ids: Tuple[int, ...]
    target_index: int = 0

    @property
    def num_polylines(self) -> int:
        return len(self.polyline_slices)

    @property
    def num_nodes(self) -> int:
        return int(self.node_matrix.shape[0])

    @property
    def node_polyline_index(self) -> np.ndarray:
        index = np.empty(self.num_nodes, dtype=np.int64)
        for j, (start, stop) in enumerate(self.polyline_slices):
            index[start:stop] = j
        return index

    @property
    def node_kinds(self) -> List[PolylineKind]:
        return [self.polyline_kinds[j] for j in self.node_polyline_index]

    def with_matrix(self, node_matrix: np.ndarray) -> 'GraphInput':
        """同樣的分組結構、替換節點矩陣（baseline 與插值路徑使用）"""
        if node_matrix.shape != self.node_matrix.shape:
            raise ValueError(
                f"node matrix shape {node_matrix.shape} != {self.node_matrix.shape}"
            )
        return replace(self, node_matrix=node_matrix)


def build_graph_input(case: PredictionCase,
                      schema: Optional[FeatureSchema] = None,
                      max_seg_len: float = DEFAULT_MAX_SEG_LEN) -> GraphInput:
    """
    組裝兩層圖的輸入：目標軌跡為第 0 組，其他參與者依 id 排序，最後是地圖 polyline

    polyline 內部與全域圖都是完全圖，因此只需記錄分組，不需鄰接矩陣。
    """
    schema = schema or FeatureSchema.default()
    if not case.is_normalized():
        raise DataValidationError(f"case {case.case_key} must be normalized first")

    map_polylines = sorted(case.map_polylines, key=lambda p: p.id)
    next_id = max((p.id for p in map_polylines), default=0) + 1

    groups: List[Tuple[PolylineKind, int, List[VectorNode]]] = []
    agent_order = [case.target_id] + sorted(a for a in case.agent_histories
                                            if a != case.target_id)
    for agent_id in agent_order:
        track = case.agent_histories[agent_id]
        if len(track) < 2:
            logger.debug(f"case {case.case_key}: agent {agent_id} has <2 frames, skipped")
            continue
        kind = (PolylineKind.TARGET_TRAJECTORY if agent_id == case.target_id
                else PolylineKind.AGENT_TRAJECTORY)
        groups.append((kind, next_id, segment_trajectory(track, kind, next_id)))
        next_id += 1

    if not groups or groups[0][0] is not PolylineKind.TARGET_TRAJECTORY:
        raise DataValidationError(f"case {case.case_key}: target needs >= 2 frames")

    for polyline in map_polylines:
        groups.append((polyline.kind, polyline.id, segment_polyline(polyline, max_seg_len)))

    rows: List[np.ndarray] = []
    slices: List[Tuple[int, int]] = []
    cursor = 0
    for _, _, nodes in groups:
        rows.extend(node.to_row() for node in nodes)
        slices.append((cursor, cursor + len(nodes)))
        cursor += len(nodes)

    matrix = np.vstack(rows)
    if matrix.shape[1] != schema.width:
        raise DataValidationError(
            f"node width {matrix.shape[1]} does not match schema width {schema.width}"
        )
    matrix.setflags(write=False)
    return GraphInput(
        node_matrix=matrix,
        polyline_slices=tuple(slices),
        polyline_kinds=tuple(g[0] for g in groups),
        polyline_ids=tuple(g[1] for g in groups),
        target_index=0,
    )
