"""
反向模式微分引擎
Grad Engine - 只支援預測模型需要的固定運算集合

所有張量為 float64；每個運算在建構輸出時檢查有限性。
Tape 記錄運算序列與反向所需的中間值，可重播驗證前向結果逐位元一致。
"""

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax as _softmax

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """運算元形狀不相容"""
    pass


class NumericFailureError(ArithmeticError):
    """出現 NaN / Inf（退出碼 4）"""
    pass


class TensorRole(Enum):
    """張量角色，決定是否回傳梯度"""
    PARAMETER = "parameter"
    INPUT = "input"
    CONSTANT = "constant"
    INTERMEDIATE = "intermediate"


class Tensor:
    """float64 row-major 張量"""

    __slots__ = ('data', 'role', 'name')

    def __init__(self, data: Any, role: TensorRole = TensorRole.CONSTANT,
                 name: Optional[str] = None, origin: str = "input"):
        array = np.array(data, dtype=np.float64)
        if array.size == 0:
            raise ShapeError(f"{origin}: empty tensor")
        if not np.all(np.isfinite(array)):
            raise NumericFailureError(f"non-finite values produced by {origin}")
        array.setflags(write=False)
        self.data = array
        self.role = role
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.role is not TensorRole.CONSTANT

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, role={self.role.value})"


def parameter(data: Any, name: str) -> Tensor:
    return Tensor(data, TensorRole.PARAMETER, name)


def input_tensor(data: Any, name: str = "input") -> Tensor:
    return Tensor(data, TensorRole.INPUT, name)


def constant(data: Any, name: Optional[str] = None) -> Tensor:
    return Tensor(data, TensorRole.CONSTANT, name)


@dataclass
class TapeEntry:
    """一筆已記錄的運算"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    saved: Dict[str, Any] = field(default_factory=dict)
    attrs: Dict[str, Any] = field(default_factory=dict)


_local = threading.local()


def _tape_stack() -> List['Tape']:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional['Tape']:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    運算記錄帶

    用法：
        with Tape() as tape:
            loss = mse(model(x), truth, mask)
        grads = gradients(tape, loss)
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._closed = False
        self._output_ids: Dict[int, int] = {}

    def __enter__(self) -> 'Tape':
        if self._closed:
            raise RuntimeError("tape already closed")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self._closed = True
        return False

    def record(self, entry: TapeEntry):
        if self._closed:
            raise RuntimeError("cannot record on a closed tape")
        self._output_ids[id(entry.output)] = len(self.entries)
        self.entries.append(entry)

    def contains(self, tensor: Tensor) -> bool:
        index = self._output_ids.get(id(tensor))
        return index is not None and self.entries[index].output is tensor

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self) -> List[np.ndarray]:
        """依記錄順序重新執行前向，回傳每個運算的輸出"""
        produced: Dict[int, np.ndarray] = {}
        outputs = []
        for entry in self.entries:
            args = [produced.get(id(t), t.data) for t in entry.inputs]
            out, _ = OPS[entry.op].forward(args, entry.attrs)
            produced[id(entry.output)] = out
            outputs.append(out)
        return outputs

    def verify_replay(self) -> bool:
        replayed = self.replay()
        return all(
            a.dtype == e.output.data.dtype and a.shape == e.output.data.shape
            and a.tobytes() == e.output.data.tobytes()
            for a, e in zip(replayed, self.entries)
        )


@dataclass(frozen=True)
class OpDef:
    forward: Callable[[List[np.ndarray], Dict[str, Any]], Tuple[np.ndarray, Dict[str, Any]]]
    backward: Callable[..., List[Optional[np.ndarray]]]


OPS: Dict[str, OpDef] = {}


def register_op(name: str, forward, backward):
    OPS[name] = OpDef(forward, backward)


def _apply(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    out_data, saved = OPS[op].forward([t.data for t in inputs], attrs)
    out = Tensor(out_data, TensorRole.INTERMEDIATE, origin=op)
    tape = active_tape()
    if tape is not None:
        tape.record(TapeEntry(op, tuple(inputs), out, saved, attrs))
    return out


def _as_tensor(value: Union[Tensor, np.ndarray, float]) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


# ========== 運算定義 ==========

def _affine_fwd(args, attrs):
    x, w, b = args
    if x.shape[-1] != w.shape[0] or w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x{x.shape} W{w.shape} b{b.shape}")
    return x @ w + b, {}


def _affine_bwd(g, args, out, saved, attrs):
    x, w, _ = args
    if x.ndim == 1:
        return [g @ w.T, np.outer(x, g), g]
    return [g @ w.T, x.T @ g, g.sum(axis=0)]


def _relu_fwd(args, attrs):
    return np.maximum(args[0], 0.0), {}


def _relu_bwd(g, args, out, saved, attrs):
    return [g * (args[0] > 0.0)]


def _layer_norm_fwd(args, attrs):
    x = args[0]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + attrs.get('eps', LAYER_NORM_EPS))
    xhat = (x - mu) * inv_std
    return xhat, {'xhat': xhat, 'inv_std': inv_std}


def _layer_norm_bwd(g, args, out, saved, attrs):
    xhat, inv_std = saved['xhat'], saved['inv_std']
    gx = inv_std * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return [gx]


def _max_pool_fwd(args, attrs):
    x = args[0]
    if x.ndim != 2:
        raise ShapeError(f"max_pool_rows expects a matrix, got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("max_pool_rows over an empty row set")
    # np.argmax 回傳第一個最大值，並列時梯度全給第一列
    argmax = np.argmax(x, axis=0)
    return x[argmax, np.arange(x.shape[1])], {'argmax': argmax}


def _max_pool_bwd(g, args, out, saved, attrs):
    gx = np.zeros_like(args[0])
    gx[saved['argmax'], np.arange(gx.shape[1])] = g
    return [gx]


def _concat_fwd(args, attrs):
    a, b = args
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1), {}


def _concat_bwd(g, args, out, saved, attrs):
    split = args[0].shape[-1]
    return [g[..., :split], g[..., split:]]


def _broadcast_rows_fwd(args, attrs):
    v = args[0]
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got {v.shape}")
    return np.tile(v, (attrs['rows'], 1)), {}


def _broadcast_rows_bwd(g, args, out, saved, attrs):
    return [g.sum(axis=0)]


def _stack_rows_fwd(args, attrs):
    widths = {a.shape for a in args}
    if len(widths) != 1 or args[0].ndim != 1:
        raise ShapeError(f"stack_rows: incompatible shapes {sorted(widths)}")
    return np.stack(args, axis=0), {}


def _stack_rows_bwd(g, args, out, saved, attrs):
    return [g[i] for i in range(len(args))]


def _take_row_fwd(args, attrs):
    x = args[0]
    index = attrs['index']
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"take_row: index {index} out of range for {x.shape}")
    return x[index].copy(), {}


def _take_row_bwd(g, args, out, saved, attrs):
    gx = np.zeros_like(args[0])
    gx[attrs['index']] = g
    return [gx]


def _slice_rows_fwd(args, attrs):
    x = args[0]
    start, stop = attrs['start'], attrs['stop']
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for {x.shape}")
    return x[start:stop].copy(), {}


def _slice_rows_bwd(g, args, out, saved, attrs):
    gx = np.zeros_like(args[0])
    gx[attrs['start']:attrs['stop']] = g
    return [gx]


def _reshape_fwd(args, attrs):
    x = args[0]
    shape = tuple(attrs['shape'])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} -> {shape}")
    return x.reshape(shape).copy(), {}


def _reshape_bwd(g, args, out, saved, attrs):
    return [g.reshape(args[0].shape)]


def _softmax_fwd(args, attrs):
    y = _softmax(args[0], axis=-1)
    return y, {'y': y}


def _softmax_bwd(g, args, out, saved, attrs):
    y = saved['y']
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


def _attention_fwd(args, attrs):
    q, k, v = args
    squeeze = q.ndim == 1
    q2 = q[None, :] if squeeze else q
    if k.ndim != 2 or v.ndim != 2 or q2.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: Q{q.shape} K{k.shape} V{v.shape}")
    scale = 1.0 / np.sqrt(k.shape[1])
    weights = _softmax(q2 @ k.T * scale, axis=-1)
    out = weights @ v
    return (out[0] if squeeze else out), {'weights': weights, 'scale': scale}


def _attention_bwd(g, args, out, saved, attrs):
    q, k, v = args
    squeeze = q.ndim == 1
    q2 = q[None, :] if squeeze else q
    g2 = g[None, :] if squeeze else g
    w, scale = saved['weights'], saved['scale']
    gv = w.T @ g2
    gw = g2 @ v.T
    gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
    gq = gs @ k * scale
    gk = gs.T @ q2 * scale
    return [gq[0] if squeeze else gq, gk, gv]


def _mse_fwd(args, attrs):
    pred, truth, mask = args
    if pred.shape != truth.shape or pred.ndim != 2 or mask.shape != pred.shape[:1]:
        raise ShapeError(f"mse: pred{pred.shape} truth{truth.shape} mask{mask.shape}")
    valid = float(mask.sum())
    if valid == 0:
        raise ShapeError("mse: mask selects no frames")
    diff = (pred - truth) * mask[:, None]
    return np.array((diff ** 2).sum() / valid), {'diff': diff, 'valid': valid}


def _mse_bwd(g, args, out, saved, attrs):
    grad = 2.0 * float(g) * saved['diff'] / saved['valid']
    return [grad, -grad, None]


def _scale_fwd(args, attrs):
    return args[0] * attrs['factor'], {}


def _scale_bwd(g, args, out, saved, attrs):
    return [g * attrs['factor']]


register_op('affine', _affine_fwd, _affine_bwd)
register_op('relu', _relu_fwd, _relu_bwd)
register_op('layer_norm', _layer_norm_fwd, _layer_norm_bwd)
register_op('max_pool_rows', _max_pool_fwd, _max_pool_bwd)
register_op('concat', _concat_fwd, _concat_bwd)
register_op('broadcast_rows', _broadcast_rows_fwd, _broadcast_rows_bwd)
register_op('stack_rows', _stack_rows_fwd, _stack_rows_bwd)
register_op('take_row', _take_row_fwd, _take_row_bwd)
register_op('slice_rows', _slice_rows_fwd, _slice_rows_bwd)
register_op('reshape', _reshape_fwd, _reshape_bwd)
register_op('softmax', _softmax_fwd, _softmax_bwd)
register_op('scaled_dot_attention', _attention_fwd, _attention_bwd)
register_op('mse', _mse_fwd, _mse_bwd)
register_op('scale', _scale_fwd, _scale_bwd)


# ========== 公開運算 ==========

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return _apply('affine', [x, w, b])


def relu(x: Tensor) -> Tensor:
    return _apply('relu', [x])


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """最後一軸正規化，不含可學習的縮放與偏移"""
    return _apply('layer_norm', [x], eps=eps)


def max_pool_rows(x: Tensor) -> Tensor:
    return _apply('max_pool_rows', [x])


def concat(a: Tensor, b: Tensor) -> Tensor:
    return _apply('concat', [a, b])


def broadcast_rows(v: Tensor, rows: int) -> Tensor:
    return _apply('broadcast_rows', [v], rows=int(rows))


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise ShapeError("stack_rows over an empty sequence")
    return _apply('stack_rows', list(rows))


def take_row(x: Tensor, index: int) -> Tensor:
    return _apply('take_row', [x], index=int(index))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return _apply('slice_rows', [x], start=int(start), stop=int(stop))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _apply('reshape', [x], shape=tuple(int(s) for s in shape))


def softmax(x: Tensor) -> Tensor:
    return _apply('softmax', [x])


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, np.ndarray]:
    """單頭縮放點積注意力，回傳 (輸出, 注意力權重)"""
    out = _apply('scaled_dot_attention', [q, k, v])
    _, saved = _attention_fwd([q.data, k.data, v.data], {})
    weights = saved['weights']
    return out, (weights[0] if q.data.ndim == 1 else weights)


def mse(pred: Tensor, truth: Union[Tensor, np.ndarray], mask: Union[Tensor, np.ndarray]) -> Tensor:
    """有效幀上的平均平方位移 (1/T) Σ ‖p̂_t − p_t‖²"""
    mask_tensor = mask if isinstance(mask, Tensor) else constant(np.asarray(mask, dtype=np.float64))
    return _apply('mse', [pred, _as_tensor(truth), mask_tensor])


def scale(x: Tensor, factor: float) -> Tensor:
    return _apply('scale', [x], factor=float(factor))


# ========== 反向傳播 ==========

@dataclass
class GradientResult:
    """∂seed/∂θ 與 ∂seed/∂x，依張量名稱索引"""
    param_grads: Dict[str, np.ndarray] = field(default_factory=dict)
    input_grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in
                   list(self.param_grads.values()) + list(self.input_grads.values()))


def gradients(tape: Tape, seed: Tensor) -> GradientResult:
    """
    從純量 seed 反向累積梯度

    Args:
        tape: 已記錄的運算帶
        seed: tape 上產生的純量張量

    Returns:
        GradientResult，包含每個參數與輸入張量的梯度
    """
    if not tape.contains(seed):
        raise ValueError("seed tensor was not produced on this tape")
    if seed.data.size != 1:
        raise ShapeError(f"seed must be a scalar, got shape {seed.shape}")

    grads: Dict[int, np.ndarray] = {id(seed): np.ones_like(seed.data)}
    leaves: Dict[int, Tensor] = {}

    for entry in reversed(tape.entries):
        g_out = grads.pop(id(entry.output), None)
        if g_out is None:
            continue
        spec = OPS[entry.op]
        input_grads = spec.backward(g_out, [t.data for t in entry.inputs],
                                    entry.output.data, entry.saved, entry.attrs)
        for tensor, g in zip(entry.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericFailureError(f"non-finite gradient in op '{entry.op}'")
            key = id(tensor)
            grads[key] = grads[key] + g if key in grads else np.array(g, dtype=np.float64)
            if tensor.role in (TensorRole.PARAMETER, TensorRole.INPUT):
                leaves[key] = tensor

    # 記錄在 tape 上但未收到梯度的葉節點補零
    for entry in tape.entries:
        for tensor in entry.inputs:
            if tensor.role in (TensorRole.PARAMETER, TensorRole.INPUT):
                leaves.setdefault(id(tensor), tensor)

    result = GradientResult()
    for key, tensor in leaves.items():
        target = (result.param_grads if tensor.role is TensorRole.PARAMETER
                  else result.input_grads)
        name = tensor.name or f"tensor_{key}"
        if name in target:
            raise ValueError(f"two distinct tensors share the name '{name}'")
        target[name] = grads.get(key, np.zeros_like(tensor.data))
    return result


# ========== 有限差分檢查 ==========

def _value_of(result) -> float:
    if isinstance(result, tuple):
        result = result[0]
    if isinstance(result, Tensor):
        return result.item()
    return float(result)


def finite_difference_errors(fn: Callable[[np.ndarray], Any], point: np.ndarray,
                             h: float = 1e-5, gradient: Optional[np.ndarray] = None,
                             floor: float = 1e-8) -> np.ndarray:
    """
    逐座標中央差分，回傳每個座標的相對誤差

    fn 回傳純量，或 (純量, 解析梯度)；未提供 gradient 時從 fn(point) 取得。
    相對誤差分母為 max(|analytic|, |numeric|, floor)。
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    point = np.array(point, dtype=np.float64)
    if gradient is None:
        evaluated = fn(point)
        if not isinstance(evaluated, tuple):
            raise ValueError("fn must return (value, gradient) when gradient is omitted")
        gradient = evaluated[1]
    analytic = np.asarray(gradient, dtype=np.float64).reshape(point.shape)

    numeric = np.empty_like(point)
    flat_point = point.reshape(-1)
    flat_numeric = numeric.reshape(-1)
    for i in range(flat_point.size):
        original = flat_point[i]
        flat_point[i] = original + h
        f_plus = _value_of(fn(point.copy()))
        flat_point[i] = original - h
        f_minus = _value_of(fn(point.copy()))
        flat_point[i] = original
        flat_numeric[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(fn: Callable[[np.ndarray], Any], point: np.ndarray,
                            h: float = 1e-5, gradient: Optional[np.ndarray] = None,
                            floor: float = 1e-8) -> float:
    """最大相對誤差；不可微點（如 relu 折點）的大誤差照實回報"""
    errors = finite_difference_errors(fn, point, h, gradient, floor)
    max_error = float(errors.max())
    logger.debug(f"finite difference check over {errors.size} coords: max rel err {max_error:.3e}")
    return max_error
