"""
逆伝播（reverse-mode自動微分）付きの密テンソル

【設計】
- 値は float64 の numpy 配列（行優先）で保持する
- 演算ごとに計算ノードを記録する。trace_id は単調増加なので、昇順がそのままトポロジカル順になる
- ブロードキャストは「スカラー対テンソル」と「同一形状」のみ許可する
- relu / clamp の折れ点での劣勾配は 0
- 有限値の入力から inf / NaN が生じた場合は NonFiniteError を送出する
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import DomainError, NonFiniteError, ShapeError, TraceError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_trace_ids = itertools.count(1)

UNARY_OPS = ('neg', 'exp', 'log', 'relu', 'clamp', 'square')
BINARY_OPS = ('add', 'sub', 'mul', 'div')


class Node:
    """
    計算トレース上の1ノード
    演算タグ・入力テンソル・中間値を閉じ込めた逆伝播関数を保持する
    """

    __slots__ = ('op', 'inputs', 'backward_fn', 'trace_id', 'released')

    def __init__(self, op: str, inputs: Tuple['Tensor', ...], backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.trace_id = next(_trace_ids)
        self.released = False

    def release(self) -> None:
        """逆伝播後に中間値を解放する（以後このノードは再利用できない）"""
        self.backward_fn = None
        self.inputs = ()
        self.released = True


class Tensor:
    """
    勾配バッファと計算トレースへの参照を持つ n 次元テンソル

    Args:
        values: 値（配列・リスト・スカラー）。float64 にコピーされる
        requires_grad: 葉テンソルとして勾配を受け取るかどうか
        name: パラメータ名など（任意）
    """

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.name = None
        out._grad = None
        out._node = None
        return out

    # ---- 属性 ----

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self._grad

    @property
    def trace_id(self) -> Optional[int]:
        return self._node.trace_id if self._node is not None else None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() はスカラー専用です（形状 {self.shape}）")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ---- 演算子 ----

    def __add__(self, other):
        return elementwise('add', self, as_tensor(other))

    def __radd__(self, other):
        return elementwise('add', as_tensor(other), self)

    def __sub__(self, other):
        return elementwise('sub', self, as_tensor(other))

    def __rsub__(self, other):
        return elementwise('sub', as_tensor(other), self)

    def __mul__(self, other):
        return elementwise('mul', self, as_tensor(other))

    def __rmul__(self, other):
        return elementwise('mul', as_tensor(other), self)

    def __truediv__(self, other):
        return elementwise('div', self, as_tensor(other))

    def __rtruediv__(self, other):
        return elementwise('div', as_tensor(other), self)

    def __neg__(self):
        return elementwise('neg', self)

    def __matmul__(self, other):
        from core import ops
        return ops.matmul(self, as_tensor(other))

    def exp(self) -> 'Tensor':
        return elementwise('exp', self)

    def log(self) -> 'Tensor':
        return elementwise('log', self)

    def relu(self) -> 'Tensor':
        return elementwise('relu', self)

    def square(self) -> 'Tensor':
        return elementwise('square', self)

    def clamp(self, lo: Optional[float] = None, hi: Optional[float] = None) -> 'Tensor':
        return elementwise('clamp', self, lo=lo, hi=hi)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> 'Tensor':
        from core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None) -> 'Tensor':
        from core import ops
        return ops.mean(self, axis=axis)

    def max(self, axis: Optional[int] = None) -> 'Tensor':
        from core import ops
        return ops.max(self, axis=axis)

    def reshape(self, *shape) -> 'Tensor':
        from core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self) -> 'Tensor':
        from core import ops
        return ops.transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    """Tensor以外の値を勾配なしの定数テンソルに変換する"""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """
    演算結果をテンソル化し、入力のいずれかが追跡対象ならトレースにノードを追加する

    Raises:
        NonFiniteError: 有限値の入力から非有限値が生じた場合
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all() and all(np.isfinite(t.data).all() for t in inputs):
        raise NonFiniteError(f"{op}: 有限値の入力から非有限値が生じました（形状 {data.shape}）")
    out = Tensor._wrap(data)
    if any(t.tracked for t in inputs):
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.shape == (1,)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{op}: 形状 {a.shape} と {b.shape} は演算できません（スカラーか同一形状のみ）")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None,
                lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """
    要素ごとの演算

    Args:
        op: add / sub / mul / div / neg / exp / log / relu / clamp / square
        a, b: 入力（二項演算のみ b が必要）
        lo, hi: clamp の下限・上限（None は無制限）

    Raises:
        ShapeError: 形状がブロードキャストできない
        DomainError: log に非正値、div にゼロ除算
    """
    if op in BINARY_OPS:
        if b is None:
            raise ValueError(f"{op} には2つの入力が必要です")
        _check_broadcast(op, a, b)
        return _BINARY[op](a, b)
    if op in UNARY_OPS:
        if b is not None:
            raise ValueError(f"{op} は単項演算です")
        if op == 'clamp':
            return _clamp(a, lo, hi)
        return _UNARY[op](a)
    raise ValueError(f"未対応の演算です: {op}")


def _add(a: Tensor, b: Tensor) -> Tensor:
    return record('add', a.data + b.data, (a, b),
                  lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    return record('sub', a.data - b.data, (a, b),
                  lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    a_data, b_data = a.data, b.data
    return record('mul', a_data * b_data, (a, b),
                  lambda g: (_reduce_to(g * b_data, a), _reduce_to(g * a_data, b)))


def _div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise DomainError("div: ゼロ除算です")
    a_data, b_data = a.data, b.data
    return record('div', a_data / b_data, (a, b),
                  lambda g: (_reduce_to(g / b_data, a), _reduce_to(-g * a_data / (b_data * b_data), b)))


def _neg(a: Tensor) -> Tensor:
    return record('neg', -a.data, (a,), lambda g: (-g,))


def _exp(a: Tensor) -> Tensor:
    with np.errstate(over='ignore'):
        y = np.exp(a.data)
    return record('exp', y, (a,), lambda g: (g * y,))


def _log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: 非正の入力があります（最小値 {a.data.min()}）")
    a_data = a.data
    return record('log', np.log(a_data), (a,), lambda g: (g / a_data,))


def _relu(a: Tensor) -> Tensor:
    mask = (a.data > 0.0).astype(np.float64)
    return record('relu', a.data * mask, (a,), lambda g: (g * mask,))


def _square(a: Tensor) -> Tensor:
    a_data = a.data
    return record('square', a_data * a_data, (a,), lambda g: (2.0 * a_data * g,))


def _clamp(a: Tensor, lo: Optional[float], hi: Optional[float]) -> Tensor:
    lo_v = -np.inf if lo is None else float(lo)
    hi_v = np.inf if hi is None else float(hi)
    if lo_v > hi_v:
        raise ValueError(f"clamp: 下限 {lo_v} が上限 {hi_v} を超えています")
    # 折れ点（境界ちょうど）と範囲外の劣勾配は 0
    mask = ((a.data > lo_v) & (a.data < hi_v)).astype(np.float64)
    return record('clamp', np.clip(a.data, lo_v, hi_v), (a,), lambda g: (g * mask,))


_BINARY = {'add': _add, 'sub': _sub, 'mul': _mul, 'div': _div}
_UNARY = {'neg': _neg, 'exp': _exp, 'log': _log, 'relu': _relu, 'square': _square}


@dataclass
class Trace:
    """
    スカラー root から到達できるノード列（trace_id 昇順 = トポロジカル順）
    逆伝播では各ノードをちょうど1回訪問し、訪問後に解放する
    """
    nodes: List[Node]
    root: int

    @classmethod
    def from_root(cls, root: Tensor) -> 'Trace':
        if root._node is None:
            raise TraceError("計算トレースに接続されていないテンソルです")
        if root._node.released:
            raise TraceError("このトレースは backward 済みです。再度 forward してください")

        seen: Dict[int, Node] = {}
        stack = [root._node]
        while stack:
            node = stack.pop()
            if node.trace_id in seen:
                continue
            if node.released:
                raise TraceError(f"切り離されたトレースです（ノード {node.trace_id}: {node.op}）")
            seen[node.trace_id] = node
            for t in node.inputs:
                if t._node is not None and t._node.trace_id not in seen:
                    stack.append(t._node)

        return cls(nodes=[seen[k] for k in sorted(seen)], root=root._node.trace_id)

    def run(self, seed_grad: np.ndarray) -> int:
        """逆伝播を実行し、訪問したノード数を返す"""
        grads: Dict[int, np.ndarray] = {self.root: seed_grad}
        visited = 0
        for node in reversed(self.nodes):
            g = grads.pop(node.trace_id, None)
            if g is not None:
                for t, gi in zip(node.inputs, node.backward_fn(g)):
                    if gi is None:
                        continue
                    if t._node is not None:
                        key = t._node.trace_id
                        grads[key] = grads[key] + gi if key in grads else gi
                    elif t.requires_grad:
                        t._accumulate(gi)
            node.release()
            visited += 1
        return visited


def backward(root: Tensor) -> None:
    """
    スカラー root について、requires_grad な全ての葉テンソルに ∂root/∂leaf を加算する

    Raises:
        ShapeError: root がスカラーでない
        TraceError: トレースが切り離されている、または backward 済み
    """
    if root.size != 1:
        raise ShapeError(f"backward の root はスカラーである必要があります（形状 {root.shape}）")
    if root._node is None:
        if root.requires_grad:
            root._accumulate(np.ones_like(root.data))
            return
        raise TraceError("計算トレースに接続されていないテンソルです")

    trace = Trace.from_root(root)
    visited = trace.run(np.ones_like(root.data))
    logger.debug(f"逆伝播が完了しました（ノード数: {visited}）")
