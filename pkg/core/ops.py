"""
テンソルの構造演算・縮約・ニューラルネット用演算
（matmul, sum/mean/max, expand, pick, concat, softmax, conv2d, avg_pool2d）
"""

import builtins
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import NonFiniteError, ShapeError
from core.tensor import Tensor, as_tensor, record


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2階テンソル同士の行列積"""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul は2階テンソル同士のみ対応です: {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul の内側の次元が一致しません: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    return record('matmul', a_data @ b_data, (a, b),
                  lambda g: (g @ b_data.T, a_data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose は2階テンソルのみ対応です: {a.shape}")
    return record('transpose', a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape できません: {original} -> {shape}") from e
    return record('reshape', data.copy(), (a,), lambda g: (g.reshape(original),))


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    original = a.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, original).copy(),)

    return record('sum', np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("空のテンソルの平均は定義できません")
    return sum(a, axis=axis) * (1.0 / count)


def max(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """最大値（同値の場合は最小インデックスに勾配を流す）"""
    if axis is None:
        flat = int(np.argmax(a.data))
        original = a.shape

        def _backward_all(g):
            out = np.zeros(int(np.prod(original)) if original else 1)
            out[flat] = float(np.asarray(g).reshape(-1)[0])
            return (out.reshape(original),)

        return record('max', np.asarray(a.data.reshape(-1)[flat]), (a,), _backward_all)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis=axis)
    values = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)
    original = a.shape

    def _backward(g):
        out = np.zeros(original)
        np.put_along_axis(out, idx, np.expand_dims(g, axis=axis), axis=axis)
        return (out,)

    return record('max', values, (a,), _backward)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, size in enumerate(shape):
        if size == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def expand(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """
    明示的なブロードキャスト
    要素ごとの演算は暗黙のブロードキャストをしないため、行ベクトル・列ベクトルの展開はここで行う
    """
    original = a.shape
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"expand できません: {original} -> {shape}") from e
    return record('expand', data, (a,), lambda g: (_unbroadcast(g, original),))


def expand_cols(a: Tensor, width: int) -> Tensor:
    """(n,) を (n, width) に列方向へ展開する"""
    return expand(reshape(a, (a.shape[0], 1)), (a.shape[0], width))


def expand_rows(a: Tensor, rows: int) -> Tensor:
    """(k,) を (rows, k) に行方向へ展開する"""
    return expand(a, (rows, a.shape[0]))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """(n, K) から各行 index[i] 列目を取り出して (n,) を返す"""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: 形状 {a.shape} とインデックス {index.shape} が合いません")
    rows = np.arange(a.shape[0])
    original = a.shape

    def _backward(g):
        out = np.zeros(original)
        np.add.at(out, (rows, index), g)
        return (out,)

    return record('pick', a.data[rows, index], (a,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record('concat', np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax(z: Tensor) -> Tensor:
    """
    行ごとのsoftmax（最大値を引いて安定化）
    backward: y * (g - Σ g·y)
    """
    if z.ndim != 2:
        raise ShapeError(f"softmax は (batch, K) のみ対応です: {z.shape}")
    if not np.isfinite(z.data).all():
        raise NonFiniteError("softmax: 非有限のロジットが入力されました")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record('softmax', y, (z,), _backward)


def log_softmax(z: Tensor) -> Tensor:
    if z.ndim != 2:
        raise ShapeError(f"log_softmax は (batch, K) のみ対応です: {z.shape}")
    if not np.isfinite(z.data).all():
        raise NonFiniteError("log_softmax: 非有限のロジットが入力されました")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def _backward(g):
        return (g - y * g.sum(axis=1, keepdims=True),)

    return record('log_softmax', out, (z,), _backward)


def log_mean_exp(t: Tensor) -> Tensor:
    """log(mean(exp(t))) を最大値シフトで安定に計算する（1階テンソル）"""
    if t.ndim != 1 or t.size == 0:
        raise ShapeError(f"log_mean_exp は空でない1階テンソルのみ対応です: {t.shape}")
    shift = float(t.data.max())
    return (t - shift).exp().mean().log() + shift


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    stride 1・same パディングの2次元畳み込み（im2col）

    Args:
        x: (N, C, H, W)
        w: (F, C, kh, kw)、kh / kw は奇数
        b: (F,)
    """
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d の形状が不正です: x={x.shape}, w={w.shape}, b={b.shape}")
    n, c, h, width = x.shape
    f, wc, kh, kw = w.shape
    if wc != c or b.shape[0] != f:
        raise ShapeError(f"conv2d のチャネル数が一致しません: x={x.shape}, w={w.shape}, b={b.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d のカーネルサイズは奇数のみ対応です: {w.shape}")

    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)
    w_data = w.data
    out = np.tensordot(cols, w_data, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, F)
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def _backward(g):
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)
        db = g.sum(axis=(0, 2, 3))
        dpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                dpad[:, :, i:i + h, j:j + width] += np.tensordot(g, w_data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        return (dpad[:, :, ph:ph + h, pw:pw + width], dw, db)

    return record('conv2d', out, (x, w, b), _backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """k×k 平均プーリング（H, W は k の倍数）"""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d は4階テンソルのみ対応です: {x.shape}")
    n, c, h, width = x.shape
    if h % k or width % k:
        raise ShapeError(f"avg_pool2d: 空間サイズ {h}x{width} が {k} で割り切れません")
    out = x.data.reshape(n, c, h // k, k, width // k, k).mean(axis=(3, 5))

    def _backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return record('avg_pool2d', out, (x,), _backward)


def total(tensors: Sequence[Tensor]) -> Tensor:
    """同一形状テンソルの和（左から順に加算）"""
    if not tensors:
        raise ValueError("total には1つ以上のテンソルが必要です")
    return builtins.sum(tensors[1:], tensors[0])
