"""
中心差分による勾配検証（テスト用オラクル）
"""

from typing import Callable

import numpy as np

from core.errors import NonFiniteError
from core.tensor import Tensor, backward


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """
    解析勾配と中心差分の最大相対誤差を返す

    相対誤差 = |analytic - numeric| / (|analytic| + 1e-8)

    Args:
        f: Tensor を受け取りスカラー Tensor を返す関数
        x: 評価点
        h: 差分幅

    Raises:
        NonFiniteError: f が非有限値を返した場合
    """
    point = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(point, requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("finite_diff_check: f(x) が非有限値です")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(point)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    numeric_flat = numeric.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = f(Tensor(point)).item()
        flat[i] = original - h
        f_minus = f(Tensor(point)).item()
        flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"finite_diff_check: 座標 {i} で f が非有限値です")
        numeric_flat[i] = (f_plus - f_minus) / (2.0 * h)

    if point.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
