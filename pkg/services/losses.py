"""
損失関数・分布間の距離・エントロピー

確率は (batch, K) の Tensor で受け取り、事例ごとの値を (batch,) で返す
スカラー損失（cross_entropy / boosted_cross_entropy）はバッチ平均を返す
"""

import numpy as np

from core import ops
from core.errors import DomainError, ShapeError
from core.tensor import Tensor, as_tensor
from models.config import Divergence

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9


def _rows(p) -> Tensor:
    p = as_tensor(p)
    if p.ndim == 1:
        return p.reshape(1, p.shape[0])
    if p.ndim != 2:
        raise ShapeError(f"確率は (batch, K) である必要があります: {p.shape}")
    return p


def check_simplex(p: Tensor) -> None:
    """各行が確率単体上にあることを確認する"""
    data = p.data
    if data.size == 0:
        return
    if data.min() < -SIMPLEX_TOL or np.abs(data.sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
        raise DomainError("確率ベクトルが単体上にありません（非負かつ和が1）")


def _check_labels(y: np.ndarray, p: Tensor) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (p.shape[0],):
        raise ShapeError(f"ラベル数 {y.shape} と確率の行数 {p.shape[0]} が一致しません")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise DomainError(f"ラベルが範囲外です（K={p.shape[1]}）")
    return y


def safe_log(p: Tensor) -> Tensor:
    """log(max(p, 1e-12))。p·safe_log(p) は p=0 で 0 になる"""
    return p.clamp(lo=PROB_FLOOR).log()


# ========================================
# 事例ごとの値
# ========================================

def cross_entropy_per_example(p, y) -> Tensor:
    p = _rows(p)
    check_simplex(p)
    y = _check_labels(y, p)
    return -ops.pick(safe_log(p), y)


def entropy(p) -> Tensor:
    """
    シャノンエントロピー H(p) = -Σ_k p_k log p_k（事例ごと、0·log0 = 0）
    事例ごとの重みとして使うためバッチ平均はしない
    """
    p = _rows(p)
    check_simplex(p)
    return -(p * safe_log(p)).sum(axis=1)


def kl_divergence(p, q) -> Tensor:
    """KL(p‖q) = Σ p_k log(p_k / q_k)（q は 1e-12 で下限処理）"""
    p, q = _rows(p), _rows(q)
    check_simplex(p)
    check_simplex(q)
    return (p * (safe_log(p) - safe_log(q))).sum(axis=1)


def mse_distance(p, q) -> Tensor:
    """‖p - q‖₂²（平均ではなく二乗和）"""
    p, q = _rows(p), _rows(q)
    check_simplex(p)
    check_simplex(q)
    return (p - q).square().sum(axis=1)


def js_divergence(p, q) -> Tensor:
    p, q = _rows(p), _rows(q)
    m = (p + q) * 0.5
    return kl_divergence(p, m) * 0.5 + kl_divergence(q, m) * 0.5


def ce_divergence(p, q) -> Tensor:
    """-Σ p_k log q_k（p = q のとき H(p)）"""
    p, q = _rows(p), _rows(q)
    check_simplex(p)
    check_simplex(q)
    return -(p * safe_log(q)).sum(axis=1)


def boosted_cross_entropy_per_example(p, y) -> Tensor:
    """
    -log p_y - log(1 - max_{k≠y} p_k)
    MART の強化交差エントロピー。確率は [1e-12, 1-1e-12] に収める
    """
    p = _rows(p)
    check_simplex(p)
    if p.shape[1] < 2:
        raise DomainError(f"boosted cross entropy には K >= 2 が必要です: K={p.shape[1]}")
    y = _check_labels(y, p)
    clipped = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    mask = ops.one_hot(y, p.shape[1])
    # 正解クラスを -1 にして他クラスの最大値を取る
    others = clipped * as_tensor(1.0 - mask) - as_tensor(mask)
    runner_up = ops.max(others, axis=1)
    return -ops.pick(clipped, y).log() - (1.0 - runner_up).log()


def margin_loss(z, y) -> Tensor:
    """CW マージン max_{k≠y} z_k - z_y（ロジットに対して計算）"""
    z = _rows(z)
    if z.shape[1] < 2:
        raise DomainError(f"マージン損失には K >= 2 が必要です: K={z.shape[1]}")
    y = _check_labels(y, z)
    mask = ops.one_hot(y, z.shape[1])
    offset = float(np.ptp(z.data)) + 1.0 if z.size else 1.0
    runner_up = ops.max(z - as_tensor(mask * offset), axis=1)
    return runner_up - ops.pick(z, y)


def divergence(kind: Divergence, p_nat, p_adv) -> Tensor:
    """
    アブレーション用の距離（第1引数が自然例の分布）
    KL と CE は KL(p_nat‖p_adv)、-Σ p_nat log p_adv の向き
    """
    if kind is Divergence.MSE:
        return mse_distance(p_nat, p_adv)
    if kind is Divergence.KL:
        return kl_divergence(p_nat, p_adv)
    if kind is Divergence.JS:
        return js_divergence(p_nat, p_adv)
    if kind is Divergence.CE:
        return ce_divergence(p_nat, p_adv)
    raise ValueError(f"未対応の距離です: {kind}")


# ========================================
# スカラー損失（バッチ平均）
# ========================================

def cross_entropy(p, y) -> Tensor:
    return cross_entropy_per_example(p, y).mean()


def boosted_cross_entropy(p, y) -> Tensor:
    return boosted_cross_entropy_per_example(p, y).mean()
