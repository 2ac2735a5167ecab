"""
損失曲面（入力空間・重み空間）
"""

import logging
from dataclasses import replace
from typing import Dict, Sequence

import numpy as np

from models.config import AttackConfig
from models.results import InputSurface, WeightSurface
from services import attacks, losses
from services.classifier import Classifier

logger = logging.getLogger(__name__)


def _pgd10(cfg: AttackConfig) -> AttackConfig:
    return replace(cfg, steps=10, step_size=None, random_start=True, restarts=1)


def _adversarial_loss(c: Classifier, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> float:
    x_adv = attacks.pgd(c, x, y, cfg).x_adv
    with c.frozen():
        return losses.cross_entropy(c.probs(x_adv), y).item()


def grid_axis(epsilon: float, resolution: int) -> np.ndarray:
    """[-ε, ε] の等間隔格子（resolution が奇数なら中央はちょうど 0）"""
    if resolution < 2:
        raise ValueError(f"resolution は2以上である必要があります: {resolution}")
    i = np.arange(resolution)
    return epsilon * (2 * i - (resolution - 1)) / (resolution - 1)


def input_loss_surface(c: Classifier, x, y, attack_cfg: AttackConfig, resolution: int = 21,
                       seed: int = 0) -> InputSurface:
    """
    x' = clip(x + δ1·v + δ2·r) 上の CE 損失（バッチ平均）

    v: PGD^10 の摂動方向（L∞ ノルム 1 に正規化）
    r: ラデマッハ乱数の方向
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
        y = y.reshape(1)
    eps = attack_cfg.epsilon
    delta = attacks.pgd(c, x, y, _pgd10(attack_cfg)).x_adv - x
    scale = np.abs(delta).max(axis=1, keepdims=True)
    v = np.divide(delta, scale, out=np.zeros_like(delta), where=scale > 0)
    r = np.random.default_rng(seed).choice([-1.0, 1.0], size=x.shape)

    axis = grid_axis(eps, resolution)
    grid = np.zeros((resolution, resolution))
    with c.frozen():
        for i, d1 in enumerate(axis):
            for j, d2 in enumerate(axis):
                moved = np.clip(x + d1 * v + d2 * r, 0.0, 1.0)
                grid[i, j] = losses.cross_entropy(c.probs(moved), y).item()
    return InputSurface(delta1=axis, delta2=axis.copy(), losses=grid)


def filter_normalized_direction(c: Classifier, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    パラメータごとのランダム方向をフィルタ単位で正規化する
    全結合の重みは出力ユニット（列）、畳み込みはフィルタ（先頭軸）ごとに ‖d‖ = ‖θ‖ とし、バイアスの方向は 0
    """
    direction: Dict[str, np.ndarray] = {}
    for name, p in c.params.items():
        theta = p.data
        if name.endswith('.bias'):
            direction[name] = np.zeros_like(theta)
            continue
        d = rng.standard_normal(theta.shape)
        if theta.ndim == 4:
            axes = (1, 2, 3)
            theta_norm = np.sqrt((theta ** 2).sum(axis=axes, keepdims=True))
            d_norm = np.sqrt((d ** 2).sum(axis=axes, keepdims=True))
        else:
            theta_norm = np.sqrt((theta ** 2).sum(axis=0, keepdims=True))
            d_norm = np.sqrt((d ** 2).sum(axis=0, keepdims=True))
        direction[name] = d * theta_norm / np.where(d_norm > 0, d_norm, 1.0)
    return direction


def weight_loss_surface(c: Classifier, x, y, attack_cfg: AttackConfig, magnitudes: Sequence[float],
                        directions: int = 5, seed: int = 0) -> WeightSurface:
    """
    θ + δ·d での敵対損失（PGD^10 を各点で作り直した CE）を方向ごとに計算する
    元の分類器のパラメータは変更しない
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    cfg = _pgd10(attack_cfg)
    rng = np.random.default_rng(seed)
    probe = c.clone()
    base = c.state()
    curves = np.zeros((directions, magnitudes.size))

    for k in range(directions):
        d = filter_normalized_direction(c, rng)
        for j, delta in enumerate(magnitudes):
            probe.load_state({name: base[name] + delta * d[name] for name in base})
            curves[k, j] = _adversarial_loss(probe, x, y, cfg)
        logger.debug(f"重み空間の方向 {k + 1}/{directions}: 損失 {curves[k].min():.4f}〜{curves[k].max():.4f}")
    return WeightSurface(magnitudes=magnitudes, per_direction=curves)
