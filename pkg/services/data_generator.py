"""
合成データ生成サービス
小規模な実験・テスト用のデータセットをシード付きで生成する
"""

import logging
from typing import Tuple

import numpy as np

from models.dataset import LabeledDataset

logger = logging.getLogger(__name__)


def _rescale_unit(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    座標ごとにアフィン変換で [0,1] に収める（定数の座標は 0.5）
    Returns:
        (変換後の点, 各座標の最小値, 各座標の最大値)
    """
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (points - lo) / safe, 0.5)
    return np.clip(scaled, 0.0, 1.0), lo, hi


class SyntheticDataGenerator:
    """
    シード付きの合成データ生成クラス

    【生成できるデータ】
    - two moons: 交差する2つの半円（2クラス、2次元）
    - 相関のある2変量ガウス: MINE の較正用（相互情報量 -½ln(1-ρ²) が既知）
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def two_moons(self, n: int, noise: float = 0.0) -> LabeledDataset:
        """
        two moons データを生成

        外側の半円 (cos t, sin t) がクラス0、内側の半円 (1 - cos t, 0.5 - sin t) がクラス1
        （t は [0, π] を等分）。ノイズ付加後に [0,1]² へ線形に縮小する

        Args:
            n: 総件数（偶数）
            noise: ガウスノイズの標準偏差
        """
        if n < 0 or n % 2:
            raise ValueError(f"two moons の件数は0以上の偶数である必要があります: {n}")
        if noise < 0:
            raise ValueError(f"noise は0以上である必要があります: {noise}")

        half = n // 2
        t = np.linspace(0.0, np.pi, half)
        outer = np.stack([np.cos(t), np.sin(t)], axis=1)
        inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        points = np.concatenate([outer, inner]).reshape(n, 2)
        labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
        if noise > 0:
            points = points + self.rng.normal(0.0, noise, size=points.shape)

        if n:
            scaled, lo, hi = _rescale_unit(points)
        else:
            scaled, lo, hi = points, np.zeros(2), np.zeros(2)
        dataset = LabeledDataset(
            inputs=scaled,
            labels=labels,
            num_classes=2,
            name="two_moons",
            meta={'noise': noise, 'seed': self.seed, 'scale_min': lo.tolist(), 'scale_max': hi.tolist()}
        )
        dataset.validate()
        logger.info(f"two moons データを生成しました: {n}件（noise={noise}, seed={self.seed}）")
        return dataset

    def correlated_gaussians(self, n: int, rho: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        相関係数 rho の標準2変量ガウスから (xs, zs) を n 組生成
        """
        if not -1.0 < rho < 1.0:
            raise ValueError(f"rho は (-1, 1) の範囲である必要があります: {rho}")
        xs = self.rng.standard_normal(n)
        noise = self.rng.standard_normal(n)
        zs = rho * xs + np.sqrt(1.0 - rho ** 2) * noise
        return xs.reshape(n, 1), zs.reshape(n, 1)


def gen_two_moons(n: int, noise: float = 0.0, seed: int = 0) -> LabeledDataset:
    return SyntheticDataGenerator(seed).two_moons(n, noise)


def gen_correlated_gaussians(n: int, rho: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    return SyntheticDataGenerator(seed).correlated_gaussians(n, rho)


def gaussian_mutual_information(rho: float) -> float:
    """2変量ガウスの相互情報量 -½ln(1-ρ²)"""
    return -0.5 * float(np.log(1.0 - rho ** 2))
