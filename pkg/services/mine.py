"""
MINE（相互情報量のニューラル推定）

Donsker–Varadhan 下界 E_joint[T] - log E_marginal[e^T] を統計量ネットワーク T で最大化する
周辺分布のサンプルはバッチ内で z をシャッフルして作る

【入力の前処理】
高次元の x / z はそのままでは小さな T に入らないため、
列を embed_width 個のグループに分けて平均プーリングし、バッチ内で標準化してから連結する
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import numpy as np

from core import ops
from core.errors import MineDivergenceError, ShapeError
from core.tensor import Tensor, as_tensor, backward
from services.classifier import Classifier
from services.optimizer import Adam

logger = logging.getLogger(__name__)

MIN_BATCH = 16
DIVERGENCE_MARGIN = 1.0


def _columns(a) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    return a.reshape(a.shape[0], -1)


def pool_embedding(a: np.ndarray, width: int) -> np.ndarray:
    """列を width 個の連続グループに分けて平均する（width 以下の次元はそのまま）"""
    if a.shape[1] <= width:
        return a
    groups = np.array_split(np.arange(a.shape[1]), width)
    return np.stack([a[:, g].mean(axis=1) for g in groups], axis=1)


def standardize(a: np.ndarray) -> np.ndarray:
    std = a.std(axis=0)
    return (a - a.mean(axis=0)) / np.where(std > 1e-8, std, 1.0)


@dataclass
class StatisticsNet:
    """
    統計量ネットワーク T(x, z)
    連結した (x埋め込み, z埋め込み) → 64 → 64 → スカラー（relu）
    """
    x_dim: int
    z_dim: int
    params: Dict[str, Tensor]
    embed_width: int = 16
    history: List[float] = field(default_factory=list)

    @classmethod
    def create(cls, x_dim: int, z_dim: int, hidden: int = 64, seed: int = 0, embed_width: int = 16) -> 'StatisticsNet':
        """生の次元数を受け取り、プーリング後の幅でネットワークを初期化する"""
        xw, zw = min(x_dim, embed_width), min(z_dim, embed_width)
        rng = np.random.default_rng(seed)
        widths = [xw + zw, hidden, hidden, 1]
        params: Dict[str, Tensor] = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            bound = 1.0 / np.sqrt(fan_in)
            params[f'l{i}.weight'] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
            params[f'l{i}.bias'] = Tensor(np.zeros(fan_out), requires_grad=True)
        return cls(x_dim=x_dim, z_dim=z_dim, params=params, embed_width=embed_width)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def prepare(self, xs, zs) -> Tuple[np.ndarray, np.ndarray]:
        xs, zs = _columns(xs), _columns(zs)
        if xs.shape[0] != zs.shape[0]:
            raise ShapeError(f"xs と zs の件数が一致しません: {xs.shape[0]} != {zs.shape[0]}")
        if xs.shape[1] != self.x_dim or zs.shape[1] != self.z_dim:
            raise ShapeError(f"統計量ネットワークの入力次元が一致しません: x={xs.shape[1]}, z={zs.shape[1]}")
        return (standardize(pool_embedding(xs, self.embed_width)),
                standardize(pool_embedding(zs, self.embed_width)))

    def __call__(self, xe: np.ndarray, ze: np.ndarray) -> Tensor:
        """前処理済みの埋め込みの組ごとに T を返す (n,)"""
        n = xe.shape[0]
        h = as_tensor(np.concatenate([xe, ze], axis=1))
        for i in (1, 2, 3):
            h = h @ self.params[f'l{i}.weight'] + ops.expand_rows(self.params[f'l{i}.bias'], n)
            if i < 3:
                h = h.relu()
        return h.reshape(n)


def dv_bound(net: StatisticsNet, xe: np.ndarray, ze: np.ndarray, perm: np.ndarray) -> Tensor:
    """E_joint[T] - log mean exp(T(x, z_shuffled))"""
    joint = net(xe, ze).mean()
    marginal = ops.log_mean_exp(net(xe, ze[perm]))
    return joint - marginal


def _check_bound(value: float, n: int) -> None:
    limit = np.log(n) + DIVERGENCE_MARGIN
    if not np.isfinite(value) or value > limit:
        raise MineDivergenceError(f"MINE の推定値が不安定です: {value}（上限 ln(n) + {DIVERGENCE_MARGIN} = {limit:.4f}）")


def mine_estimate(net: StatisticsNet, xs, zs, train_steps: int = 500, seed: int = 0,
                  lr: float = 5e-3, eval_shuffles: int = 10) -> float:
    """
    DV 下界を train_steps 回の勾配上昇で最大化し、最終的な推定値を返す

    推定値は学習後に新しいシャッフルを eval_shuffles 回作って平均したもの
    学習中の下界の値は net.history に追記する

    Raises:
        ValueError: バッチが16件未満
        MineDivergenceError: 推定値が ln(n) + 1 を超える、または非有限
    """
    xe, ze = net.prepare(xs, zs)
    n = xe.shape[0]
    if n < MIN_BATCH:
        raise ValueError(f"MINE には {MIN_BATCH} 件以上のバッチが必要です: {n}")
    rng = np.random.default_rng(seed)
    optimizer = Adam(net.parameters(), lr=lr, maximize=True)

    for step in range(train_steps):
        optimizer.zero_grad()
        bound = dv_bound(net, xe, ze, rng.permutation(n))
        backward(bound)
        optimizer.step()
        net.history.append(bound.item())
        _check_bound(bound.item(), n)
        if (step + 1) % 100 == 0:
            logger.debug(f"MINE ステップ {step + 1}/{train_steps}: 下界 {bound.item():.4f}")

    for p in net.parameters():
        p.zero_grad()
    values = [dv_bound(net, xe, ze, rng.permutation(n)).item() for _ in range(eval_shuffles)]
    estimate = float(np.mean(values))
    _check_bound(estimate, n)
    return estimate


def critic_for(c: Classifier, tap: Union[int, str], seed: int = 0) -> StatisticsNet:
    """分類器の入力とタップ出力の次元に合わせた統計量ネットワークを作る"""
    name = c.numbered_tap(tap) if isinstance(tap, int) else tap
    with c.frozen():
        z_dim = c.latent(np.zeros((1, c.architecture.input_dim)), name).size
    return StatisticsNet.create(c.architecture.input_dim, z_dim, seed=seed)


def batch_mi_weight(c: Classifier, net: StatisticsNet, batch_xs, tap: Union[int, str],
                    train_steps: int = 50, seed: int = 0) -> float:
    """
    バッチの全事例で共有する重み I(x_batch; z_batch) を推定する

    tap は層番号 #1〜#4 またはタップ名
    統計量ネットワークは呼び出し側が保持し、次のバッチで学習を続ける
    """
    name = c.numbered_tap(tap) if isinstance(tap, int) else tap
    xs = _columns(batch_xs)
    with c.frozen():
        zs = _columns(c.latent(xs, name).data)
    return mine_estimate(net, xs, zs, train_steps=train_steps, seed=seed, eval_shuffles=1)
