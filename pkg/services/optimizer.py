"""
パラメータ更新（SGD with momentum / Adam）
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.errors import NonFiniteError
from core.tensor import Tensor


@dataclass
class MomentumState:
    """速度ベクトル（パラメータ順）"""
    velocity: List[Optional[np.ndarray]] = field(default_factory=list)


def sgd_step(theta: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: MomentumState,
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> List[np.ndarray]:
    """
    v ← momentum·v + grad + weight_decay·θ
    θ ← θ - lr·v

    勾配が None のパラメータは勾配 0 として扱う（重み減衰は掛かる）

    Raises:
        NonFiniteError: 勾配に非有限値が含まれる場合
    """
    if not state.velocity:
        state.velocity = [None] * len(theta)
    updated = []
    for i, (p, g) in enumerate(zip(theta, grads)):
        g = np.zeros_like(p) if g is None else g
        if not np.isfinite(g).all():
            raise NonFiniteError(f"sgd_step: パラメータ {i} の勾配に非有限値が含まれています")
        v = g + weight_decay * p
        if state.velocity[i] is not None:
            v = momentum * state.velocity[i] + v
        state.velocity[i] = v
        updated.append(p - lr * v)
    return updated


class SGDMomentum:
    """
    Tensor パラメータを直接更新する SGD（momentum・weight decay 付き）
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = MomentumState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        new_values = sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                              self.lr, self.momentum, self.weight_decay)
        for p, values in zip(self.params, new_values):
            p.data = values


class Adam:
    """
    Adam（MINE の統計量ネットワーク用）
    maximize=True の場合は勾配上昇
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, maximize: bool = False):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.maximize = maximize
        self.t = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = -p.grad if self.maximize else p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError(f"Adam: パラメータ {i} の勾配に非有限値が含まれています")
            self.m[i] = self.beta1 * self.m.get(i, np.zeros_like(g)) + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v.get(i, np.zeros_like(g)) + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
