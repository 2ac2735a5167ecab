"""
攻撃・学習・評価の結果モデル
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np


@dataclass
class AdvResult:
    """
    攻撃結果モデル

    x_adv: 敵対例（‖x_adv - x‖∞ ≤ ε、[0,1] に収まる）
    success_mask: 事例ごとの攻撃成功フラグ（予測 ≠ 正解）
    loss_trajectory: 各ステップの攻撃損失（バッチ平均）。リスタートごとに連結
    weights: InfoPGD で使った事例ごとの重み（ループ前に1回だけ計算）
    """
    x_adv: np.ndarray
    success_mask: np.ndarray
    loss_trajectory: List[float] = field(default_factory=list)
    final_loss: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    @property
    def success_rate(self) -> float:
        if self.success_mask.size == 0:
            return 0.0
        return float(np.mean(self.success_mask))


@dataclass
class EpochRecord:
    """1エポック分の学習記録"""
    epoch: int
    lr: float
    clean_accuracy: float
    robust_accuracy: float
    mean_loss: float
    components: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'epoch': self.epoch,
            'lr': self.lr,
            'clean_accuracy': self.clean_accuracy,
            'robust_accuracy': self.robust_accuracy,
            'mean_loss': self.mean_loss,
            'loss_ce': self.components.get('ce', 0.0),
            'loss_reg': self.components.get('reg', 0.0),
            'loss_outer': self.components.get('outer', 0.0)
        }


@dataclass
class TrainReport:
    """
    学習結果モデル
    エポックごとのクリーン精度・頑健精度（プローブ集合へのPGD）・平均損失を保持
    """
    objective: str
    records: List[EpochRecord] = field(default_factory=list)
    batch_losses: List[float] = field(default_factory=list)

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def to_rows(self) -> List[Dict[str, Any]]:
        return [dict(objective=self.objective, **record.to_dict()) for record in self.records]


@dataclass
class ExampleRecord:
    """事例ごとの診断記録"""
    index: int
    label: int
    entropy: float
    attack_success: bool
    min_epsilon: Optional[float] = None   # None は eps_max まで頑健（番兵）


@dataclass
class AttackAccuracy:
    """1種類の攻撃に対する頑健精度"""
    attack: str
    kind: str
    epsilon: float
    steps: int
    robust_accuracy: float


@dataclass
class EvalReport:
    """
    評価結果モデル
    攻撃ごとの頑健精度・クリーン精度・事例ごとの記録を保持
    """
    clean_accuracy: float
    attacks: List[AttackAccuracy] = field(default_factory=list)
    examples: List[ExampleRecord] = field(default_factory=list)
    num_examples: int = 0

    def to_rows(self) -> List[Dict[str, Any]]:
        return [{
            'attack': a.attack,
            'kind': a.kind,
            'epsilon': a.epsilon,
            'steps': a.steps,
            'num_examples': self.num_examples,
            'clean_accuracy': self.clean_accuracy,
            'robust_accuracy': a.robust_accuracy
        } for a in self.attacks]


@dataclass
class EntropyProfile:
    """クリーン入力のエントロピーと攻撃成功の関係"""
    entropies: np.ndarray
    success: np.ndarray
    bin_edges: np.ndarray
    robust_counts: np.ndarray
    nonrobust_counts: np.ndarray
    gap: float
    p_value: float


@dataclass
class MinPerturbationProfile:
    """エントロピーと最小摂動半径の関係"""
    entropies: np.ndarray
    radii: List[Optional[float]]
    spearman: float
    p_value: float
    sentinel_count: int


@dataclass
class InputSurface:
    """入力空間の損失曲面（δ1: 敵対方向、δ2: ランダム方向）"""
    delta1: np.ndarray
    delta2: np.ndarray
    losses: np.ndarray


@dataclass
class WeightSurface:
    """重み空間の損失曲線（方向ごと + 平均）"""
    magnitudes: np.ndarray
    per_direction: np.ndarray   # (directions, len(magnitudes))

    @property
    def mean_curve(self) -> np.ndarray:
        return self.per_direction.mean(axis=0)

    @property
    def flatness(self) -> float:
        curve = self.mean_curve
        return float(curve.max() - curve.min())
