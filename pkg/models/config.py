"""
学習・攻撃の設定モデル
攻撃（内側の最大化）と学習（外側の最小化）のパラメータを管理
"""

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List, Optional, Tuple

from core.errors import ConfigError


class Objective(Enum):
    """
    学習目的関数
    どの min-max 定式化で学習するかを指定
    """
    AT = "at"                # 標準的な敵対的学習
    TRADES = "trades"        # CE + λ·KL
    MART = "mart"            # BCE + λ·KL·(1 - p_y)
    MART_PLUS = "mart_plus"  # MARTの重みをエントロピーに置換
    INFOAT = "infoat"        # エントロピー重み付きMSE + 敵対エントロピー正則化
    PLAIN_CE = "plain_ce"    # 敵対例なしの通常学習


class Weighting(Enum):
    """事例ごとの正則化重み"""
    ENTROPY = "entropy"          # H(p(x))
    ONE_MINUS_P = "one_minus_p"  # 1 - p_y(x)
    NONE = "none"                # 全事例に同じ重み
    MINE = "mine"                # バッチ単位のMINE推定値


class Divergence(Enum):
    """自然例と敵対例の予測分布の距離"""
    MSE = "mse"
    KL = "kl"
    JS = "js"
    CE = "ce"


class OuterReg(Enum):
    """外側の最小化に加えるエントロピー正則化"""
    MINUS_H_ADV = "minus_H_adv"
    PLUS_H_ADV = "plus_H_adv"
    MINUS_H_NAT = "minus_H_nat"
    PLUS_H_NAT = "plus_H_nat"
    NONE = "none"


class LossKind(Enum):
    """攻撃が最大化する損失"""
    CE = "ce"
    KL_TRADES = "kl_trades"
    CW_MARGIN = "cw_margin"
    INFO = "info"


class AttackKind(Enum):
    """評価で使う攻撃の種類"""
    FGSM = "fgsm"
    PGD = "pgd"
    CW_PGD = "cw_pgd"
    INFO_PGD = "info_pgd"
    SPSA = "spsa"


def parse_fraction(value: Any) -> float:
    """'8/255' のような分数表記も受け付けて float に変換する"""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"数値として解釈できません: {value!r}") from e


_TRUE = {'true', '1', 'yes', 'on'}
_FALSE = {'false', '0', 'no', 'off'}


def parse_bool(value: Any) -> bool:
    """bool または 'true' / 'false' / 'yes' / 'off' などの文字列を bool に変換する"""
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ConfigError(f"true / false で指定してください: {value!r}")


@dataclass
class AttackConfig:
    """
    攻撃設定モデル
    L∞ 球の半径・反復回数・ステップ幅などを管理
    """
    epsilon: float = 8 / 255
    steps: int = 10                     # T_I
    step_size: Optional[float] = None   # α_I（None の場合は ε/4）
    random_start: bool = True
    lam: float = 2.5                    # InfoPGD の λ
    restarts: int = 1
    loss_kind: LossKind = LossKind.CE
    norm: str = "linf"
    seed: int = 0
    spsa_batch: int = 128
    spsa_lr: float = 0.01
    spsa_delta: float = 0.001

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def validate(self) -> None:
        """設定値の妥当性検証"""
        if self.norm != "linf":
            raise ConfigError(f"L∞ ノルムのみ対応しています: {self.norm}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon は0以上である必要があります: {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps は1以上である必要があります: {self.steps}")
        if self.restarts < 1:
            raise ConfigError(f"restarts は1以上である必要があります: {self.restarts}")
        if not 0 <= self.alpha <= 2 * self.epsilon:
            raise ConfigError(f"step_size は [0, 2ε] の範囲である必要があります: α={self.alpha}, ε={self.epsilon}")
        if self.lam < 0:
            raise ConfigError(f"lambda は0以上である必要があります: {self.lam}")
        if self.spsa_batch < 2:
            raise ConfigError(f"spsa_batch は2以上である必要があります: {self.spsa_batch}")

    def to_dict(self) -> Dict[str, Any]:
        """辞書形式に変換"""
        return {
            'epsilon': self.epsilon,
            'steps': self.steps,
            'step_size': self.alpha,
            'random_start': self.random_start,
            'lambda': self.lam,
            'restarts': self.restarts,
            'loss_kind': self.loss_kind.value,
            'seed': self.seed,
            'spsa_batch': self.spsa_batch,
            'spsa_lr': self.spsa_lr,
            'spsa_delta': self.spsa_delta
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AttackConfig':
        """辞書からAttackConfigオブジェクトを生成"""
        step_size = data.get('step_size')
        return cls(
            epsilon=parse_fraction(data.get('epsilon', 8 / 255)),
            steps=int(data.get('steps', 10)),
            step_size=None if step_size in (None, '') else parse_fraction(step_size),
            random_start=parse_bool(data.get('random_start', True)),
            lam=float(data.get('lambda', 2.5)),
            restarts=int(data.get('restarts', 1)),
            loss_kind=LossKind(data.get('loss_kind', 'ce')),
            seed=int(data.get('seed', 0)),
            spsa_batch=int(data.get('spsa_batch', 128)),
            spsa_lr=float(data.get('spsa_lr', 0.01)),
            spsa_delta=float(data.get('spsa_delta', 0.001))
        )


@dataclass
class AblationConfig:
    """
    アブレーション設定
    重み付け・距離・外側正則化の組み合わせを指定
    """
    weighting: Weighting = Weighting.ENTROPY
    divergence: Divergence = Divergence.MSE
    outer_reg: OuterReg = OuterReg.MINUS_H_ADV
    detach_nat_entropy: bool = False
    mine_tap: int = 1
    mine_steps: int = 50

    def is_default(self) -> bool:
        return (self.weighting is Weighting.ENTROPY and self.divergence is Divergence.MSE
                and self.outer_reg is OuterReg.MINUS_H_ADV)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'weighting': self.weighting.value,
            'divergence': self.divergence.value,
            'outer_reg': self.outer_reg.value,
            'detach_nat_entropy': self.detach_nat_entropy,
            'mine_tap': self.mine_tap,
            'mine_steps': self.mine_steps
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AblationConfig':
        return cls(
            weighting=Weighting(data.get('weighting', 'entropy')),
            divergence=Divergence(data.get('divergence', 'mse')),
            outer_reg=OuterReg(data.get('outer_reg', 'minus_H_adv')),
            detach_nat_entropy=parse_bool(data.get('detach_nat_entropy', False)),
            mine_tap=int(data.get('mine_tap', 1)),
            mine_steps=int(data.get('mine_steps', 50))
        )


def scaled_lr_drops(epochs: int) -> List[int]:
    """75 / 90 / 100 エポックの減衰点を学習エポック数に比例縮小する"""
    drops = sorted({max(1, round(epochs * r)) for r in (0.75, 0.90, 1.0)})
    return drops


@dataclass
class TrainConfig:
    """
    学習設定モデル
    目的関数・λ・β・SGDのハイパーパラメータ・内側の攻撃設定を管理
    """
    objective: Objective = Objective.INFOAT
    lam: float = 2.5
    beta: float = 0.2
    epochs: int = 10                    # T_O
    batch_size: int = 128               # m
    lr: float = 0.01                    # α_O
    momentum: float = 0.9
    weight_decay: float = 3.5e-3
    lr_drops: Optional[List[int]] = None  # None の場合は scaled_lr_drops(epochs)
    lr_factor: float = 0.1
    seed: int = 0
    probe_size: int = 256
    attack: AttackConfig = field(default_factory=AttackConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def drops(self) -> List[int]:
        return list(self.lr_drops) if self.lr_drops is not None else scaled_lr_drops(self.epochs)

    def lr_at(self, epoch: int) -> float:
        """epoch（1始まり）での学習率。減衰点に達するごとに lr_factor を掛ける"""
        passed = sum(1 for d in self.drops if epoch >= d)
        return self.lr * (self.lr_factor ** passed)

    def validate(self) -> None:
        """設定値の妥当性検証"""
        if not isinstance(self.objective, Objective):
            raise ConfigError(f"Invalid objective: {self.objective}")
        if self.lam < 0:
            raise ConfigError(f"lambda は0以上である必要があります: {self.lam}")
        if self.beta < 0:
            raise ConfigError(f"beta は0以上である必要があります: {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size は1以上である必要があります: {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs は1以上である必要があります: {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr は正である必要があります: {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum は [0, 1) の範囲である必要があります: {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay は0以上である必要があります: {self.weight_decay}")
        if self.ablation.weighting is Weighting.MINE and self.batch_size < 16:
            raise ConfigError("MINE 重み付けには batch_size >= 16 が必要です")
        if self.ablation.mine_tap not in (1, 2, 3, 4):
            raise ConfigError(f"mine_tap は 1〜4 のいずれかです: {self.ablation.mine_tap}")
        self.attack.validate()

    def to_dict(self) -> Dict[str, Any]:
        """辞書形式に変換"""
        return {
            'objective': self.objective.value,
            'lambda': self.lam,
            'beta': self.beta,
            'epochs': self.epochs,
            'batch_size': self.batch_size,
            'lr': self.lr,
            'momentum': self.momentum,
            'weight_decay': self.weight_decay,
            'lr_drops': self.drops,
            'lr_factor': self.lr_factor,
            'seed': self.seed,
            'probe_size': self.probe_size,
            'attack': self.attack.to_dict(),
            'ablation': self.ablation.to_dict()
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        """辞書からTrainConfigオブジェクトを生成（to_dict の逆変換）"""
        drops = data.get('lr_drops')
        return cls(
            objective=Objective(data.get('objective', 'infoat')),
            lam=float(data.get('lambda', 2.5)),
            beta=float(data.get('beta', 0.2)),
            epochs=int(data.get('epochs', 10)),
            batch_size=int(data.get('batch_size', 128)),
            lr=float(data.get('lr', 0.01)),
            momentum=float(data.get('momentum', 0.9)),
            weight_decay=float(data.get('weight_decay', 3.5e-3)),
            lr_drops=None if drops is None else [int(d) for d in drops],
            lr_factor=float(data.get('lr_factor', 0.1)),
            seed=int(data.get('seed', 0)),
            probe_size=int(data.get('probe_size', 256)),
            attack=AttackConfig.from_dict(data.get('attack', {})),
            ablation=AblationConfig.from_dict(data.get('ablation', {}))
        )


# ========================================
# 評価用の攻撃プリセット
# ========================================

_PRESET_PATTERN = re.compile(r'^(pgd|cw|infopgd|spsa)(\d+)$')

ATTACK_NAMES = ['fgsm', 'pgd', 'pgd10', 'pgd20', 'pgd100', 'pgd_plus', 'cw_pgd', 'cw20', 'cw100',
                'info_pgd', 'infopgd20', 'spsa', 'spsa128', 'spsa256', 'spsa512', 'spsa1024']


def resolve_attack(name: str, base: AttackConfig) -> Tuple[AttackKind, AttackConfig]:
    """
    攻撃名（'pgd20', 'cw100', 'pgd_plus', 'spsa512' など）を種類と設定に解決する

    ε・λ・seed は base から引き継ぐ
    - pgdN / cwN / infopgdN: N ステップ、ステップ幅 ε/4、ランダム初期化あり
    - pgd_plus: 5回リスタート × 40ステップ、ステップ幅 0.01
    - spsa / spsaN: バッチ N（既定 128）、学習率 0.01、δ 0.001、100反復
    """
    key = name.strip().lower()
    if key == 'fgsm':
        return AttackKind.FGSM, replace(base, steps=1, step_size=base.epsilon, random_start=False,
                                        restarts=1, loss_kind=LossKind.CE)
    if key == 'pgd':
        # 目的関数は [attack] loss_kind に従う
        return AttackKind.PGD, base
    if key == 'cw_pgd':
        return AttackKind.CW_PGD, replace(base, loss_kind=LossKind.CW_MARGIN)
    if key == 'info_pgd':
        return AttackKind.INFO_PGD, replace(base, loss_kind=LossKind.INFO)
    if key == 'pgd_plus':
        step = min(0.01, 2 * base.epsilon)
        return AttackKind.PGD, replace(base, steps=40, step_size=step, restarts=5, random_start=True,
                                      loss_kind=LossKind.CE)
    if key == 'spsa':
        return AttackKind.SPSA, replace(base, steps=100, spsa_batch=128, spsa_lr=0.01, spsa_delta=0.001)

    match = _PRESET_PATTERN.match(key)
    if match is None:
        raise ConfigError(f"未知の攻撃です: {name}（有効な値: {', '.join(ATTACK_NAMES)} または pgdN / cwN / infopgdN / spsaN）")
    family, count = match.group(1), int(match.group(2))
    if count < 1:
        raise ConfigError(f"攻撃のステップ数は1以上である必要があります: {name}")
    if family == 'spsa':
        return AttackKind.SPSA, replace(base, steps=100, spsa_batch=count, spsa_lr=0.01, spsa_delta=0.001)

    stepped = replace(base, steps=count, step_size=None, random_start=True, restarts=1)
    if family == 'pgd':
        return AttackKind.PGD, replace(stepped, loss_kind=LossKind.CE)
    if family == 'cw':
        return AttackKind.CW_PGD, replace(stepped, loss_kind=LossKind.CW_MARGIN)
    return AttackKind.INFO_PGD, replace(stepped, loss_kind=LossKind.INFO)
