"""
敵対的学習（AT / TRADES / MART / MART+ / InfoAT とアブレーション）

【学習ループ】
1. ミニバッチを取り出す（BatchIterator）
2. 内側の最大化で敵対例 x' を作る（θ は固定）
3. 外側の損失の平均を逆伝播し、SGD（momentum・weight decay）で θ を更新する
4. エポックごとにプローブ集合でクリーン精度と PGD^10 頑健精度を記録する

係数が 0 の項は計算しない（InfoAT(λ=0, β=0) と AT、TRADES(λ=0) と通常学習が同一になる）
"""

import logging
from dataclasses import replace
from typing import Dict, Optional, Tuple

import numpy as np

from core import ops
from core.errors import ConfigError, NonFiniteError
from core.tensor import Tensor, as_tensor, backward
from models.config import AttackConfig, AttackKind, LossKind, Objective, OuterReg, TrainConfig, Weighting
from models.dataset import BatchIterator, LabeledDataset
from models.results import EpochRecord, TrainReport
from services import attacks, losses
from services.classifier import Classifier
from services.evaluation import clean_accuracy, robust_accuracy
from services.mine import StatisticsNet, batch_mi_weight, critic_for
from services.optimizer import SGDMomentum

logger = logging.getLogger(__name__)

MIN_MINE_BATCH = 16


def _nat_weight(weighting: Weighting, p_nat: Tensor, y: np.ndarray, mine_weight: Optional[float]) -> Tensor:
    """事例ごとの正則化重み（自然例の分布から計算）"""
    if weighting is Weighting.ENTROPY:
        return losses.entropy(p_nat)
    if weighting is Weighting.ONE_MINUS_P:
        return 1.0 - ops.pick(p_nat, y)
    if weighting is Weighting.NONE:
        return as_tensor(np.ones(p_nat.shape[0]))
    if weighting is Weighting.MINE:
        return as_tensor(np.full(p_nat.shape[0], 0.0 if mine_weight is None else mine_weight))
    raise ValueError(f"未対応の重み付けです: {weighting}")


def _outer_reg(reg: OuterReg, p_nat: Optional[Tensor], p_adv: Tensor) -> Tuple[float, Optional[Tensor]]:
    """(符号, エントロピー) を返す。NONE は (0, None)"""
    if reg is OuterReg.MINUS_H_ADV:
        return -1.0, losses.entropy(p_adv)
    if reg is OuterReg.PLUS_H_ADV:
        return 1.0, losses.entropy(p_adv)
    if reg is OuterReg.MINUS_H_NAT:
        return -1.0, losses.entropy(p_nat)
    if reg is OuterReg.PLUS_H_NAT:
        return 1.0, losses.entropy(p_nat)
    return 0.0, None


def outer_loss(c: Classifier, cfg: TrainConfig, x: np.ndarray, y: np.ndarray, x_adv: Optional[np.ndarray],
               mine_weight: Optional[float] = None) -> Tuple[Tensor, Dict[str, float]]:
    """
    外側の最小化で使うバッチ平均損失と、その内訳（ce / reg / outer）を返す

    Args:
        x_adv: 内側の最大化で得た敵対例（PLAIN_CE と TRADES(λ=0) では未使用）
        mine_weight: Weighting.MINE のときバッチ全体で共有する重み
    """
    objective = cfg.objective
    lam, beta = cfg.lam, cfg.beta
    components = {'ce': 0.0, 'reg': 0.0, 'outer': 0.0}

    if objective is Objective.PLAIN_CE or (objective is Objective.TRADES and lam == 0):
        ce = losses.cross_entropy_per_example(c.probs(x), y)
        components['ce'] = float(ce.data.mean())
        return ce.mean(), components

    if objective is Objective.AT:
        ce = losses.cross_entropy_per_example(c.probs(x_adv), y)
        components['ce'] = float(ce.data.mean())
        return ce.mean(), components

    if objective is Objective.TRADES:
        p_nat = c.probs(x)
        ce = losses.cross_entropy_per_example(p_nat, y)
        reg = losses.kl_divergence(p_nat, c.probs(x_adv)) * lam
        components.update(ce=float(ce.data.mean()), reg=float(reg.data.mean()))
        return (ce + reg).mean(), components

    if objective in (Objective.MART, Objective.MART_PLUS):
        p_adv = c.probs(x_adv)
        base = losses.boosted_cross_entropy_per_example(p_adv, y)
        components['ce'] = float(base.data.mean())
        if lam == 0:
            return base.mean(), components
        p_nat = c.probs(x)
        weighting = Weighting.ONE_MINUS_P if objective is Objective.MART else Weighting.ENTROPY
        weight = _nat_weight(weighting, p_nat, y, None)
        reg = losses.kl_divergence(p_nat, p_adv) * weight * lam
        components['reg'] = float(reg.data.mean())
        return (base + reg).mean(), components

    if objective is Objective.INFOAT:
        ablation = cfg.ablation
        p_adv = c.probs(x_adv)
        total = losses.cross_entropy_per_example(p_adv, y)
        components['ce'] = float(total.data.mean())
        needs_nat = lam != 0 or (beta != 0 and ablation.outer_reg in (OuterReg.MINUS_H_NAT, OuterReg.PLUS_H_NAT))
        p_nat = c.probs(x) if needs_nat else None
        if lam != 0:
            weight = _nat_weight(ablation.weighting, p_nat, y, mine_weight)
            if ablation.detach_nat_entropy:
                weight = as_tensor(weight.data.copy())
            reg = losses.divergence(ablation.divergence, p_nat, p_adv) * weight * lam
            components['reg'] = float(reg.data.mean())
            total = total + reg
        if beta != 0:
            sign, reg_entropy = _outer_reg(ablation.outer_reg, p_nat, p_adv)
            if reg_entropy is not None:
                outer = reg_entropy * (sign * beta)
                components['outer'] = float(outer.data.mean())
                total = total + outer
        return total.mean(), components

    raise ConfigError(f"未対応の目的関数です: {objective}")


class AdversarialTrainer:
    """
    min-max 学習のドライバー

    バッチの順列（BatchIterator）と攻撃の乱数は別々のシード系列を使う
    """

    def __init__(self, c: Classifier, cfg: TrainConfig, probe: Optional[LabeledDataset] = None):
        cfg.validate()
        self.c = c
        self.cfg = cfg
        self.probe = probe
        self.attack_rng = np.random.default_rng([cfg.seed, 1])
        self.optimizer = SGDMomentum(c.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                     weight_decay=cfg.weight_decay)
        self.critic: Optional[StatisticsNet] = None
        self.last_mine_weight: Optional[float] = None

    # ---- 内側の最大化 ----

    def _inner_attack(self) -> AttackConfig:
        if self.cfg.objective is Objective.INFOAT:
            return replace(self.cfg.attack, lam=self.cfg.lam)
        return self.cfg.attack

    def _attack_weights(self, x: np.ndarray, y: np.ndarray, mine_weight: Optional[float]) -> Optional[np.ndarray]:
        weighting = self.cfg.ablation.weighting
        if weighting is Weighting.ENTROPY:
            return None
        with self.c.frozen():
            p_nat = self.c.probs(x)
            return _nat_weight(weighting, p_nat, y, mine_weight).data.copy()

    def _mine_weight(self, x: np.ndarray) -> Optional[float]:
        ablation = self.cfg.ablation
        if self.cfg.objective is not Objective.INFOAT or ablation.weighting is not Weighting.MINE or self.cfg.lam == 0:
            return None
        if len(x) < MIN_MINE_BATCH:
            logger.warning(f"バッチが {len(x)} 件のため MINE 重みを再利用します（{self.last_mine_weight}）")
            return self.last_mine_weight
        if self.critic is None:
            self.critic = critic_for(self.c, ablation.mine_tap, seed=self.cfg.seed)
        self.last_mine_weight = batch_mi_weight(self.c, self.critic, x, ablation.mine_tap,
                                                train_steps=ablation.mine_steps, seed=self.cfg.seed)
        return self.last_mine_weight

    def adversarial_batch(self, x: np.ndarray, y: np.ndarray, mine_weight: Optional[float] = None) -> Optional[np.ndarray]:
        """目的関数に応じた内側の最大化（敵対例が不要なら None）"""
        objective = self.cfg.objective
        attack_cfg = self._inner_attack()
        if objective is Objective.PLAIN_CE or (objective is Objective.TRADES and self.cfg.lam == 0):
            return None
        if objective in (Objective.AT, Objective.MART, Objective.MART_PLUS):
            return attacks.pgd(self.c, x, y, attack_cfg, self.attack_rng).x_adv
        if objective is Objective.TRADES:
            return attacks.trades_inner(self.c, x, attack_cfg, self.attack_rng).x_adv
        weights = self._attack_weights(x, y, mine_weight) if self.cfg.lam != 0 else None
        return attacks.info_pgd(self.c, x, y, attack_cfg, self.attack_rng, weights=weights,
                                divergence=self.cfg.ablation.divergence).x_adv

    # ---- 外側の最小化 ----

    def train_step(self, x: np.ndarray, y: np.ndarray, epoch: int, batch: int) -> Tuple[float, Dict[str, float]]:
        """1バッチ分の更新を行い、(損失, 内訳) を返す"""
        mine_weight = self._mine_weight(x)
        x_adv = self.adversarial_batch(x, y, mine_weight)
        self.optimizer.zero_grad()
        try:
            loss, components = outer_loss(self.c, self.cfg, x, y, x_adv, mine_weight)
        except NonFiniteError as e:
            raise NonFiniteError(f"エポック {epoch} バッチ {batch}: 損失の計算で非有限値が発生しました（{e}）") from e
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"エポック {epoch} バッチ {batch}: 損失が非有限です（内訳: {components}）")
        backward(loss)
        self.optimizer.step()
        return value, components

    def _probe_scores(self, probe: LabeledDataset) -> Tuple[float, float]:
        probe_attack = replace(self.cfg.attack, steps=10, step_size=None, random_start=True, restarts=1,
                               loss_kind=LossKind.CE, seed=self.cfg.seed)
        clean = clean_accuracy(self.c, probe)
        robust = robust_accuracy(self.c, probe, probe_attack, AttackKind.PGD)
        return clean, robust

    def fit(self, data: LabeledDataset) -> TrainReport:
        cfg = self.cfg
        probe = self.probe if self.probe is not None else data.head(cfg.probe_size)
        iterator = BatchIterator(data, cfg.batch_size, seed=cfg.seed)
        report = TrainReport(objective=cfg.objective.value)
        logger.info(f"学習を開始します: {cfg.objective.value}（{len(data)} 件, {cfg.epochs} エポック）")

        for epoch in range(1, cfg.epochs + 1):
            if epoch > 1:
                iterator.reshuffle()
            lr = cfg.lr_at(epoch)
            self.optimizer.lr = lr
            weighted = 0.0
            sums = {'ce': 0.0, 'reg': 0.0, 'outer': 0.0}
            seen = 0
            for batch, (x, y) in enumerate(iterator.epoch_batches(), start=1):
                value, components = self.train_step(x, y, epoch, batch)
                report.batch_losses.append(value)
                weighted += value * len(y)
                for key in sums:
                    sums[key] += components[key] * len(y)
                seen += len(y)
                logger.debug(f"エポック {epoch} バッチ {batch}: 損失 {value:.6f}")

            clean, robust = self._probe_scores(probe)
            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                clean_accuracy=clean,
                robust_accuracy=robust,
                mean_loss=weighted / seen if seen else 0.0,
                components={k: v / seen if seen else 0.0 for k, v in sums.items()}
            )
            report.records.append(record)
            logger.info(f"エポック {epoch}/{cfg.epochs}: 損失 {record.mean_loss:.4f}, "
                        f"クリーン精度 {clean:.4f}, 頑健精度 {robust:.4f}（lr={lr:g}）")
        return report


# ========================================
# 目的関数ごとのエントリポイント
# ========================================

def _run(expected: Objective, c: Classifier, data: LabeledDataset, cfg: TrainConfig,
         probe: Optional[LabeledDataset]) -> TrainReport:
    if cfg.objective is not expected:
        raise ConfigError(f"目的関数が一致しません: {cfg.objective.value}（期待値: {expected.value}）")
    return AdversarialTrainer(c, cfg, probe).fit(data)


def train_at(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    return _run(Objective.AT, c, data, cfg, probe)


def train_trades(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    return _run(Objective.TRADES, c, data, cfg, probe)


def train_mart(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    return _run(Objective.MART, c, data, cfg, probe)


def train_mart_plus(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    return _run(Objective.MART_PLUS, c, data, cfg, probe)


def train_infoat(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    return _run(Objective.INFOAT, c, data, cfg, probe)


def train_plain_ce(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    return _run(Objective.PLAIN_CE, c, data, cfg, probe)


def ablation_variant(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    """InfoAT の重み・距離・外側正則化を cfg.ablation の指定に差し替えて学習する"""
    return _run(Objective.INFOAT, c, data, cfg, probe)


_TRAINERS = {
    Objective.AT: train_at,
    Objective.TRADES: train_trades,
    Objective.MART: train_mart,
    Objective.MART_PLUS: train_mart_plus,
    Objective.INFOAT: train_infoat,
    Objective.PLAIN_CE: train_plain_ce,
}


def train(c: Classifier, data: LabeledDataset, cfg: TrainConfig, probe: Optional[LabeledDataset] = None) -> TrainReport:
    """cfg.objective に対応する学習を実行する"""
    if cfg.objective is Objective.INFOAT and not cfg.ablation.is_default():
        return ablation_variant(c, data, cfg, probe)
    return _TRAINERS[cfg.objective](c, data, cfg, probe)
