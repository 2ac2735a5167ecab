"""
頑健性の評価と診断

- クリーン精度 / 攻撃ごとの頑健精度
- エントロピーと攻撃成功の関係（ヒストグラム + 片側並べ替え検定）
- エントロピーと最小摂動半径の順位相関（Spearman）
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats

from models.config import AttackConfig, AttackKind, resolve_attack
from models.dataset import LabeledDataset
from models.results import (AttackAccuracy, EntropyProfile, EvalReport, ExampleRecord,
                            MinPerturbationProfile)
from services import attacks, losses
from services.classifier import Classifier

logger = logging.getLogger(__name__)

CHUNK_SIZE = 256
HISTOGRAM_BINS = 10
PERMUTATION_RESAMPLES = 9999


def _chunks(n: int, size: int = CHUNK_SIZE):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def clean_accuracy(c: Classifier, data: LabeledDataset) -> float:
    if len(data) == 0:
        return 0.0
    with c.frozen():
        correct = sum(int(np.sum(c.predict(data.inputs[s]) == data.labels[s])) for s in _chunks(len(data)))
    return correct / len(data)


def adversarial_success(c: Classifier, data: LabeledDataset, attack_cfg: AttackConfig,
                        attack_kind: AttackKind) -> np.ndarray:
    """
    事例ごとの攻撃成功フラグ（CHUNK_SIZE 件ずつ、乱数は1系列で順に消費する）
    クリーン入力で誤分類している事例は攻撃の結果によらず成功とみなす
    """
    rng = np.random.default_rng(attack_cfg.seed)
    success = np.zeros(len(data), dtype=bool)
    for s in _chunks(len(data)):
        result = attacks.run_attack(attack_kind, c, data.inputs[s], data.labels[s], attack_cfg, rng)
        with c.frozen():
            wrong = c.predict(data.inputs[s]) != data.labels[s]
        success[s] = result.success_mask | wrong
    return success


def robust_accuracy(c: Classifier, data: LabeledDataset, attack_cfg: AttackConfig, attack_kind: AttackKind) -> float:
    """クリーン入力と x_adv の両方で正解する事例の割合"""
    if len(data) == 0:
        return 0.0
    return float(np.mean(~adversarial_success(c, data, attack_cfg, attack_kind)))


def clean_entropies(c: Classifier, data: LabeledDataset) -> np.ndarray:
    with c.frozen():
        return np.concatenate([losses.entropy(c.probs(data.inputs[s])).data for s in _chunks(len(data))]) \
            if len(data) else np.zeros(0)


def evaluate(c: Classifier, data: LabeledDataset, base_cfg: AttackConfig, names: Sequence[str]) -> EvalReport:
    """
    攻撃名の一覧（'fgsm', 'pgd20', 'cw100' など）について頑健精度を計算する

    事例ごとの記録には、クリーン入力のエントロピーと最後の攻撃の成否を入れる
    """
    resolved = [(name, *resolve_attack(name, base_cfg)) for name in names]
    report = EvalReport(clean_accuracy=clean_accuracy(c, data), num_examples=len(data))
    success: Optional[np.ndarray] = None
    for name, kind, cfg in resolved:
        cfg.validate()
        success = adversarial_success(c, data, cfg, kind)
        accuracy = float(np.mean(~success)) if len(data) else 0.0
        report.attacks.append(AttackAccuracy(attack=name, kind=kind.value, epsilon=cfg.epsilon,
                                             steps=cfg.steps, robust_accuracy=accuracy))
        logger.info(f"攻撃 {name}: 頑健精度 {accuracy:.4f}（ε={cfg.epsilon:.6f}, クリーン精度 {report.clean_accuracy:.4f}）")

    entropies = clean_entropies(c, data)
    report.examples = [
        ExampleRecord(index=i, label=int(data.labels[i]), entropy=float(entropies[i]),
                      attack_success=bool(success[i]) if success is not None else False)
        for i in range(len(data))
    ]
    return report


def entropy_robustness_profile(c: Classifier, data: LabeledDataset, attack_cfg: AttackConfig,
                               bins: int = HISTOGRAM_BINS, seed: int = 0) -> EntropyProfile:
    """
    クリーン入力のエントロピー H(p(x)) と PGD の成否を集計する

    gap = 攻撃成功（非頑健）群の平均エントロピー - 頑健群の平均エントロピー
    p 値は「非頑健群の方が大きい」を対立仮説とする並べ替え検定
    """
    entropies = clean_entropies(c, data)
    success = adversarial_success(c, data, attack_cfg, AttackKind.PGD)
    upper = np.log(data.num_classes) if data.num_classes > 1 else 1.0
    edges = np.linspace(0.0, upper, bins + 1)
    clipped = np.clip(entropies, 0.0, upper)
    robust_counts, _ = np.histogram(clipped[~success], bins=edges)
    nonrobust_counts, _ = np.histogram(clipped[success], bins=edges)

    nonrobust, robust = entropies[success], entropies[~success]
    if nonrobust.size == 0 or robust.size == 0:
        logger.warning(f"頑健群 {robust.size} 件 / 非頑健群 {nonrobust.size} 件のため差は 0 とします")
        gap, p_value = 0.0, 1.0
    else:
        gap = float(nonrobust.mean() - robust.mean())
        test = stats.permutation_test(
            (nonrobust, robust),
            lambda a, b, axis: np.mean(a, axis=axis) - np.mean(b, axis=axis),
            permutation_type='independent',
            alternative='greater',
            n_resamples=PERMUTATION_RESAMPLES,
            vectorized=True,
            random_state=seed
        )
        p_value = float(test.pvalue)
    logger.info(f"エントロピー差 {gap:.4f}（p={p_value:.4g}, 非頑健 {nonrobust.size} 件 / 頑健 {robust.size} 件）")
    return EntropyProfile(entropies=entropies, success=success, bin_edges=edges,
                          robust_counts=robust_counts, nonrobust_counts=nonrobust_counts,
                          gap=gap, p_value=p_value)


def min_perturbation_profile(c: Classifier, data: LabeledDataset, eps_max: float, tol: float = 1e-3,
                             seed: int = 0) -> MinPerturbationProfile:
    """
    事例ごとの (エントロピー, 最小摂動半径) と両者の Spearman 順位相関

    番兵（eps_max まで頑健）は相関から除外し、件数を別に報告する
    """
    entropies = clean_entropies(c, data)
    radii: List[Optional[float]] = []
    for s in _chunks(len(data)):
        radii.extend(attacks.min_perturbation(c, data.inputs[s], data.labels[s], eps_max, tol=tol, seed=seed))

    kept = np.array([r is not None for r in radii], dtype=bool)
    sentinel_count = int(np.sum(~kept))
    xs = entropies[kept]
    ys = np.array([r for r in radii if r is not None], dtype=np.float64)
    rho, p_value = 0.0, 1.0
    if xs.size >= 3 and np.ptp(xs) > 0 and np.ptp(ys) > 0:
        result = stats.spearmanr(xs, ys)
        rho, p_value = float(result.statistic), float(result.pvalue)
    else:
        logger.warning(f"順位相関を計算できません（有効な事例 {xs.size} 件）")
    logger.info(f"最小摂動の順位相関 {rho:.4f}（p={p_value:.4g}, 番兵 {sentinel_count} 件）")
    return MinPerturbationProfile(entropies=entropies, radii=radii, spearman=rho,
                                  p_value=p_value, sentinel_count=sentinel_count)
