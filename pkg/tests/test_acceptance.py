"""
two moons での学習結果の大小関係と診断（時間がかかるため slow）
pytest -m slow で実行する
"""

import numpy as np
import pytest

from models.config import AttackConfig, Objective, TrainConfig
from services import evaluation
from services.classifier import Classifier, mlp
from services.data_generator import gen_two_moons
from services.trainers import train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
ATTACK = AttackConfig(epsilon=0.08, steps=10, seed=0)


def _split(seed: int):
    return gen_two_moons(600, noise=0.1, seed=seed).split_train_test(0.25, seed=seed)


def _train(objective: Objective, train_data, seed: int, lam: float = 2.5) -> Classifier:
    c = Classifier.initialize(mlp(2, 2, (64, 64)), seed=seed)
    train(c, train_data, TrainConfig(objective=objective, lam=lam, epochs=30, batch_size=64, lr=0.05,
                                     weight_decay=0.0005, probe_size=64, seed=seed, attack=ATTACK))
    return c


@pytest.fixture(scope='module')
def scores():
    """seed → 目的関数 → {'clean', 'fgsm', 'pgd20'}"""
    results = {}
    for seed in SEEDS:
        train_data, test_data = _split(seed)
        results[seed] = {}
        for objective in (Objective.PLAIN_CE, Objective.AT, Objective.INFOAT):
            c = _train(objective, train_data, seed)
            report = evaluation.evaluate(c, test_data, ATTACK, ['fgsm', 'pgd20'])
            accuracies = {a.attack: a.robust_accuracy for a in report.attacks}
            accuracies['clean'] = report.clean_accuracy
            results[seed][objective] = accuracies
    return results


@pytest.fixture(scope='module')
def trades_models():
    """seed → (TRADES で学習した分類器, テスト集合)"""
    models = {}
    for seed in SEEDS:
        train_data, test_data = _split(seed)
        models[seed] = (_train(Objective.TRADES, train_data, seed, lam=6.0), test_data)
    return models


def _mean_pgd20(scores, objective: Objective) -> float:
    return float(np.mean([scores[seed][objective]['pgd20'] for seed in SEEDS]))


def test_attack_strength_ordering(scores):
    for by_objective in scores.values():
        for accuracies in by_objective.values():
            assert accuracies['pgd20'] <= accuracies['fgsm'] <= accuracies['clean']


def test_infoat_margin_over_at_is_positive(scores):
    margins = [scores[seed][Objective.INFOAT]['pgd20'] - scores[seed][Objective.AT]['pgd20'] for seed in SEEDS]
    assert np.mean(margins) > 0.0


def test_plain_training_is_strictly_worst(scores):
    plain = _mean_pgd20(scores, Objective.PLAIN_CE)
    assert plain < _mean_pgd20(scores, Objective.AT)
    assert plain < _mean_pgd20(scores, Objective.INFOAT)


@pytest.mark.parametrize('seed', SEEDS)
def test_nonrobust_examples_have_higher_clean_entropy(seed, trades_models):
    c, test_data = trades_models[seed]
    profile = evaluation.entropy_robustness_profile(c, test_data, ATTACK, seed=seed)
    assert profile.success.any() and not profile.success.all()
    assert profile.gap > 0.0
    assert profile.p_value < 0.05


@pytest.mark.parametrize('seed', SEEDS)
def test_entropy_and_min_perturbation_are_anticorrelated(seed, trades_models):
    c, test_data = trades_models[seed]
    profile = evaluation.min_perturbation_profile(c, test_data, eps_max=0.3, tol=1e-3, seed=seed)
    assert profile.spearman < 0.0
    assert profile.p_value < 0.05
