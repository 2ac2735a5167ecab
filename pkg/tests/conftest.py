"""
テスト共通のフィクスチャ
"""

import numpy as np
import pytest

from models.config import AttackConfig, Objective, TrainConfig
from models.dataset import LabeledDataset
from services.classifier import Classifier, mlp, small_conv
from services.data_generator import gen_two_moons
from services.trainers import train


@pytest.fixture
def moons() -> LabeledDataset:
    return gen_two_moons(200, noise=0.1, seed=0)


@pytest.fixture
def small_mlp() -> Classifier:
    return Classifier.initialize(mlp(2, 2, (16, 16)), seed=0)


@pytest.fixture
def conv_classifier() -> Classifier:
    return Classifier.initialize(small_conv((1, 4, 4), 3, channels=(2, 3), dense=8), seed=0)


@pytest.fixture
def zero_classifier() -> Classifier:
    """全パラメータが 0（出力は常に一様分布、予測は常にクラス0）"""
    c = Classifier.initialize(mlp(2, 2, (8,)), seed=0)
    c.load_state({name: np.zeros_like(values) for name, values in c.state().items()})
    return c


@pytest.fixture
def attack_cfg() -> AttackConfig:
    return AttackConfig(epsilon=0.1, steps=5, seed=0)


@pytest.fixture(scope='session')
def trained_moons():
    """通常学習した two moons 用 MLP とその学習データ（テスト側で変更しないこと）"""
    data = gen_two_moons(200, noise=0.05, seed=1)
    c = Classifier.initialize(mlp(2, 2, (32, 32)), seed=1)
    cfg = TrainConfig(objective=Objective.PLAIN_CE, epochs=40, batch_size=32, lr=0.1,
                      weight_decay=0.0, probe_size=32, seed=1)
    train(c, data, cfg)
    return c, data
