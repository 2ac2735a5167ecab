"""
Models package
設定・データセット・結果のデータモデル
"""

from .config import (
    AblationConfig,
    AttackConfig,
    AttackKind,
    Divergence,
    LossKind,
    Objective,
    OuterReg,
    TrainConfig,
    Weighting,
    parse_fraction,
    resolve_attack
)
from .dataset import BatchIterator, LabeledDataset, next_batch
from .experiment import ExperimentConfig
from .results import AdvResult, EvalReport, TrainReport

__all__ = [
    'AblationConfig',
    'AttackConfig',
    'AttackKind',
    'Divergence',
    'LossKind',
    'Objective',
    'OuterReg',
    'TrainConfig',
    'Weighting',
    'parse_fraction',
    'resolve_attack',
    'BatchIterator',
    'LabeledDataset',
    'next_batch',
    'ExperimentConfig',
    'AdvResult',
    'EvalReport',
    'TrainReport'
]
