"""
実験設定モデル
INI 形式の設定ファイル（[data] [model] [train] [attack] [eval] [ablate]）を読み込み、
型付きの TrainConfig / AttackConfig に変換する

【仕様】
- 未知のセクション・キーはエラー（typo を黙って無視しない）
- コマンドラインの --section.key value で上書きできる
- 既定値を含めた全キーを決まった順序で書き出せる（resolved_config.cfg）
"""

import configparser
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from core.errors import ConfigError
from models.config import (AblationConfig, AttackConfig, Divergence, LossKind, Objective, OuterReg,
                           TrainConfig, Weighting, parse_bool, parse_fraction)

# セクション → (キー → 既定値)。順序は resolved_config.cfg の出力順
DEFAULTS: Dict[str, Dict[str, str]] = {
    'data': {
        'source': 'two_moons',        # two_moons / idx / cifar
        'n': '400',
        'noise': '0.1',
        'seed': '0',
        'images': '',
        'labels': '',
        'path': '',
        'classes': '',
        'limit': '0',
        'test_fraction': '0.25',
    },
    'model': {
        'arch': 'mlp',                # mlp / smallconv
        'hidden': '256,256',
        'channels': '8,16',
        'dense': '64',
        'seed': '0',
    },
    'train': {
        'objective': 'infoat',
        'lambda': '2.5',
        'beta': '0.2',
        'epochs': '10',
        'batch_size': '128',
        'lr': '0.01',
        'momentum': '0.9',
        'weight_decay': '0.0035',
        'lr_drops': '',
        'lr_factor': '0.1',
        'seed': '0',
        'probe_size': '256',
        'weighting': 'entropy',
        'divergence': 'mse',
        'outer_reg': 'minus_H_adv',
        'detach_nat_entropy': 'false',
        'mine_tap': '1',
        'mine_steps': '50',
    },
    'attack': {
        'epsilon': '8/255',
        'steps': '10',
        'step_size': '',
        'random_start': 'true',
        'lambda': '2.5',
        'restarts': '1',
        'loss_kind': 'ce',
        'seed': '0',
        'spsa_batch': '128',
        'spsa_lr': '0.01',
        'spsa_delta': '0.001',
    },
    'eval': {
        'attacks': 'fgsm,pgd20',
        'which': 'entropy',
        'eps_max': '0.125',
        'tol': '0.001',
        'limit': '256',
        'resolution': '21',
        'magnitudes': '-1,-0.5,0,0.5,1',
        'directions': '5',
        'surface_examples': '16',
    },
    'ablate': {
        'weighting': '',
        'divergence': '',
        'outer_reg': '',
        'lambda': '',
        'beta': '',
        'mine_tap': '',
        'parallel': 'false',
    },
}

# アブレーション格子の軸（[ablate] のキー → [train] のキー）
ABLATION_AXES = ['weighting', 'divergence', 'outer_reg', 'lambda', 'beta', 'mine_tap']

def _split(value: str) -> List[str]:
    return [v.strip() for v in value.split(',') if v.strip()]


@dataclass
class ExperimentConfig:
    """
    実験設定モデル
    値は文字列で保持し、型付き設定への変換時に検証する
    """
    values: Dict[str, Dict[str, str]] = field(default_factory=lambda: {s: dict(k) for s, k in DEFAULTS.items()})
    source: Optional[str] = None

    # ---- 読み込み ----

    @classmethod
    def from_text(cls, text: str, source: Optional[str] = None) -> 'ExperimentConfig':
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source or '<string>')
        except configparser.Error as e:
            raise ConfigError(f"設定ファイルを解析できません: {e}") from e
        config = cls(source=source)
        for section in parser.sections():
            for key, value in parser.items(section, raw=True):
                config.set(section, key, value)
        return config

    @classmethod
    def load(cls, path: Union[str, Path], overrides: Sequence[Tuple[str, str]] = ()) -> 'ExperimentConfig':
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"設定ファイルが見つかりません: {path}")
        config = cls.from_text(path.read_text(encoding='utf-8'), source=str(path))
        config.apply_overrides(overrides)
        return config

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, Any]], source: Optional[str] = None) -> 'ExperimentConfig':
        """{セクション: {キー: 値}} から生成（to_dict の逆変換）"""
        config = cls(source=source)
        for section, keys in data.items():
            for key, value in keys.items():
                config.set(section, key, '' if value is None else str(value))
        return config

    def set(self, section: str, key: str, value: str) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"未知のセクションです: [{section}]（有効な値: {', '.join(DEFAULTS)}）")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"未知のキーです: {section}.{key}（有効な値: {', '.join(DEFAULTS[section])}）")
        self.values[section][key] = str(value).strip()

    def apply_overrides(self, overrides: Sequence[Tuple[str, str]]) -> None:
        """('train.lambda', '2.5') 形式の上書きを適用する"""
        for dotted, value in overrides:
            section, sep, key = dotted.partition('.')
            if not sep:
                raise ConfigError(f"上書きは section.key 形式で指定してください: {dotted}")
            self.set(section, key, value)

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    # ---- 型変換 ----

    def _int(self, section: str, key: str) -> int:
        try:
            return int(self.get(section, key))
        except ValueError as e:
            raise ConfigError(f"{section}.{key} は整数である必要があります: {self.get(section, key)!r}") from e

    def _float(self, section: str, key: str) -> float:
        try:
            return parse_fraction(self.get(section, key))
        except ConfigError as e:
            raise ConfigError(f"{section}.{key}: {e}") from e

    def _bool(self, section: str, key: str) -> bool:
        try:
            return parse_bool(self.get(section, key))
        except ConfigError as e:
            raise ConfigError(f"{section}.{key} は true / false で指定してください: {self.get(section, key)!r}") from e

    def _enum(self, enum_cls, section: str, key: str):
        value = self.get(section, key)
        try:
            return enum_cls(value)
        except ValueError as e:
            valid = ', '.join(m.value for m in enum_cls)
            raise ConfigError(f"{section}.{key} の値 {value!r} は無効です（有効な値: {valid}）") from e

    def int_list(self, section: str, key: str) -> List[int]:
        try:
            return [int(v) for v in _split(self.get(section, key))]
        except ValueError as e:
            raise ConfigError(f"{section}.{key} は整数のリストである必要があります: {self.get(section, key)!r}") from e

    def float_list(self, section: str, key: str) -> List[float]:
        return [parse_fraction(v) for v in _split(self.get(section, key))]

    def str_list(self, section: str, key: str) -> List[str]:
        return _split(self.get(section, key))

    def number(self, section: str, key: str) -> float:
        return self._float(section, key)

    def integer(self, section: str, key: str) -> int:
        return self._int(section, key)

    def flag(self, section: str, key: str) -> bool:
        return self._bool(section, key)

    def attack_config(self) -> AttackConfig:
        step_size = self.get('attack', 'step_size')
        cfg = AttackConfig(
            epsilon=self._float('attack', 'epsilon'),
            steps=self._int('attack', 'steps'),
            step_size=None if step_size == '' else self._float('attack', 'step_size'),
            random_start=self._bool('attack', 'random_start'),
            lam=self._float('attack', 'lambda'),
            restarts=self._int('attack', 'restarts'),
            loss_kind=self._enum(LossKind, 'attack', 'loss_kind'),
            seed=self._int('attack', 'seed'),
            spsa_batch=self._int('attack', 'spsa_batch'),
            spsa_lr=self._float('attack', 'spsa_lr'),
            spsa_delta=self._float('attack', 'spsa_delta')
        )
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        drops = self.int_list('train', 'lr_drops')
        cfg = TrainConfig(
            objective=self._enum(Objective, 'train', 'objective'),
            lam=self._float('train', 'lambda'),
            beta=self._float('train', 'beta'),
            epochs=self._int('train', 'epochs'),
            batch_size=self._int('train', 'batch_size'),
            lr=self._float('train', 'lr'),
            momentum=self._float('train', 'momentum'),
            weight_decay=self._float('train', 'weight_decay'),
            lr_drops=drops or None,
            lr_factor=self._float('train', 'lr_factor'),
            seed=self._int('train', 'seed'),
            probe_size=self._int('train', 'probe_size'),
            attack=self.attack_config(),
            ablation=AblationConfig(
                weighting=self._enum(Weighting, 'train', 'weighting'),
                divergence=self._enum(Divergence, 'train', 'divergence'),
                outer_reg=self._enum(OuterReg, 'train', 'outer_reg'),
                detach_nat_entropy=self._bool('train', 'detach_nat_entropy'),
                mine_tap=self._int('train', 'mine_tap'),
                mine_steps=self._int('train', 'mine_steps')
            )
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """全セクションを型変換して検証する"""
        self.train_config()
        for key in ('n', 'seed', 'limit'):
            self._int('data', key)
        self._float('data', 'noise')
        self._float('data', 'test_fraction')
        self.int_list('data', 'classes')
        self.int_list('model', 'hidden')
        self.int_list('model', 'channels')
        self._int('model', 'seed')
        for key in ('eps_max', 'tol'):
            self._float('eval', key)
        self.float_list('eval', 'magnitudes')
        self._bool('ablate', 'parallel')
        for cell in self.ablation_cells():
            cell.train_config()

    # ---- アブレーション格子 ----

    def ablation_axes(self) -> List[Tuple[str, List[str]]]:
        """値が指定された軸のみを返す"""
        return [(axis, self.str_list('ablate', axis)) for axis in ABLATION_AXES if self.str_list('ablate', axis)]

    def ablation_cells(self) -> List['ExperimentConfig']:
        """[ablate] の各軸の直積。各セルは [train] の値を差し替えた設定"""
        axes = self.ablation_axes()
        if not axes:
            return []
        cells = []
        for combo in product(*[values for _, values in axes]):
            cell = self.copy()
            for (axis, _), value in zip(axes, combo):
                cell.set('train', axis, value)
            for axis, _ in axes:
                cell.set('ablate', axis, '')
            cells.append(cell)
        return cells

    # ---- 書き出し ----

    def copy(self) -> 'ExperimentConfig':
        return ExperimentConfig(values={s: dict(k) for s, k in self.values.items()}, source=self.source)

    def to_text(self) -> str:
        """全キーを既定の順序で書き出す"""
        lines: List[str] = []
        for section, keys in DEFAULTS.items():
            lines.append(f'[{section}]')
            for key in keys:
                value = self.values[section][key]
                lines.append(f'{key} = {value}' if value != '' else f'{key} =')
            lines.append('')
        return '\n'.join(lines)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s: dict(k) for s, k in self.values.items()}
