"""
小規模分類器（MLP / SmallConv）
ロジット・softmax確率・予測・中間表現（潜在タップ）を提供する

【アーキテクチャ】
- MLP: d → 256 → 256 → K（relu）
- SmallConv: conv(3x3)+relu → conv(3x3)+relu → 2x2平均プーリング → 全結合+relu → K
バッチ正規化は使わない（forward を θ と入力の純関数に保つため）
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from core import ops
from core.errors import ConfigError, ShapeError
from core.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

InputLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class Architecture:
    """
    層構成の記述子
    チェックポイントには to_descriptor() の文字列として保存される
    """
    kind: str                                        # mlp / smallconv
    input_dim: int
    num_classes: int
    hidden: Tuple[int, ...] = (256, 256)             # MLP の隠れ層幅
    input_shape: Optional[Tuple[int, int, int]] = None  # SmallConv の (C, H, W)
    channels: Tuple[int, int] = (8, 16)
    kernel: int = 3
    dense: int = 64

    def validate(self) -> None:
        if self.kind not in ('mlp', 'smallconv'):
            raise ValueError(f"未対応のアーキテクチャです: {self.kind}")
        if self.num_classes < 1 or self.input_dim < 1:
            raise ValueError(f"input_dim / num_classes が不正です: {self.input_dim}, {self.num_classes}")
        if self.kind == 'smallconv':
            if self.input_shape is None or int(np.prod(self.input_shape)) != self.input_dim:
                raise ValueError(f"SmallConv には input_dim と整合する input_shape が必要です: {self.input_shape}")
            if self.input_shape[1] % 2 or self.input_shape[2] % 2:
                raise ValueError(f"SmallConv の空間サイズは偶数である必要があります: {self.input_shape}")

    def to_descriptor(self) -> str:
        if self.kind == 'mlp':
            hidden = ','.join(str(h) for h in self.hidden)
            return f"mlp;input_dim={self.input_dim};num_classes={self.num_classes};hidden={hidden}"
        shape = ','.join(str(s) for s in self.input_shape)
        channels = ','.join(str(c) for c in self.channels)
        return (f"smallconv;input_dim={self.input_dim};num_classes={self.num_classes};input_shape={shape};"
                f"channels={channels};kernel={self.kernel};dense={self.dense}")

    @classmethod
    def from_descriptor(cls, text: str) -> 'Architecture':
        parts = text.split(';')
        kind, fields = parts[0], {}
        for part in parts[1:]:
            key, _, value = part.partition('=')
            fields[key] = value

        def ints(value: str) -> Tuple[int, ...]:
            return tuple(int(v) for v in value.split(',') if v != '')

        try:
            if kind == 'mlp':
                arch = cls(kind='mlp', input_dim=int(fields['input_dim']), num_classes=int(fields['num_classes']),
                           hidden=ints(fields.get('hidden', '')))
            else:
                arch = cls(kind=kind, input_dim=int(fields['input_dim']), num_classes=int(fields['num_classes']),
                           input_shape=ints(fields['input_shape']), channels=ints(fields['channels']),
                           kernel=int(fields['kernel']), dense=int(fields['dense']))
        except (KeyError, ValueError) as e:
            raise ValueError(f"アーキテクチャ記述子を解釈できません: {text}") from e
        arch.validate()
        return arch

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """パラメータ名と形状（順序付き）"""
        shapes: Dict[str, Tuple[int, ...]] = {}
        if self.kind == 'mlp':
            widths = [self.input_dim, *self.hidden]
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
                shapes[f'fc{i}.weight'] = (fan_in, fan_out)
                shapes[f'fc{i}.bias'] = (fan_out,)
            shapes['out.weight'] = (widths[-1], self.num_classes)
            shapes['out.bias'] = (self.num_classes,)
            return shapes

        c, h, w = self.input_shape
        c1, c2 = self.channels
        k = self.kernel
        shapes['conv1.weight'] = (c1, c, k, k)
        shapes['conv1.bias'] = (c1,)
        shapes['conv2.weight'] = (c2, c1, k, k)
        shapes['conv2.bias'] = (c2,)
        flat = c2 * (h // 2) * (w // 2)
        shapes['fc.weight'] = (flat, self.dense)
        shapes['fc.bias'] = (self.dense,)
        shapes['out.weight'] = (self.dense, self.num_classes)
        shapes['out.bias'] = (self.num_classes,)
        return shapes

    @property
    def latent_taps(self) -> List[str]:
        if self.kind == 'mlp':
            return ['input', *[f'hidden{i}' for i in range(1, len(self.hidden) + 1)], 'logits', 'probs']
        return ['input', 'conv1', 'conv2', 'pool', 'hidden', 'logits', 'probs']

    @property
    def mine_taps(self) -> List[str]:
        """MINE アブレーションの層 #1〜#4"""
        if self.kind == 'mlp':
            return self.latent_taps[1:5]
        return ['conv1', 'conv2', 'pool', 'hidden']


def mlp(input_dim: int, num_classes: int, hidden: Tuple[int, ...] = (256, 256)) -> Architecture:
    return Architecture(kind='mlp', input_dim=input_dim, num_classes=num_classes, hidden=tuple(hidden))


def small_conv(input_shape: Tuple[int, int, int], num_classes: int,
               channels: Tuple[int, int] = (8, 16), dense: int = 64) -> Architecture:
    return Architecture(kind='smallconv', input_dim=int(np.prod(input_shape)), num_classes=num_classes,
                        input_shape=tuple(input_shape), channels=tuple(channels), dense=dense)


class Classifier:
    """
    パラメータ θ を持つ分類器 h_θ

    forward は (θ, 入力) の純関数で、入力・パラメータの両方について微分可能
    """

    def __init__(self, architecture: Architecture, params: Dict[str, Tensor]):
        architecture.validate()
        expected = architecture.param_shapes()
        if list(params) != list(expected):
            raise ShapeError(f"パラメータ名が構成と一致しません: {list(params)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name} の形状 {params[name].shape} が構成 {shape} と一致しません")
        self.architecture = architecture
        self.params = params

    @classmethod
    def initialize(cls, architecture: Architecture, seed: int = 0) -> 'Classifier':
        """
        fan-in に比例した一様分布 U(-1/√fan_in, 1/√fan_in) で重みを初期化する（バイアスは0）
        """
        architecture.validate()
        rng = np.random.default_rng(seed)
        params: Dict[str, Tensor] = {}
        for name, shape in architecture.param_shapes().items():
            if name.endswith('.bias'):
                values = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(values, requires_grad=True, name=name)
        logger.debug(f"分類器を初期化しました（{architecture.to_descriptor()}, seed={seed}）")
        return cls(architecture, params)

    # ---- パラメータ管理 ----

    @property
    def num_classes(self) -> int:
        return self.architecture.num_classes

    @property
    def latent_taps(self) -> List[str]:
        return self.architecture.latent_taps

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ShapeError(f"{name} の形状 {values.shape} が {p.shape} と一致しません")
            p.data = values.copy()
            p.zero_grad()

    def clone(self) -> 'Classifier':
        params = {name: Tensor(p.data, requires_grad=p.requires_grad, name=name) for name, p in self.params.items()}
        return Classifier(self.architecture, params)

    @contextmanager
    def frozen(self) -> Iterator['Classifier']:
        """
        攻撃中は θ を読み取り専用にする（パラメータへ勾配を流さない）
        """
        previous = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.params.values(), previous):
                p.requires_grad = flag

    # ---- forward ----

    def _as_input(self, x: InputLike) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.architecture.input_dim:
            raise ShapeError(f"入力幅が構成と一致しません: {x.shape}（期待値: (batch, {self.architecture.input_dim})）")
        return x

    def forward_taps(self, x: InputLike, until: Optional[str] = None) -> Dict[str, Tensor]:
        """
        各タップの出力を順に計算する（until のタップで打ち切り）
        """
        x = self._as_input(x)
        taps: Dict[str, Tensor] = {'input': x}
        if until == 'input':
            return taps
        p = self.params
        batch = x.shape[0]

        def affine(h: Tensor, layer: str) -> Tensor:
            weight, bias = p[f'{layer}.weight'], p[f'{layer}.bias']
            return h @ weight + ops.expand_rows(bias, batch)

        h = x
        if self.architecture.kind == 'mlp':
            for i in range(1, len(self.architecture.hidden) + 1):
                h = affine(h, f'fc{i}').relu()
                taps[f'hidden{i}'] = h
                if until == f'hidden{i}':
                    return taps
        else:
            c, height, width = self.architecture.input_shape
            img = h.reshape(batch, c, height, width)
            img = ops.conv2d(img, p['conv1.weight'], p['conv1.bias']).relu()
            taps['conv1'] = img
            if until == 'conv1':
                return taps
            img = ops.conv2d(img, p['conv2.weight'], p['conv2.bias']).relu()
            taps['conv2'] = img
            if until == 'conv2':
                return taps
            img = ops.avg_pool2d(img, 2)
            h = img.reshape(batch, -1)
            taps['pool'] = h
            if until == 'pool':
                return taps
            h = affine(h, 'fc').relu()
            taps['hidden'] = h
            if until == 'hidden':
                return taps

        logits = affine(h, 'out')
        taps['logits'] = logits
        if until == 'logits':
            return taps
        taps['probs'] = softmax_probs(logits)
        return taps

    def logits(self, x: InputLike) -> Tensor:
        return self.forward_taps(x, until='logits')['logits']

    def probs(self, x: InputLike) -> Tensor:
        return softmax_probs(self.logits(x))

    def predict(self, x: InputLike) -> np.ndarray:
        """argmax 予測（同値の場合は最小のクラス番号）"""
        return np.argmax(self.logits(x).data, axis=1)

    def latent(self, x: InputLike, tap: str) -> Tensor:
        if tap not in self.latent_taps:
            raise ConfigError(f"未知のタップです: {tap}（有効な値: {', '.join(self.latent_taps)}）")
        return self.forward_taps(x, until=tap)[tap]

    def numbered_tap(self, index: int) -> str:
        """MINE アブレーションの層番号 #1〜#4 をタップ名に変換する"""
        taps = self.architecture.mine_taps
        if not 1 <= index <= len(taps):
            raise ConfigError(f"層番号 #{index} はこの構成にありません（#1〜#{len(taps)}）")
        return taps[index - 1]


# ========================================
# 関数形式のインターフェース
# ========================================

def logits(c: Classifier, x: InputLike) -> Tensor:
    return c.logits(x)


def softmax_probs(z: Tensor) -> Tensor:
    """
    行ごとのsoftmax確率 p_k = exp(z_k) / Σ_j exp(z_j)
    最大値を引いて安定化する（非有限のロジットは NonFiniteError）
    """
    return ops.softmax(z)


def predict(c: Classifier, x: InputLike) -> np.ndarray:
    return c.predict(x)


def latent(c: Classifier, x: InputLike, tap: str) -> Tensor:
    return c.latent(x, tap)
