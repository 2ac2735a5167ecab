"""
ラベル付きデータセットとミニバッチ反復子
入力は [0,1]^d、ラベルは {0..K-1}
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import EpochExhaustedError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    """
    ラベル付きデータセットを表すモデルクラス

    inputs は N×d 行列、labels は長さ N の整数列
    input_shape は畳み込みモデル用の (C, H, W)（全結合のみなら None）
    """
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    split: str = "all"                              # all / train / test / probe
    input_shape: Optional[Tuple[int, int, int]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim == 1 and self.inputs.size == 0:
            self.inputs = self.inputs.reshape(0, 0)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def validate(self) -> None:
        """
        データセットの妥当性検証
        """
        if self.inputs.ndim != 2:
            raise ShapeError(f"inputs は N×d 行列である必要があります: {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"入力数 {self.inputs.shape[0]} とラベル数 {self.labels.shape[0]} が一致しません")
        if self.num_classes < 1:
            raise ValueError(f"num_classes は1以上である必要があります: {self.num_classes}")
        if len(self) == 0:
            return
        if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
            raise ValueError("入力値は [0,1] の範囲である必要があります")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"ラベルは 0..{self.num_classes - 1} の範囲である必要があります")
        if self.input_shape is not None and int(np.prod(self.input_shape)) != self.dim:
            raise ShapeError(f"input_shape {self.input_shape} と次元 {self.dim} が一致しません")

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> 'LabeledDataset':
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            name=self.name,
            split=split or self.split,
            input_shape=self.input_shape,
            meta=dict(self.meta)
        )

    def head(self, n: int) -> 'LabeledDataset':
        return self.subset(np.arange(min(n, len(self))))

    def split_train_test(self, test_fraction: float, seed: int) -> Tuple['LabeledDataset', 'LabeledDataset']:
        """
        シード付きの無作為分割（互いに素）
        """
        if not 0.0 < test_fraction < 1.0:
            raise ValueError(f"test_fraction は (0, 1) の範囲である必要があります: {test_fraction}")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = max(1, int(round(len(self) * test_fraction)))
        test_idx = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:])
        return self.subset(train_idx, split="train"), self.subset(test_idx, split="test")

    def select_classes(self, classes: Sequence[int]) -> 'LabeledDataset':
        """
        指定クラスのみを残し、ラベルを 0..len(classes)-1 に付け替える
        （MNIST 2クラス部分集合など）
        """
        classes = [int(c) for c in classes]
        if len(set(classes)) != len(classes) or not classes:
            raise ValueError(f"クラス指定が不正です: {classes}")
        mask = np.isin(self.labels, classes)
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[int(label)] for label in self.labels[mask]], dtype=np.int64)
        return LabeledDataset(
            inputs=self.inputs[mask],
            labels=labels,
            num_classes=len(classes),
            name=f"{self.name}[{','.join(str(c) for c in classes)}]",
            split=self.split,
            input_shape=self.input_shape,
            meta=dict(self.meta)
        )

    def class_counts(self) -> List[int]:
        return [int(np.sum(self.labels == k)) for k in range(self.num_classes)]


class BatchIterator:
    """
    シード付きミニバッチ反復子

    【仕様】
    - 1エポックで全インデックスをちょうど1回ずつ返す
    - 同じシードなら同じ順列
    - 最後の短いバッチは捨てない
    """

    def __init__(self, dataset: LabeledDataset, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError(f"batch_size は1以上である必要があります: {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.cursor = 0
        self.permutation = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.permutation)

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        エポック順列の次のスライスを返す

        Raises:
            EpochExhaustedError: このエポックを使い切った場合（reshuffle() を呼ぶこと）
        """
        if self.exhausted:
            raise EpochExhaustedError(f"エポック {self.epoch} のバッチを使い切りました")
        idx = self.permutation[self.cursor:self.cursor + self.batch_size]
        self.cursor += len(idx)
        return self.dataset.inputs[idx], self.dataset.labels[idx]

    def reshuffle(self) -> None:
        """次のエポックの順列を用意する"""
        self.epoch += 1
        self.cursor = 0
        self.permutation = self._permutation(self.epoch)

    def epoch_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """現在のエポックの残りバッチを順に返す"""
        while not self.exhausted:
            yield self.next_batch()


def next_batch(it: BatchIterator) -> Tuple[np.ndarray, np.ndarray]:
    return it.next_batch()
