"""
データセットファイルの読み込み
MNIST 形式の IDX ファイルと CIFAR-10 のバイナリバッチに対応
"""

import gzip
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from core.errors import DatasetFormatError
from models.dataset import LabeledDataset

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072
CIFAR_SHAPE = (3, 32, 32)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ファイルが見つかりません: {path}")
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'rb') as f:
        return f.read()


def _idx_header(raw: bytes, expected_magic: int, dims: int, path: PathLike) -> tuple:
    header_size = 4 * (1 + dims)
    if len(raw) < header_size:
        raise DatasetFormatError(f"IDX ヘッダが途中で切れています: {path}")
    values = struct.unpack(f'>{1 + dims}I', raw[:header_size])
    if values[0] != expected_magic:
        raise DatasetFormatError(
            f"bad magic: {path} のマジック番号が 0x{values[0]:08x} です（期待値: 0x{expected_magic:08x}）")
    return values[1:]


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> LabeledDataset:
    """
    IDX 形式の画像・ラベルを読み込む（.gz にも対応）

    画素値は 1/255 倍して [0,1] に変換し、N×(rows·cols) の行列にする

    Raises:
        DatasetFormatError: マジック番号不一致・ファイルの途中切れ・件数不一致
    """
    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)

    count, rows, cols = _idx_header(raw_images, IDX_IMAGES_MAGIC, 3, images_path)
    (label_count,) = _idx_header(raw_labels, IDX_LABELS_MAGIC, 1, labels_path)
    if count != label_count:
        raise DatasetFormatError(f"画像数 {count} とラベル数 {label_count} が一致しません")

    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16)
    if pixels.size != count * rows * cols:
        raise DatasetFormatError(f"画像ファイルが途中で切れています: {images_path}（{pixels.size} / {count * rows * cols} バイト）")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8)
    if labels.size != count:
        raise DatasetFormatError(f"ラベルファイルが途中で切れています: {labels_path}（{labels.size} / {count} 件）")
    if count and int(labels.max()) >= num_classes:
        raise DatasetFormatError(f"ラベル {int(labels.max())} が num_classes={num_classes} の範囲外です")

    dataset = LabeledDataset(
        inputs=pixels.reshape(count, rows * cols).astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        name=Path(images_path).name,
        input_shape=(1, rows, cols)
    )
    logger.info(f"IDX データを読み込みました: {count}件（{rows}x{cols}）")
    return dataset


def load_cifar_bin(path: PathLike, num_classes: int = 10) -> LabeledDataset:
    """
    CIFAR-10 バイナリバッチを読み込む

    1レコード = ラベル1バイト + 画素3072バイト（チャネル優先 R→G→B の順をそのまま保持）

    Raises:
        DatasetFormatError: ファイル長が 3073 の倍数でない場合
    """
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(f"CIFAR のファイル長 {len(raw)} が {CIFAR_RECORD} の倍数ではありません（途中で切れたレコード）")
    count = len(raw) // CIFAR_RECORD
    if count == 0:
        logger.warning(f"CIFAR ファイルが空です: {path}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(count, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if count and int(labels.max()) >= num_classes:
        raise DatasetFormatError(f"ラベル {int(labels.max())} が num_classes={num_classes} の範囲外です")

    dataset = LabeledDataset(
        inputs=records[:, 1:].astype(np.float64) / 255.0,
        labels=labels,
        num_classes=num_classes,
        name=Path(path).name,
        input_shape=CIFAR_SHAPE
    )
    logger.info(f"CIFAR データを読み込みました: {count}件")
    return dataset


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: PathLike, labels_path: PathLike) -> None:
    """
    uint8 の画像 (N, rows, cols) とラベルを IDX 形式で書き出す（フィクスチャ作成用）
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack('>4I', IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack('>2I', IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())
