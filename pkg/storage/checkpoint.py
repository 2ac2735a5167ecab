"""
チェックポイントの保存・読み込み

【ファイル形式（リトルエンディアン）】
- マジック "IBAT"、u32 バージョン
- u32 長 + アーキテクチャ記述子（UTF-8）
- u32 長 + 設定スナップショット（UTF-8、INI 形式）
- i64 シード
- u32 配列数、配列ごとに u32 長 + 名前、u32 次元数、u32 形状、f64 の値
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np

from core.errors import CheckpointError, ShapeError
from core.tensor import Tensor
from services.classifier import Architecture, Classifier

logger = logging.getLogger(__name__)

MAGIC = b"IBAT"
VERSION = 2

PathLike = Union[str, Path]


@dataclass
class CheckpointRecord:
    """読み込んだチェックポイントの内容"""
    architecture: Architecture
    config_text: str
    seed: int
    arrays: Dict[str, np.ndarray]
    version: int = VERSION


class _Reader:
    def __init__(self, raw: bytes, path: PathLike):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"チェックポイントが破損しています（途中で切れています）: {self.path}")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointError(f"チェックポイントが破損しています（文字列を復号できません）: {self.path}") from e


def _pack_text(text: str) -> bytes:
    data = text.encode('utf-8')
    return struct.pack('<I', len(data)) + data


def save_checkpoint(c: Classifier, config_text: str, path: PathLike, seed: int = 0) -> Path:
    """
    分類器のパラメータと設定スナップショットを保存する
    同じ入力からは同じバイト列が書き出される
    """
    path = Path(path)
    parts = [MAGIC, struct.pack('<I', VERSION),
             _pack_text(c.architecture.to_descriptor()),
             _pack_text(config_text),
             struct.pack('<q', int(seed)),
             struct.pack('<I', len(c.params))]
    for name, p in c.params.items():
        parts.append(_pack_text(name))
        parts.append(struct.pack('<I', p.data.ndim))
        parts.append(struct.pack(f'<{p.data.ndim}I', *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype='<f8').tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b''.join(parts))
    logger.info(f"チェックポイントを保存しました: {path}")
    return path


def read_checkpoint(path: PathLike) -> CheckpointRecord:
    """
    Raises:
        CheckpointError: マジック不一致・バージョン不一致・破損・形状不一致
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"チェックポイントが見つかりません: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"bad magic: IBAT チェックポイントではありません: {path}")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"チェックポイントのバージョン {version} には対応していません（対応: {VERSION}）: {path}")

    try:
        architecture = Architecture.from_descriptor(reader.text())
    except ValueError as e:
        raise CheckpointError(f"アーキテクチャ記述子が不正です: {e}") from e
    config_text = reader.text()
    seed = struct.unpack('<q', reader.take(8))[0]

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.text()
        ndim = reader.u32()
        shape = struct.unpack(f'<{ndim}I', reader.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.take(8 * count), dtype='<f8').astype(np.float64)
        arrays[name] = values.reshape(shape)
    if reader.pos != len(reader.raw):
        raise CheckpointError(f"チェックポイントの末尾に余分なデータがあります: {path}")

    expected = architecture.param_shapes()
    if list(arrays) != list(expected):
        raise CheckpointError(f"パラメータ名が構成と一致しません: {list(arrays)}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{name} の形状 {arrays[name].shape} が構成 {shape} と一致しません")
    return CheckpointRecord(architecture=architecture, config_text=config_text, seed=seed, arrays=arrays, version=version)


def load_checkpoint(path: PathLike) -> Classifier:
    record = read_checkpoint(path)
    params = {name: Tensor(values, requires_grad=True, name=name) for name, values in record.arrays.items()}
    try:
        classifier = Classifier(record.architecture, params)
    except ShapeError as e:
        raise CheckpointError(str(e)) from e
    logger.info(f"チェックポイントを読み込みました: {path}（{record.architecture.to_descriptor()}）")
    return classifier
