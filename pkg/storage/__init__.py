"""
Storage package
データセット・チェックポイント・レポートの読み書き
"""

from .loaders import load_cifar_bin, load_idx
from .checkpoint import CheckpointRecord, load_checkpoint, read_checkpoint, save_checkpoint
from .report_writer import ReportWriter

__all__ = [
    'load_idx',
    'load_cifar_bin',
    'CheckpointRecord',
    'save_checkpoint',
    'load_checkpoint',
    'read_checkpoint',
    'ReportWriter'
]
