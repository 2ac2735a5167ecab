"""
Services package
分類器・損失・攻撃・学習・評価のサービス層
"""

from .classifier import Architecture, Classifier
from .data_generator import SyntheticDataGenerator

__all__ = [
    'Architecture',
    'Classifier',
    'SyntheticDataGenerator'
]
