"""
Core package
逆伝播付きテンソル演算の初期化
"""

from .tensor import Tensor, Trace, as_tensor, backward, elementwise
from .gradcheck import finite_diff_check
from . import ops

__all__ = [
    'Tensor',
    'Trace',
    'as_tensor',
    'backward',
    'elementwise',
    'finite_diff_check',
    'ops'
]
