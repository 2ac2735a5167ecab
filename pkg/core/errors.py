"""
例外定義
ValueError系（入力・設定の不正）とRuntimeError系（計算中の異常）に分けて定義する

app.py の終了コード対応:
- ValueError系   → 2（設定・入力エラー）
- RuntimeError系 → 3（数値計算・実行時エラー）
"""


class ShapeError(ValueError):
    """テンソル形状の不整合"""


class DomainError(ValueError):
    """定義域外の入力（非正値のlogなど）"""


class ConfigError(ValueError):
    """設定ファイル・CLI引数の不正"""


class DatasetFormatError(ValueError):
    """IDX / CIFARバイナリの形式不正"""


class CheckpointError(ValueError):
    """チェックポイントの破損・バージョン不一致・形状不一致"""


class NonFiniteError(RuntimeError):
    """有限値の入力から非有限値（inf / NaN）が生じた"""


class TraceError(RuntimeError):
    """計算トレースの不正利用（二重backward、切り離されたトレース）"""


class EpochExhaustedError(RuntimeError):
    """エポック内のミニバッチを使い切った（呼び出し側で再シャッフルする）"""


class MineDivergenceError(RuntimeError):
    """MINE推定値が発散した（ln(batch) + margin を超過）"""
