"""
敵対的学習ラボ コマンドラインアプリケーション

【アーキテクチャ】
- Core: テンソルと逆伝播
- Models: 設定・データセット・結果のデータモデル
- Services: 分類器・損失・攻撃・学習・評価
- Storage: データセット・チェックポイント・CSV の読み書き

【サブコマンド】
- train:    設定ファイルに従って学習し、チェックポイントと学習レポートを書き出す
- attack:   チェックポイントに攻撃をかけ、頑健精度を eval_report.csv に書き出す
- diagnose: エントロピー・最小摂動・損失曲面の診断
- ablate:   [ablate] の直積を順に学習し、ablation.csv にまとめる

設定ファイルの値は --section.key value で上書きできる（例: --train.lambda 2.5）
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from core.errors import ConfigError
from models.config import parse_fraction
from models.experiment import ExperimentConfig
from services.experiment import DIAGNOSTICS, ExperimentRunner, runner_from_checkpoint

# 環境変数の読み込み
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def configure_logging() -> None:
    level = os.getenv('IBAT_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def default_output_dir(command: str) -> Path:
    return Path(os.getenv('IBAT_OUTPUT_DIR', 'runs')) / command


def parse_overrides(extra: Sequence[str]) -> List[Tuple[str, str]]:
    """
    残りの引数を --section.key value（または --section.key=value）の組に変換する
    """
    overrides: List[Tuple[str, str]] = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith('--') or '.' not in token:
            raise ConfigError(f"認識できない引数です: {token}（上書きは --section.key value）")
        key = token[2:]
        if '=' in key:
            key, value = key.split('=', 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{token} に値がありません")
            value = extra[i + 1]
            i += 2
        overrides.append((key, value))
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='app.py', description='敵対的学習ラボ')
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', help='学習してチェックポイントを書き出す')
    train.add_argument('--config', required=True, help='設定ファイル（INI 形式）')
    train.add_argument('--output', help='出力ディレクトリ（既定: $IBAT_OUTPUT_DIR/train）')

    attack = sub.add_parser('attack', help='チェックポイントの頑健精度を評価する')
    attack.add_argument('--checkpoint', required=True)
    attack.add_argument('--config', help='データ設定（省略時はチェックポイント内の設定）')
    attack.add_argument('--kinds', help='攻撃名のカンマ区切り（例: fgsm,pgd20）')
    attack.add_argument('--eps', help='ε（小数または 8/255 のような分数）')
    attack.add_argument('--output')

    diagnose = sub.add_parser('diagnose', help='エントロピー・最小摂動・損失曲面の診断')
    diagnose.add_argument('--checkpoint', required=True)
    diagnose.add_argument('--config')
    diagnose.add_argument('--which', required=True, choices=DIAGNOSTICS)
    diagnose.add_argument('--eps-max', dest='eps_max', help='最小摂動探索の上限')
    diagnose.add_argument('--output')

    ablate = sub.add_parser('ablate', help='[ablate] の直積を順に学習する')
    ablate.add_argument('--config', required=True)
    ablate.add_argument('--parallel', action='store_true', help='セルを別プロセスで並列実行する')
    ablate.add_argument('--output')
    return parser


def run(args: argparse.Namespace, overrides: Sequence[Tuple[str, str]]) -> List[Path]:
    """サブコマンドを実行し、書き出したファイルの一覧を返す"""
    output = Path(args.output) if args.output else default_output_dir(args.command)

    if args.command == 'train':
        runner = ExperimentRunner(ExperimentConfig.load(args.config, overrides), output)
        runner.train()
        return sorted(output.iterdir())
    if args.command == 'ablate':
        runner = ExperimentRunner(ExperimentConfig.load(args.config, overrides), output)
        return [runner.ablate(parallel=True if args.parallel else None)]

    runner, classifier = runner_from_checkpoint(args.checkpoint, output, args.config, overrides)
    if args.command == 'attack':
        kinds = [k.strip() for k in args.kinds.split(',') if k.strip()] if args.kinds else None
        epsilon = parse_fraction(args.eps) if args.eps is not None else None
        return runner.attack(classifier, kinds, epsilon)
    eps_max = parse_fraction(args.eps_max) if args.eps_max is not None else None
    return runner.diagnose(classifier, args.which, eps_max)


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    try:
        overrides = parse_overrides(extra)
        written = run(args, overrides)
        for path in written:
            logger.info(f"出力: {path}")
        return EXIT_OK
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"設定・入力エラー: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as e:
        logger.error(f"実行時エラー: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"予期しないエラー: {str(e)}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == '__main__':
    sys.exit(main())
