"""
CSV レポートの書き出し
ヘッダは固定。浮動小数点は repr で書き出すため、同じ結果からは同じバイト列になる
"""

import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from models.results import (EntropyProfile, EvalReport, InputSurface, MinPerturbationProfile,
                            TrainReport, WeightSurface)

logger = logging.getLogger(__name__)

TRAIN_HEADER = ['objective', 'epoch', 'lr', 'clean_accuracy', 'robust_accuracy',
                'mean_loss', 'loss_ce', 'loss_reg', 'loss_outer']
EVAL_HEADER = ['attack', 'kind', 'epsilon', 'steps', 'num_examples', 'clean_accuracy', 'robust_accuracy']
ENTROPY_HEADER = ['bin_lo', 'bin_hi', 'robust_count', 'nonrobust_count']
ENTROPY_SUMMARY_HEADER = ['num_robust', 'num_nonrobust', 'gap', 'p_value']
EXAMPLE_HEADER = ['index', 'label', 'entropy', 'attack_success']
MINPERT_HEADER = ['index', 'label', 'entropy', 'min_epsilon']
MINPERT_SUMMARY_HEADER = ['num_examples', 'sentinel_count', 'spearman', 'p_value']
ROBUST_SENTINEL = 'robust'


def format_value(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class ReportWriter:
    """
    出力ディレクトリへの CSV・テキストの書き出しを管理するクラス
    """

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def path(self, filename: str) -> Path:
        return self.output_dir / filename

    def write_rows(self, filename: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.path(filename)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_value(v) for v in row])
        logger.info(f"レポートを書き出しました: {path}")
        return path

    def write_dicts(self, filename: str, header: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
        return self.write_rows(filename, header, ([row.get(key) for key in header] for row in rows))

    def write_text(self, filename: str, text: str) -> Path:
        path = self.path(filename)
        path.write_text(text, encoding='utf-8')
        logger.info(f"ファイルを書き出しました: {path}")
        return path

    # ---- 結果モデルごとの書き出し ----

    def write_train_report(self, report: TrainReport, filename: str = 'train_report.csv') -> Path:
        return self.write_dicts(filename, TRAIN_HEADER, report.to_rows())

    def write_eval_report(self, report: EvalReport, filename: str = 'eval_report.csv') -> Path:
        return self.write_dicts(filename, EVAL_HEADER, report.to_rows())

    def write_examples(self, report: EvalReport, filename: str = 'eval_examples.csv') -> Path:
        rows = [[e.index, e.label, e.entropy, e.attack_success] for e in report.examples]
        return self.write_rows(filename, EXAMPLE_HEADER, rows)

    def write_entropy_profile(self, profile: EntropyProfile, filename: str = 'entropy_profile.csv') -> List[Path]:
        edges = profile.bin_edges
        rows = [[edges[i], edges[i + 1], profile.robust_counts[i], profile.nonrobust_counts[i]]
                for i in range(len(edges) - 1)]
        summary = [[int(np.sum(~profile.success)), int(np.sum(profile.success)), profile.gap, profile.p_value]]
        return [self.write_rows(filename, ENTROPY_HEADER, rows),
                self.write_rows('entropy_summary.csv', ENTROPY_SUMMARY_HEADER, summary)]

    def write_minpert_profile(self, profile: MinPerturbationProfile, labels: Sequence[int],
                              filename: str = 'minpert_profile.csv') -> List[Path]:
        rows = [[i, labels[i], profile.entropies[i], ROBUST_SENTINEL if r is None else r]
                for i, r in enumerate(profile.radii)]
        summary = [[len(profile.radii), profile.sentinel_count, profile.spearman, profile.p_value]]
        return [self.write_rows(filename, MINPERT_HEADER, rows),
                self.write_rows('minpert_summary.csv', MINPERT_SUMMARY_HEADER, summary)]

    def write_input_surface(self, surface: InputSurface, filename: str = 'loss_surface_input.csv') -> Path:
        """行が δ1（敵対方向）、列が δ2（ランダム方向）の行列"""
        header = ['delta1\\delta2', *[format_value(d) for d in surface.delta2]]
        rows = [[d1, *surface.losses[i]] for i, d1 in enumerate(surface.delta1)]
        return self.write_rows(filename, header, rows)

    def write_weight_surface(self, surface: WeightSurface, filename: str = 'loss_surface_weight.csv') -> Path:
        directions = surface.per_direction.shape[0]
        header = ['magnitude', 'mean_loss', *[f'direction_{k}' for k in range(directions)]]
        mean = surface.mean_curve
        rows = [[m, mean[j], *surface.per_direction[:, j]] for j, m in enumerate(surface.magnitudes)]
        return self.write_rows(filename, header, rows)

    def write_ablation(self, header: Sequence[str], rows: Iterable[Dict[str, Any]],
                       filename: str = 'ablation.csv') -> Path:
        return self.write_dicts(filename, header, rows)


def read_rows(path: Union[str, Path]) -> List[Dict[str, Optional[str]]]:
    """CSV を辞書のリストとして読む"""
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))
