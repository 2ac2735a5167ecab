"""
実験の実行サービス
設定からデータ・モデルを組み立て、学習・攻撃評価・診断・アブレーションを実行して
結果を出力ディレクトリに書き出す
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from core.errors import ConfigError
from models.config import resolve_attack
from models.dataset import LabeledDataset
from models.experiment import ExperimentConfig
from services import evaluation, landscape
from services.classifier import Architecture, Classifier, mlp, small_conv
from services.data_generator import gen_two_moons
from services.trainers import train as run_training
from storage.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from storage.loaders import load_cifar_bin, load_idx
from storage.report_writer import ReportWriter

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.ibat'
RESOLVED_CONFIG_NAME = 'resolved_config.cfg'
DIAGNOSTICS = ('entropy', 'minpert', 'surface_input', 'surface_weight')
ABLATION_HEADER_TAIL = ['status', 'clean_accuracy', 'robust_accuracy', 'error']

PathLike = Union[str, Path]


def build_dataset(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """[data] セクションから (学習用, 評価用) を組み立てる"""
    source = config.get('data', 'source')
    seed = config.integer('data', 'seed')
    if source == 'two_moons':
        data = gen_two_moons(config.integer('data', 'n'), config.number('data', 'noise'), seed=seed)
    elif source == 'idx':
        images, labels = config.get('data', 'images'), config.get('data', 'labels')
        if not images or not labels:
            raise ConfigError("data.source = idx には data.images と data.labels が必要です")
        data = load_idx(images, labels)
    elif source == 'cifar':
        if not config.get('data', 'path'):
            raise ConfigError("data.source = cifar には data.path が必要です")
        data = load_cifar_bin(config.get('data', 'path'))
    else:
        raise ConfigError(f"data.source の値 {source!r} は無効です（有効な値: two_moons, idx, cifar）")

    classes = config.int_list('data', 'classes')
    if classes:
        data = data.select_classes(classes)
    limit = config.integer('data', 'limit')
    if limit > 0:
        data = data.head(limit)
    data.validate()
    return data.split_train_test(config.number('data', 'test_fraction'), seed)


def build_architecture(config: ExperimentConfig, data: LabeledDataset) -> Architecture:
    arch = config.get('model', 'arch')
    if arch == 'mlp':
        return mlp(data.dim, data.num_classes, tuple(config.int_list('model', 'hidden')))
    if arch == 'smallconv':
        if data.input_shape is None:
            raise ConfigError(f"model.arch = smallconv には画像データが必要です: {data.name}")
        channels = config.int_list('model', 'channels')
        if len(channels) != 2:
            raise ConfigError(f"model.channels は2つの整数で指定してください: {channels}")
        return small_conv(data.input_shape, data.num_classes, tuple(channels), config.integer('model', 'dense'))
    raise ConfigError(f"model.arch の値 {arch!r} は無効です（有効な値: mlp, smallconv）")


def _final_scores(c: Classifier, config: ExperimentConfig, test: LabeledDataset) -> Tuple[float, float]:
    """テスト集合でのクリーン精度と PGD^20 頑健精度"""
    kind, cfg = resolve_attack('pgd20', config.attack_config())
    return evaluation.clean_accuracy(c, test), evaluation.robust_accuracy(c, test, cfg, kind)


def _run_ablation_cell(index: int, config_text: str, output_dir: str) -> Dict[str, Any]:
    """アブレーションの1セル。失敗しても例外を外に出さず、行として記録する"""
    row: Dict[str, Any] = {'cell': index}
    try:
        runner = ExperimentRunner(ExperimentConfig.from_text(config_text), output_dir)
        c, _, test = runner.fit()
        clean, robust = _final_scores(c, runner.config, test)
        row.update(status='ok', clean_accuracy=clean, robust_accuracy=robust)
    except (ValueError, RuntimeError) as e:
        logger.error(f"アブレーションのセル {index} が失敗しました: {e}")
        row.update(status='failed', error=f"{type(e).__name__}: {e}")
    return row


class ExperimentRunner:
    """
    1つの出力ディレクトリに対する実験の実行を管理するクラス
    """

    def __init__(self, config: ExperimentConfig, output_dir: PathLike):
        config.validate()
        self.config = config
        self.output_dir = Path(output_dir)
        self.writer = ReportWriter(self.output_dir)

    def write_resolved_config(self) -> Path:
        return self.writer.write_text(RESOLVED_CONFIG_NAME, self.config.to_text())

    # ---- 学習 ----

    def fit(self) -> Tuple[Classifier, LabeledDataset, LabeledDataset]:
        """学習してチェックポイント・学習レポート・解決済み設定を書き出す"""
        cfg = self.config.train_config()
        train_data, test_data = build_dataset(self.config)
        architecture = build_architecture(self.config, train_data)
        c = Classifier.initialize(architecture, seed=self.config.integer('model', 'seed'))

        self.write_resolved_config()
        report = run_training(c, train_data, cfg)
        self.writer.write_train_report(report)
        save_checkpoint(c, self.config.to_text(), self.output_dir / CHECKPOINT_NAME, seed=cfg.seed)
        return c, train_data, test_data

    def train(self) -> Path:
        self.fit()
        return self.output_dir / CHECKPOINT_NAME

    # ---- 攻撃評価 ----

    def attack(self, c: Classifier, kinds: Optional[Sequence[str]] = None,
               epsilon: Optional[float] = None) -> List[Path]:
        """指定した攻撃ごとに頑健精度を計算し eval_report.csv を書き出す"""
        names = list(kinds) if kinds else self.config.str_list('eval', 'attacks')
        if not names:
            raise ConfigError("攻撃が指定されていません（eval.attacks または --kinds）")
        base = self.config.attack_config()
        if epsilon is not None:
            base = replace(base, epsilon=epsilon)
            base.validate()
        _, test_data = build_dataset(self.config)
        self.write_resolved_config()
        report = evaluation.evaluate(c, test_data, base, names)
        return [self.writer.write_eval_report(report), self.writer.write_examples(report)]

    # ---- 診断 ----

    def diagnose(self, c: Classifier, which: str, eps_max: Optional[float] = None) -> List[Path]:
        if which not in DIAGNOSTICS:
            raise ConfigError(f"診断の種類 {which!r} は無効です（有効な値: {', '.join(DIAGNOSTICS)}）")
        config = self.config
        _, test_data = build_dataset(config)
        data = test_data.head(config.integer('eval', 'limit'))
        seed = config.attack_config().seed
        self.write_resolved_config()

        if which == 'entropy':
            _, cfg = resolve_attack('pgd20', config.attack_config())
            profile = evaluation.entropy_robustness_profile(c, data, cfg, seed=seed)
            return self.writer.write_entropy_profile(profile)
        if which == 'minpert':
            radius = eps_max if eps_max is not None else config.number('eval', 'eps_max')
            profile = evaluation.min_perturbation_profile(c, data, radius, tol=config.number('eval', 'tol'), seed=seed)
            return self.writer.write_minpert_profile(profile, [int(label) for label in data.labels])

        batch = data.head(config.integer('eval', 'surface_examples'))
        if which == 'surface_input':
            surface = landscape.input_loss_surface(c, batch.inputs, batch.labels, config.attack_config(),
                                                   resolution=config.integer('eval', 'resolution'), seed=seed)
            return [self.writer.write_input_surface(surface)]
        surface = landscape.weight_loss_surface(c, batch.inputs, batch.labels, config.attack_config(),
                                                config.float_list('eval', 'magnitudes'),
                                                directions=config.integer('eval', 'directions'), seed=seed)
        return [self.writer.write_weight_surface(surface)]

    # ---- アブレーション ----

    def ablate(self, parallel: Optional[bool] = None) -> Path:
        """
        [ablate] の直積の各セルを学習し、最終精度を ablation.csv にまとめる
        セルは cells/cell_NNN に書き出す。失敗したセルは status=failed として記録して続行する
        """
        cells = self.config.ablation_cells()
        if not cells:
            raise ConfigError("[ablate] に値が指定された軸がありません")
        axes = [axis for axis, _ in self.config.ablation_axes()]
        parallel = self.config.flag('ablate', 'parallel') if parallel is None else parallel
        self.write_resolved_config()
        logger.info(f"アブレーションを開始します: {len(cells)} セル（軸: {', '.join(axes)}, 並列: {parallel}）")

        jobs = [(i, cell.to_text(), str(self.output_dir / 'cells' / f'cell_{i:03d}')) for i, cell in enumerate(cells)]
        if parallel:
            with ProcessPoolExecutor() as pool:
                rows = list(pool.map(_run_ablation_cell, *zip(*jobs)))
        else:
            rows = [_run_ablation_cell(*job) for job in jobs]

        for row, cell in zip(rows, cells):
            for axis in axes:
                row[axis] = cell.get('train', axis)
        failed = sum(1 for row in rows if row['status'] != 'ok')
        if failed:
            logger.warning(f"{failed} / {len(rows)} セルが失敗しました")
        return self.writer.write_ablation(['cell', *axes, *ABLATION_HEADER_TAIL], rows)


def runner_from_checkpoint(checkpoint: PathLike, output_dir: PathLike,
                           config_path: Optional[PathLike] = None,
                           overrides: Sequence[Tuple[str, str]] = ()) -> Tuple[ExperimentRunner, Classifier]:
    """
    チェックポイントに埋め込まれた設定でデータを再構築する
    config_path を指定した場合はそちらを優先する
    """
    if config_path is not None:
        config = ExperimentConfig.load(config_path)
    else:
        config = ExperimentConfig.from_text(read_checkpoint(checkpoint).config_text, source=str(checkpoint))
    config.apply_overrides(overrides)
    return ExperimentRunner(config, output_dir), load_checkpoint(checkpoint)
