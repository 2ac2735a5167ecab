import numpy as np

from models.results import (AttackAccuracy, EntropyProfile, EpochRecord, EvalReport, ExampleRecord,
                            InputSurface, MinPerturbationProfile, TrainReport, WeightSurface)
from storage.report_writer import (EVAL_HEADER, MINPERT_HEADER, ROBUST_SENTINEL, TRAIN_HEADER, ReportWriter,
                                   format_value, read_rows)


def _train_report() -> TrainReport:
    report = TrainReport(objective='infoat')
    for epoch in (1, 2):
        report.records.append(EpochRecord(epoch=epoch, lr=0.01, clean_accuracy=0.9, robust_accuracy=0.5 + epoch / 10,
                                          mean_loss=1.0 / epoch, components={'ce': 0.7, 'reg': 0.2, 'outer': -0.1}))
    return report


def test_format_value():
    assert format_value(None) == ''
    assert format_value(True) == 'true'
    assert format_value(np.bool_(False)) == 'false'
    assert format_value(np.int64(3)) == '3'
    assert format_value(0.1) == '0.1'
    assert format_value(np.float64(1 / 3)) == repr(1 / 3)


def test_train_report_header_and_values(tmp_path):
    path = ReportWriter(tmp_path).write_train_report(_train_report())
    lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0] == ','.join(TRAIN_HEADER)
    rows = read_rows(path)
    assert [row['epoch'] for row in rows] == ['1', '2']
    assert rows[1]['robust_accuracy'] == repr(0.5 + 2 / 10)
    assert rows[0]['loss_outer'] == '-0.1'


def test_eval_report(tmp_path):
    report = EvalReport(clean_accuracy=0.75, num_examples=4,
                        attacks=[AttackAccuracy('fgsm', 'fgsm', 0.1, 1, 0.5),
                                 AttackAccuracy('pgd20', 'pgd', 0.1, 20, 0.25)],
                        examples=[ExampleRecord(i, i % 2, 0.1 * i, i == 3) for i in range(4)])
    writer = ReportWriter(tmp_path)
    rows = read_rows(writer.write_eval_report(report))
    assert list(rows[0]) == EVAL_HEADER
    assert [row['attack'] for row in rows] == ['fgsm', 'pgd20']
    examples = read_rows(writer.write_examples(report))
    assert [row['attack_success'] for row in examples] == ['false', 'false', 'false', 'true']


def test_minpert_profile_marks_sentinels(tmp_path):
    profile = MinPerturbationProfile(entropies=np.array([0.1, 0.2, 0.3]), radii=[0.0, None, 0.05],
                                     spearman=0.5, p_value=0.2, sentinel_count=1)
    detail, summary = ReportWriter(tmp_path).write_minpert_profile(profile, [0, 1, 1])
    rows = read_rows(detail)
    assert list(rows[0]) == MINPERT_HEADER
    assert [row['min_epsilon'] for row in rows] == ['0.0', ROBUST_SENTINEL, '0.05']
    assert read_rows(summary)[0]['sentinel_count'] == '1'


def test_entropy_profile(tmp_path):
    profile = EntropyProfile(entropies=np.array([0.1, 0.6]), success=np.array([False, True]),
                             bin_edges=np.array([0.0, 0.5, 1.0]), robust_counts=np.array([1, 0]),
                             nonrobust_counts=np.array([0, 1]), gap=0.5, p_value=0.5)
    detail, summary = ReportWriter(tmp_path).write_entropy_profile(profile)
    assert len(read_rows(detail)) == 2
    assert read_rows(summary)[0] == {'num_robust': '1', 'num_nonrobust': '1', 'gap': '0.5', 'p_value': '0.5'}


def test_surfaces(tmp_path):
    writer = ReportWriter(tmp_path)
    axis = np.array([-0.1, 0.0, 0.1])
    path = writer.write_input_surface(InputSurface(delta1=axis, delta2=axis, losses=np.arange(9.0).reshape(3, 3)))
    lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0] == 'delta1\\delta2,-0.1,0.0,0.1'
    assert lines[2] == '0.0,3.0,4.0,5.0'

    surface = WeightSurface(magnitudes=np.array([0.0, 1.0]), per_direction=np.array([[1.0, 2.0], [3.0, 4.0]]))
    rows = read_rows(writer.write_weight_surface(surface))
    assert rows[1] == {'magnitude': '1.0', 'mean_loss': '3.0', 'direction_0': '2.0', 'direction_1': '4.0'}


def test_ablation_missing_values_are_blank(tmp_path):
    header = ['cell', 'lambda', 'status', 'clean_accuracy', 'error']
    rows = [{'cell': 0, 'lambda': '0', 'status': 'ok', 'clean_accuracy': 0.9},
            {'cell': 1, 'lambda': '2.5', 'status': 'failed', 'error': 'NonFiniteError: nan'}]
    out = read_rows(ReportWriter(tmp_path).write_ablation(header, rows))
    assert out[0]['error'] == ''
    assert out[1]['clean_accuracy'] == ''


def test_rewriting_gives_identical_bytes(tmp_path):
    a = ReportWriter(tmp_path / 'a').write_train_report(_train_report())
    b = ReportWriter(tmp_path / 'b').write_train_report(_train_report())
    assert a.read_bytes() == b.read_bytes()
