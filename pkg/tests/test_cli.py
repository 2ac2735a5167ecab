"""
コマンドラインの結合テスト（小さな two moons 設定で実行する）
"""

import pytest

import app
from storage.report_writer import read_rows

TINY_CONFIG = """
[data]
source = two_moons
n = 60
noise = 0.1
test_fraction = 0.25

[model]
hidden = 8

[train]
objective = {objective}
epochs = 1
batch_size = 16
lr = 0.05
probe_size = 8
weighting = {weighting}
mine_steps = 2

[attack]
epsilon = 0.1
steps = 2

[eval]
attacks = fgsm
limit = 10
resolution = 3
magnitudes = 0,0.5
directions = 2
surface_examples = 4
"""


def _write_config(tmp_path, objective='at', weighting='entropy', extra=''):
    path = tmp_path / f'{objective}_{weighting}.cfg'
    path.write_text(TINY_CONFIG.format(objective=objective, weighting=weighting) + extra, encoding='utf-8')
    return path


@pytest.fixture
def checkpoint(tmp_path):
    out = tmp_path / 'train'
    assert app.main(['train', '--config', str(_write_config(tmp_path)), '--output', str(out)]) == app.EXIT_OK
    return out / 'checkpoint.ibat'


def test_train_writes_outputs(tmp_path):
    out = tmp_path / 'run'
    code = app.main(['train', '--config', str(_write_config(tmp_path)), '--output', str(out), '--train.epochs', '2'])
    assert code == app.EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ['checkpoint.ibat', 'resolved_config.cfg', 'train_report.csv']
    assert len(read_rows(out / 'train_report.csv')) == 2
    assert 'epochs = 2' in (out / 'resolved_config.cfg').read_text(encoding='utf-8')


def test_attack_reports_each_kind(checkpoint, tmp_path):
    out = tmp_path / 'attack'
    code = app.main(['attack', '--checkpoint', str(checkpoint), '--kinds', 'fgsm,pgd20', '--output', str(out)])
    assert code == app.EXIT_OK
    rows = read_rows(out / 'eval_report.csv')
    assert [row['attack'] for row in rows] == ['fgsm', 'pgd20']
    assert len(read_rows(out / 'eval_examples.csv')) == 15


def test_attack_with_zero_radius(checkpoint, tmp_path):
    out = tmp_path / 'attack'
    assert app.main(['attack', '--checkpoint', str(checkpoint), '--kinds', 'pgd20', '--eps', '0',
                     '--output', str(out)]) == app.EXIT_OK
    row = read_rows(out / 'eval_report.csv')[0]
    assert row['robust_accuracy'] == row['clean_accuracy']


def test_unknown_attack_kind_is_a_config_error(checkpoint, tmp_path, capsys):
    code = app.main(['attack', '--checkpoint', str(checkpoint), '--kinds', 'pgd_minus', '--output', str(tmp_path / 'x')])
    assert code == app.EXIT_CONFIG
    assert 'pgd_minus' in capsys.readouterr().err


def test_missing_checkpoint(tmp_path):
    code = app.main(['attack', '--checkpoint', str(tmp_path / 'none.ibat'), '--output', str(tmp_path / 'x')])
    assert code == app.EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    code = app.main(['train', '--config', str(_write_config(tmp_path)), '--train.lamda', '1',
                     '--output', str(tmp_path / 'x')])
    assert code == app.EXIT_CONFIG


def test_invalid_diagnostic_is_rejected_by_parser(checkpoint):
    with pytest.raises(SystemExit) as exc:
        app.main(['diagnose', '--checkpoint', str(checkpoint), '--which', 'gradients'])
    assert exc.value.code == 2


@pytest.mark.parametrize('which, expected', [
    ('entropy', ['entropy_profile.csv', 'entropy_summary.csv']),
    ('minpert', ['minpert_profile.csv', 'minpert_summary.csv']),
    ('surface_input', ['loss_surface_input.csv']),
    ('surface_weight', ['loss_surface_weight.csv']),
])
def test_diagnostics(which, expected, checkpoint, tmp_path):
    out = tmp_path / which
    assert app.main(['diagnose', '--checkpoint', str(checkpoint), '--which', which, '--eps-max', '1/8',
                     '--output', str(out)]) == app.EXIT_OK
    for name in expected:
        assert (out / name).exists()


def test_ablation_records_failed_cells(tmp_path):
    # 隠れ層1層の MLP には層 #4 がないため、2番目のセルは失敗する
    config = _write_config(tmp_path, objective='infoat', weighting='mine', extra='\n[ablate]\nmine_tap = 1,4\n')
    out = tmp_path / 'ablate'
    assert app.main(['ablate', '--config', str(config), '--output', str(out)]) == app.EXIT_OK
    rows = read_rows(out / 'ablation.csv')
    assert [row['mine_tap'] for row in rows] == ['1', '4']
    assert [row['status'] for row in rows] == ['ok', 'failed']
    assert 'ConfigError' in rows[1]['error']
    assert (out / 'cells' / 'cell_000' / 'checkpoint.ibat').exists()


def test_parse_overrides():
    assert app.parse_overrides(['--train.lambda', '0.5', '--attack.epsilon=4/255']) == [
        ('train.lambda', '0.5'), ('attack.epsilon', '4/255')]
    with pytest.raises(ValueError):
        app.parse_overrides(['--train.lambda'])
    with pytest.raises(ValueError):
        app.parse_overrides(['stray'])


def _file_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_rerun_gives_identical_files(tmp_path):
    config = _write_config(tmp_path, objective='infoat')
    runs = []
    for name in ('first', 'second'):
        out = tmp_path / name
        assert app.main(['train', '--config', str(config), '--output', str(out / 'train')]) == app.EXIT_OK
        checkpoint = out / 'train' / 'checkpoint.ibat'
        assert app.main(['attack', '--checkpoint', str(checkpoint), '--kinds', 'fgsm,pgd20,spsa16',
                         '--output', str(out / 'attack')]) == app.EXIT_OK
        assert app.main(['diagnose', '--checkpoint', str(checkpoint), '--which', 'minpert', '--eps-max', '1/8',
                         '--output', str(out / 'diagnose')]) == app.EXIT_OK
        runs.append({part: _file_bytes(out / part) for part in ('train', 'attack', 'diagnose')})
    assert runs[0] == runs[1]
    assert 'checkpoint.ibat' in runs[0]['train']
