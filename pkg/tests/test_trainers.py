from dataclasses import replace

import numpy as np
import pytest

from core.errors import ConfigError
from models.config import AblationConfig, AttackConfig, Objective, OuterReg, TrainConfig, Weighting
from services import attacks, trainers
from services.classifier import Classifier, mlp
from services.data_generator import gen_two_moons


@pytest.fixture
def tiny_data():
    return gen_two_moons(40, noise=0.1, seed=2)


def _classifier() -> Classifier:
    return Classifier.initialize(mlp(2, 2, (8, 8)), seed=3)


def _cfg(objective: Objective, **kwargs) -> TrainConfig:
    base = dict(objective=objective, epochs=2, batch_size=16, lr=0.05, probe_size=8, seed=0,
                attack=AttackConfig(epsilon=0.1, steps=3, seed=0))
    base.update(kwargs)
    return TrainConfig(**base)


def _train(objective: Objective, data, **kwargs):
    c = _classifier()
    report = trainers.train(c, data, _cfg(objective, **kwargs))
    return c, report


def _assert_same_run(a, b):
    (c1, r1), (c2, r2) = a, b
    for name in c1.params:
        np.testing.assert_array_equal(c1.params[name].data, c2.params[name].data)
    assert r1.batch_losses == r2.batch_losses


def test_infoat_without_regularizers_is_at(tiny_data):
    _assert_same_run(_train(Objective.INFOAT, tiny_data, lam=0.0, beta=0.0),
                     _train(Objective.AT, tiny_data))


def test_trades_without_regularizer_is_plain_training(tiny_data):
    _assert_same_run(_train(Objective.TRADES, tiny_data, lam=0.0),
                     _train(Objective.PLAIN_CE, tiny_data))


def test_mart_outer_loss_hand_fixture(tiny_data):
    c = _classifier()
    x, y = tiny_data.inputs[:6], tiny_data.labels[:6]
    x_adv = np.clip(x + 0.05, 0.0, 1.0)
    loss, _ = trainers.outer_loss(c, _cfg(Objective.MART, lam=5.0), x, y, x_adv)

    p_nat, p_adv = c.probs(x).data, c.probs(x_adv).data
    rows = np.arange(len(y))
    p_adv_y = p_adv[rows, y]
    runner_up = np.where(np.eye(2)[y] == 1, -1.0, p_adv).max(axis=1)
    bce = -np.log(p_adv_y) - np.log(1.0 - runner_up)
    kl = (p_nat * np.log(p_nat / p_adv)).sum(axis=1)
    expected = np.mean(bce + 5.0 * kl * (1.0 - p_nat[rows, y]))
    assert loss.item() == pytest.approx(expected, rel=1e-10)


def _mart_reference(c, x, y, x_adv, lam, weight_fn):
    p_nat, p_adv = c.probs(x).data, c.probs(x_adv).data
    rows = np.arange(len(y))
    runner_up = np.where(np.eye(p_adv.shape[1])[y] == 1, -1.0, p_adv).max(axis=1)
    bce = -np.log(p_adv[rows, y]) - np.log(1.0 - runner_up)
    kl = (p_nat * np.log(p_nat / p_adv)).sum(axis=1)
    return np.mean(bce + lam * kl * weight_fn(p_nat, rows))


def test_mart_plus_outer_loss_hand_fixture(tiny_data):
    c = _classifier()
    x, y = tiny_data.inputs[:6], tiny_data.labels[:6]
    x_adv = np.clip(x + 0.05, 0.0, 1.0)
    loss, _ = trainers.outer_loss(c, _cfg(Objective.MART_PLUS, lam=5.0), x, y, x_adv)
    expected = _mart_reference(c, x, y, x_adv, 5.0, lambda p, rows: -(p * np.log(p)).sum(axis=1))
    assert loss.item() == pytest.approx(expected, rel=1e-10)

    mart, _ = trainers.outer_loss(c, _cfg(Objective.MART, lam=5.0), x, y, x_adv)
    assert mart.item() != pytest.approx(loss.item(), rel=1e-6)


def test_mart_weights_at_uniform_prediction():
    # x = (0.5, 0.5) でロジットがすべて 0 になる3クラスの線形モデル
    c = Classifier.initialize(mlp(2, 3, ()), seed=0)
    c.load_state({'out.weight': np.array([[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]]), 'out.bias': np.zeros(3)})
    x = np.array([[0.5, 0.5]])
    y = np.array([0])
    x_adv = np.array([[0.6, 0.4]])
    p_nat = c.probs(x).data
    np.testing.assert_allclose(p_nat, [[1 / 3, 1 / 3, 1 / 3]])

    p_adv = c.probs(x_adv).data
    kl = float((p_nat * np.log(p_nat / p_adv)).sum())
    _, plus = trainers.outer_loss(c, _cfg(Objective.MART_PLUS, lam=2.0), x, y, x_adv)
    _, mart = trainers.outer_loss(c, _cfg(Objective.MART, lam=2.0), x, y, x_adv)
    assert plus['reg'] == pytest.approx(2.0 * kl * np.log(3), rel=1e-10)
    assert mart['reg'] == pytest.approx(2.0 * kl * (2 / 3), rel=1e-10)


@pytest.mark.parametrize('objective', [Objective.MART, Objective.MART_PLUS])
def test_mart_without_regularizer_is_boosted_cross_entropy(objective, tiny_data):
    c = _classifier()
    x, y = tiny_data.inputs[:6], tiny_data.labels[:6]
    x_adv = np.clip(x - 0.05, 0.0, 1.0)
    loss, components = trainers.outer_loss(c, _cfg(objective, lam=0.0), x, y, x_adv)
    assert loss.item() == pytest.approx(_mart_reference(c, x, y, x_adv, 0.0, lambda p, rows: 0.0), rel=1e-10)
    assert components['reg'] == 0.0


def test_infoat_outer_loss_hand_fixture(tiny_data):
    c = _classifier()
    x, y = tiny_data.inputs[:6], tiny_data.labels[:6]
    x_adv = np.clip(x - 0.05, 0.0, 1.0)
    loss, components = trainers.outer_loss(c, _cfg(Objective.INFOAT, lam=2.5, beta=0.2), x, y, x_adv)

    p_nat, p_adv = c.probs(x).data, c.probs(x_adv).data
    ce = -np.log(p_adv[np.arange(len(y)), y])
    h_nat = -(p_nat * np.log(p_nat)).sum(axis=1)
    h_adv = -(p_adv * np.log(p_adv)).sum(axis=1)
    mse = ((p_nat - p_adv) ** 2).sum(axis=1)
    expected = np.mean(ce + 2.5 * h_nat * mse - 0.2 * h_adv)
    assert loss.item() == pytest.approx(expected, rel=1e-10)
    assert components['outer'] == pytest.approx(np.mean(-0.2 * h_adv), rel=1e-10)


def test_detached_weight_changes_gradient_not_value(tiny_data):
    x, y = tiny_data.inputs[:8], tiny_data.labels[:8]
    x_adv = np.clip(x + 0.05, 0.0, 1.0)
    values, grads = [], []
    for detach in (False, True):
        c = _classifier()
        cfg = _cfg(Objective.INFOAT, ablation=AblationConfig(detach_nat_entropy=detach))
        loss, _ = trainers.outer_loss(c, cfg, x, y, x_adv)
        loss.backward()
        values.append(loss.item())
        grads.append(c.params['out.weight'].grad.copy())
    assert values[0] == values[1]
    assert not np.allclose(grads[0], grads[1])


@pytest.mark.parametrize('outer_reg', list(OuterReg))
def test_outer_regularizer_variants_train(outer_reg, tiny_data):
    ablation = AblationConfig(outer_reg=outer_reg)
    _, report = _train(Objective.INFOAT, tiny_data, epochs=1, ablation=ablation)
    assert np.isfinite(report.batch_losses).all()


@pytest.mark.parametrize('weighting', [Weighting.ENTROPY, Weighting.ONE_MINUS_P, Weighting.NONE])
def test_weighting_variants_train(weighting, tiny_data):
    report = trainers.ablation_variant(_classifier(), tiny_data,
                                       _cfg(Objective.INFOAT, epochs=1, ablation=AblationConfig(weighting=weighting)))
    assert len(report.records) == 1


def test_mine_weighting_trains(tiny_data):
    ablation = AblationConfig(weighting=Weighting.MINE, mine_tap=2, mine_steps=3)
    _, report = _train(Objective.INFOAT, tiny_data, epochs=1, ablation=ablation)
    assert np.isfinite(report.batch_losses).all()


def test_mine_weighting_needs_batches_of_sixteen(tiny_data):
    ablation = AblationConfig(weighting=Weighting.MINE)
    with pytest.raises(ConfigError):
        _train(Objective.INFOAT, tiny_data, batch_size=8, ablation=ablation)


@pytest.mark.parametrize('objective', list(Objective))
def test_every_objective_records_each_epoch(objective, tiny_data):
    _, report = _train(objective, tiny_data)
    assert report.objective == objective.value
    assert [r.epoch for r in report.records] == [1, 2]
    for record in report.records:
        assert 0.0 <= record.clean_accuracy <= 1.0
        assert 0.0 <= record.robust_accuracy <= 1.0


def test_entry_point_checks_objective(tiny_data):
    with pytest.raises(ConfigError):
        trainers.train_at(_classifier(), tiny_data, _cfg(Objective.TRADES))


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=100, lr=0.1)
    assert cfg.drops == [75, 90, 100]
    assert cfg.lr_at(74) == pytest.approx(0.1)
    assert cfg.lr_at(75) == pytest.approx(0.01)
    assert cfg.lr_at(100) == pytest.approx(0.0001)


def test_schedule_is_applied_per_epoch(tiny_data):
    _, report = _train(Objective.PLAIN_CE, tiny_data, epochs=4, lr_drops=[3])
    assert [r.lr for r in report.records] == pytest.approx([0.05, 0.05, 0.005, 0.005])


@pytest.mark.slow
def test_adversarial_training_beats_plain_training_under_attack():
    data = gen_two_moons(120, noise=0.05, seed=4)
    attack = AttackConfig(epsilon=0.08, steps=5, seed=0)
    scores = {}
    for objective in (Objective.PLAIN_CE, Objective.AT):
        c = Classifier.initialize(mlp(2, 2, (16, 16)), seed=0)
        trainers.train(c, data, TrainConfig(objective=objective, epochs=15, batch_size=20, lr=0.1,
                                            weight_decay=0.0, probe_size=8, seed=0, attack=attack))
        result = attacks.pgd(c, data.inputs, data.labels, replace(attack, steps=10))
        scores[objective] = float(np.mean(~result.success_mask))
    assert scores[Objective.AT] >= scores[Objective.PLAIN_CE]
