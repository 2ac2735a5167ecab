from dataclasses import replace

import numpy as np
import pytest

from core.tensor import as_tensor
from models.config import AttackConfig, AttackKind, LossKind
from services import attacks, losses
from services.classifier import Classifier, mlp


def _assert_feasible(x_adv, x, epsilon):
    assert np.abs(x_adv - x).max() <= epsilon + 1e-12
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def test_project_is_idempotent_and_feasible():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(20, 3))
    moved = x + rng.normal(scale=0.5, size=x.shape)
    once = attacks.project(moved, x, 0.1)
    _assert_feasible(once, x, 0.1)
    np.testing.assert_array_equal(attacks.project(once, x, 0.1), once)


def test_linear_objective_reaches_ball_corner():
    w = np.array([[1.0], [-2.0], [0.5]])
    x = np.array([[0.5, 0.5, 0.95]])
    cfg = AttackConfig(epsilon=0.1, steps=10, seed=0)
    result = attacks.pgd_maximize(lambda t: (t @ as_tensor(w)).reshape(1), x, cfg)
    np.testing.assert_allclose(result.x_adv, [[0.6, 0.4, 1.0]], atol=1e-12)


def test_trajectory_has_one_entry_per_step_and_final():
    w = np.ones((2, 1))
    cfg = AttackConfig(epsilon=0.1, steps=4, restarts=3, seed=0)
    result = attacks.pgd_maximize(lambda t: (t @ as_tensor(w)).reshape(3), np.full((3, 2), 0.5), cfg)
    assert len(result.loss_trajectory) == 3 * 5


def test_more_restarts_never_lower_the_loss(small_mlp, moons):
    x, y = moons.inputs[:20], moons.labels[:20]
    cfg = AttackConfig(epsilon=0.2, steps=3, seed=0)
    one = attacks.pgd(small_mlp, x, y, cfg, np.random.default_rng(1))
    three = attacks.pgd(small_mlp, x, y, replace(cfg, restarts=3), np.random.default_rng(1))
    assert (three.final_loss >= one.final_loss - 1e-12).all()


@pytest.mark.parametrize('kind', list(AttackKind))
def test_every_attack_stays_in_the_ball(kind, small_mlp, moons):
    x, y = moons.inputs[:16], moons.labels[:16]
    cfg = AttackConfig(epsilon=0.05, steps=3, seed=0, spsa_batch=8)
    result = attacks.run_attack(kind, small_mlp, x, y, cfg)
    _assert_feasible(result.x_adv, x, 0.05)
    np.testing.assert_array_equal(result.success_mask, small_mlp.predict(result.x_adv) != y)


def test_zero_radius_returns_input(small_mlp, moons):
    x, y = moons.inputs[:10], moons.labels[:10]
    cfg = AttackConfig(epsilon=0.0, steps=3, seed=0)
    np.testing.assert_array_equal(attacks.pgd(small_mlp, x, y, cfg).x_adv, x)
    np.testing.assert_array_equal(attacks.fgsm(small_mlp, x, y, cfg).x_adv, x)


def test_fgsm_is_single_step_pgd_without_random_start(small_mlp, moons):
    x, y = moons.inputs[:30], moons.labels[:30]
    cfg = AttackConfig(epsilon=0.1, seed=0)
    single = replace(cfg, steps=1, step_size=cfg.epsilon, random_start=False)
    np.testing.assert_array_equal(attacks.fgsm(small_mlp, x, y, cfg).x_adv,
                                  attacks.pgd(small_mlp, x, y, single).x_adv)


def test_info_pgd_without_regularizer_matches_pgd(small_mlp, moons):
    x, y = moons.inputs[:30], moons.labels[:30]
    cfg = AttackConfig(epsilon=0.1, steps=5, lam=0.0, seed=0)
    info = attacks.info_pgd(small_mlp, x, y, cfg, np.random.default_rng(3))
    plain = attacks.pgd(small_mlp, x, y, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(info.x_adv, plain.x_adv)
    assert info.loss_trajectory == plain.loss_trajectory


def test_info_pgd_default_weights_are_clean_entropy(small_mlp, moons):
    x, y = moons.inputs[:8], moons.labels[:8]
    result = attacks.info_pgd(small_mlp, x, y, AttackConfig(epsilon=0.05, steps=2, seed=0))
    with small_mlp.frozen():
        expected = losses.entropy(small_mlp.probs(x)).data
    np.testing.assert_allclose(result.weights, expected)


def test_trades_inner_success_is_relative_to_natural_prediction(small_mlp, moons):
    x = moons.inputs[:16]
    result = attacks.trades_inner(small_mlp, x, AttackConfig(epsilon=0.1, steps=3, seed=0))
    _assert_feasible(result.x_adv, x, 0.1)
    np.testing.assert_array_equal(result.success_mask, small_mlp.predict(result.x_adv) != small_mlp.predict(x))


def test_spsa_gradient_aligns_with_true_gradient():
    w = np.array([1.0, -2.0, 0.5, 3.0, -1.0])
    x = np.full((1, 5), 0.5)
    estimate = attacks.spsa_gradient(lambda probes: probes @ w, x, spsa_batch=512, delta=1e-3,
                                     rng=np.random.default_rng(0))
    cosine = estimate[0] @ w / (np.linalg.norm(estimate[0]) * np.linalg.norm(w))
    assert cosine > 0.9


def test_spsa_leaves_misclassified_examples_alone(small_mlp, moons):
    x, y = moons.inputs[:20], moons.labels[:20]
    wrong = small_mlp.predict(x) != y
    result = attacks.spsa(small_mlp, x, y, AttackConfig(epsilon=0.1, steps=3, seed=0, spsa_batch=8))
    np.testing.assert_array_equal(result.x_adv[wrong], x[wrong])


def test_min_perturbation_contract(trained_moons):
    c, data = trained_moons
    x, y = data.inputs[:24], data.labels[:24]
    radii = attacks.min_perturbation(c, x, y, eps_max=0.3, tol=1e-2, steps=10, restarts=1)
    wrong = c.predict(x) != y
    for i, r in enumerate(radii):
        if wrong[i]:
            assert r == 0.0
        elif r is not None:
            assert 0.0 < r <= 0.3


def test_min_perturbation_sentinel_when_no_budget(zero_classifier):
    x = np.full((4, 2), 0.5)
    y = np.array([0, 0, 1, 1])
    assert attacks.min_perturbation(zero_classifier, x, y, eps_max=0.2) == [None, None, 0.0, 0.0]


# 線形モデル z = x·W（クラス0 の重み w0、クラス1 の重み w1）
W_LINEAR = np.array([[1.0, -1.0],
                     [-1.0, 1.0],
                     [0.5, 0.0]])


@pytest.fixture
def linear_classifier() -> Classifier:
    c = Classifier.initialize(mlp(3, 2, ()), seed=0)
    c.load_state({'out.weight': W_LINEAR, 'out.bias': np.zeros(2)})
    return c


def test_cw_pgd_on_linear_model_moves_to_the_corner(linear_classifier):
    x = np.full((1, 3), 0.5)
    y = np.array([0])
    cfg = AttackConfig(epsilon=0.05, steps=20, random_start=False, seed=0)
    result = attacks.cw_pgd(linear_classifier, x, y, cfg)
    direction = W_LINEAR[:, 1] - W_LINEAR[:, 0]
    np.testing.assert_allclose(result.x_adv, x + 0.05 * np.sign(direction), atol=1e-12)
    # マージンは m0 + ε·‖w1 - w0‖₁
    expected = x[0] @ direction + 0.05 * np.abs(direction).sum()
    np.testing.assert_allclose(result.final_loss, [expected], atol=1e-12)


def test_min_perturbation_on_linear_model(linear_classifier):
    x = np.array([[0.55, 0.5, 0.5],    # y=0, マージン 0.35
                  [0.45, 0.6, 0.5],    # y=1, マージン 0.05
                  [0.5, 0.56, 0.4],    # y=1, 誤分類
                  [0.7, 0.3, 0.5]])    # y=0, マージン 1.05（eps_max を超える）
    y = np.array([0, 1, 1, 0])
    tol = 1e-3
    radii = attacks.min_perturbation(linear_classifier, x, y, eps_max=0.2, tol=tol)
    norm = np.abs(W_LINEAR[:, 0] - W_LINEAR[:, 1]).sum()
    for radius, margin in zip(radii[:2], (0.35, 0.05)):
        assert margin / norm - 1e-9 <= radius <= margin / norm + tol
    assert radii[2] == 0.0
    assert radii[3] is None


@pytest.mark.parametrize('loss_kind, direct', [
    (LossKind.CE, lambda c, x, y, cfg, rng: attacks.pgd(c, x, y, cfg, rng)),
    (LossKind.CW_MARGIN, lambda c, x, y, cfg, rng: attacks.cw_pgd(c, x, y, cfg, rng)),
    (LossKind.KL_TRADES, lambda c, x, y, cfg, rng: attacks.trades_inner(c, x, cfg, rng)),
    (LossKind.INFO, lambda c, x, y, cfg, rng: attacks.info_pgd(c, x, y, cfg, rng)),
])
def test_pgd_objective_follows_loss_kind(loss_kind, direct, small_mlp, moons):
    x, y = moons.inputs[:24], moons.labels[:24]
    cfg = AttackConfig(epsilon=0.1, steps=4, loss_kind=loss_kind, seed=0)
    dispatched = attacks.run_attack(AttackKind.PGD, small_mlp, x, y, cfg, np.random.default_rng(5))
    expected = direct(small_mlp, x, y, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(dispatched.x_adv, expected.x_adv)
    np.testing.assert_array_equal(dispatched.success_mask, expected.success_mask)


def test_cw_margin_loss_kind_changes_the_attack(small_mlp, moons):
    x, y = moons.inputs[:24], moons.labels[:24]
    ce = attacks.run_attack(AttackKind.PGD, small_mlp, x, y, AttackConfig(epsilon=0.1, steps=4, seed=0))
    cw = attacks.run_attack(AttackKind.PGD, small_mlp, x, y,
                            AttackConfig(epsilon=0.1, steps=4, seed=0, loss_kind=LossKind.CW_MARGIN))
    np.testing.assert_allclose(cw.final_loss, losses.margin_loss(small_mlp.logits(cw.x_adv), y).data, atol=1e-12)
    assert not np.array_equal(ce.final_loss, cw.final_loss)


def test_more_steps_are_at_least_as_strong(trained_moons):
    c, data = trained_moons
    x, y = data.inputs[:64], data.labels[:64]
    cfg = AttackConfig(epsilon=0.1, seed=0)
    one = attacks.pgd(c, x, y, replace(cfg, steps=1), np.random.default_rng(2))
    twenty = attacks.pgd(c, x, y, replace(cfg, steps=20), np.random.default_rng(2))
    assert (twenty.final_loss >= one.final_loss - 1e-12).all()
    assert twenty.success_mask.sum() >= one.success_mask.sum()


@pytest.mark.parametrize('kind', list(AttackKind))
def test_feasibility_over_many_examples(kind, small_mlp):
    rng = np.random.default_rng(11)
    x = rng.uniform(size=(2000, 2))
    x[:200] = rng.integers(0, 2, size=(200, 2))
    y = rng.integers(0, 2, size=2000)
    epsilon = 0.1
    cfg = AttackConfig(epsilon=epsilon, steps=5, seed=0, spsa_batch=8)
    result = attacks.run_attack(kind, small_mlp, x, y, cfg, np.random.default_rng(3))
    assert result.x_adv.shape == x.shape
    assert np.abs(result.x_adv - x).max() <= epsilon + 1e-9
    assert result.x_adv.min() >= 0.0 and result.x_adv.max() <= 1.0
