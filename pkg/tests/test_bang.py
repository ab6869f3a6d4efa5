import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bangforge.bang import (
    AllBlankBatch,
    BangConfig,
    InvPolicy,
    StepPolicy,
    bang_exponents,
    bang_scales,
    bang_weight_update,
    effective_epsilon,
    lr_at,
    per_sample_norms,
    sgd_momentum_step,
)


# frozen by independent evaluation of the balancing formulas:
#   rho = 0.8 * (1 - n/2) over n = [2, 1, 0.5]; eta = (2/n)**rho
HAND_NORMS = np.array([2.0, 1.0, 0.5])
HAND_RHO = np.array([0.0, 0.4, 0.6])
HAND_ETA = np.array([1.0, 1.3195079107728942, 2.2973967099940698])


def test_exponents_hand_case():
    rho = bang_exponents(HAND_NORMS, 0.8)
    np.testing.assert_allclose(rho, HAND_RHO, atol=1e-15)


def test_scales_hand_case():
    eta = bang_scales(HAND_NORMS, HAND_RHO)
    np.testing.assert_allclose(eta, HAND_ETA, rtol=1e-12)
    assert eta[0] == 1.0  # max-norm element, exactly


def test_equal_norms_give_zero_exponents():
    rho = bang_exponents(np.full(5, 3.7), 0.9)
    np.testing.assert_array_equal(rho, np.zeros(5))


def test_epsilon_zero_recovers_regular_training():
    rho = bang_exponents(HAND_NORMS, 0.0)
    np.testing.assert_array_equal(rho, np.zeros(3))
    eta = bang_scales(HAND_NORMS, rho)
    np.testing.assert_array_equal(eta, np.ones(3))


def test_incorrect_scale_halves_epsilon_for_misclassified():
    # element with norm 1 is misclassified: rho = (0.8 * 0.5) * (1 - 1/2) = 0.2
    eps = effective_epsilon(0.8, np.array([True, False]), 0.5)
    rho = bang_exponents(np.array([2.0, 1.0]), eps)
    np.testing.assert_allclose(rho, [0.0, 0.2], atol=1e-15)
    eta = bang_scales(np.array([2.0, 1.0]), rho)
    assert eta[1] == pytest.approx(1.148698354997035, rel=1e-12)


def test_all_blank_batch_raises():
    with pytest.raises(AllBlankBatch):
        bang_exponents(np.array([0.0, 5e-13, 1e-13]), 0.8)


def test_blank_elements_get_neutral_scale():
    norms = np.array([1.0, 0.0, 1e-13])
    rho = bang_exponents(norms, 0.8)
    eta = bang_scales(norms, rho)
    assert eta[0] == 1.0
    assert eta[1] == 1.0 and eta[2] == 1.0
    assert np.all(np.isfinite(eta))


@settings(max_examples=200)
@given(st.lists(st.floats(min_value=1e-6, max_value=1e6), min_size=1, max_size=16),
       st.floats(min_value=0.0, max_value=1.0))
def test_scale_law_properties(norm_list, eps):
    norms = np.array(norm_list)
    rho = bang_exponents(norms, eps)
    eta = bang_scales(norms, rho)
    assert eta[np.argmax(norms)] == 1.0      # max element exactly neutral
    assert np.all(eta >= 1.0)                # scaling only amplifies
    order = np.argsort(norms)
    assert np.all(np.diff(eta[order]) <= 1e-12)  # non-increasing in the norm


@settings(max_examples=100)
@given(st.lists(st.floats(min_value=1e-3, max_value=1e3), min_size=2, max_size=8),
       st.floats(min_value=1e-3, max_value=1e3))
def test_ratio_scale_invariance(norm_list, c):
    norms = np.array(norm_list)
    rho_a = bang_exponents(norms, 0.8)
    rho_b = bang_exponents(c * norms, 0.8)
    np.testing.assert_allclose(rho_a, rho_b, atol=1e-12)
    np.testing.assert_allclose(bang_scales(norms, rho_a),
                               bang_scales(c * norms, rho_b), rtol=1e-12)


def test_weight_update_reduces_to_plain_mean():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(8, 4, 3))
    out = bang_weight_update(g, np.ones(8), 1.0)
    assert np.max(np.abs(out - g.mean(axis=0))) <= 1e-12 * np.max(np.abs(g))


def test_weight_update_linear_in_beta():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(4, 5))
    one = bang_weight_update(g, np.ones(4), 1.0)
    two = bang_weight_update(g, np.ones(4), 2.0)
    np.testing.assert_array_equal(two, 2.0 * one)


def test_weight_update_hand_case():
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = bang_weight_update(g, np.array([1.0, 2.0]), 1.0)
    np.testing.assert_allclose(out, [0.5, 1.0], atol=1e-15)


def test_sgd_momentum_zero_is_vanilla():
    w, v = sgd_momentum_step(np.array([1.0, 2.0]), np.array([0.5, -0.5]),
                             lr=0.1, momentum=0.0, velocity=np.zeros(2))
    np.testing.assert_allclose(w, [0.95, 2.05], atol=1e-15)


def test_sgd_pure_inertia_with_zero_gradient():
    w, v = sgd_momentum_step(np.zeros(2), np.zeros(2), lr=0.1, momentum=0.9,
                             velocity=np.array([1.0, -1.0]))
    np.testing.assert_allclose(w, [0.9, -0.9], atol=1e-15)
    np.testing.assert_allclose(v, [0.9, -0.9], atol=1e-15)


def test_sgd_two_step_recurrence():
    # constant gradient g, momentum 0.9, lr 0.1: v2 = -0.19 g (hand-checked)
    g = np.array([2.0])
    w, v = sgd_momentum_step(np.zeros(1), g, 0.1, 0.9, np.zeros(1))
    w, v = sgd_momentum_step(w, g, 0.1, 0.9, v)
    np.testing.assert_allclose(v, -0.19 * g, rtol=1e-14)


def test_inv_policy_initial_and_decayed():
    pol = InvPolicy(base=0.01, gamma=1e-4, power=0.75)
    assert lr_at(pol, 0) == 0.01
    assert lr_at(pol, 10000) == pytest.approx(0.005946035575013605, rel=1e-12)


def test_step_policy_drop_schedule():
    # 500 iterations/epoch; drops after epoch 36 and again after epoch 38
    pol = StepPolicy(base=0.001, boundaries=(18000, 19000), factor=0.1)
    assert lr_at(pol, 17999) == pytest.approx(0.001, rel=1e-15)
    assert lr_at(pol, 18000) == pytest.approx(0.0001, rel=1e-15)
    assert lr_at(pol, 18999) == pytest.approx(0.0001, rel=1e-15)
    assert lr_at(pol, 19000) == pytest.approx(0.00001, rel=1e-15)


def test_lr_at_rejects_negative_iteration():
    with pytest.raises(ValueError):
        lr_at(InvPolicy(), -1)


def test_config_validation():
    with pytest.raises(ValueError):
        BangConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        BangConfig(beta=0.0)
    with pytest.raises(ValueError):
        BangConfig(incorrect_scale=-0.1)
    with pytest.raises(ValueError):
        BangConfig(norm_source="nonsense")
    cfg = BangConfig(beta=1.2, epsilon=0.8, layer_epsilon={"fc2": 0.5})
    assert cfg.epsilon_for("fc2") == 0.5
    assert cfg.epsilon_for("conv1") == 0.8
    assert cfg.incorrect_scale * cfg.epsilon <= cfg.epsilon


def test_config_roundtrip():
    cfg = BangConfig(beta=1.2, epsilon=0.8, incorrect_scale=0.5,
                     layer_beta={"conv1": 2.0})
    assert BangConfig.from_dict(cfg.to_dict()) == cfg


def test_per_sample_norms_handles_subnormals():
    delta = np.zeros((3, 4))
    delta[0] = [3.0, 4.0, 0.0, 0.0]
    delta[1, 2] = 1e-200   # squaring would underflow
    norms = per_sample_norms(delta)
    assert norms[0] == pytest.approx(5.0)
    assert norms[1] == pytest.approx(1e-200)
    assert norms[2] == 0.0
