import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adafuse.heterogeneity import (
    ModalityWeights,
    ReferenceModel,
    compute_target_weights,
    reference_loss,
    reference_predict,
    update_weights,
    weighted_concat,
)
from adafuse.tensorcore import Context

EVAL = Context("eval")


def zero_model():
    m = ReferenceModel("A", np.random.default_rng(0))
    for p in m.parameters().values():
        p.data[:] = 0
    return m


def test_zero_weights_predict_half():
    x = np.random.default_rng(1).normal(size=(4, 16))
    np.testing.assert_array_equal(reference_predict(zero_model(), x, EVAL), 0.5)


def test_large_logit_saturates():
    m = zero_model()
    m.mlp.fc3.bias.data[:] = 40.0
    assert reference_predict(m, np.zeros((1, 16)), EVAL)[0] == pytest.approx(1.0, abs=1e-12)


def test_prediction_deterministic_in_eval():
    m = ReferenceModel("V", np.random.default_rng(5))
    x = np.random.default_rng(6).normal(size=(3, 16))
    assert reference_predict(m, x, EVAL).tobytes() == reference_predict(m, x, EVAL).tobytes()
    assert np.all((reference_predict(m, x, EVAL) > 0) & (reference_predict(m, x, EVAL) < 1))


def test_reference_loss_cases():
    m = zero_model()
    assert reference_loss(m, np.zeros((4, 16)), [0.5] * 4, EVAL) == 0.0
    assert reference_loss(m, np.zeros((4, 16)), [0, 1, 0, 1], EVAL) == pytest.approx(0.25)
    m.mlp.fc3.bias.data[:] = math.log(0.3 / 0.7)  # sigmoid -> 0.3
    assert reference_loss(m, np.zeros((1, 16)), [0.5], EVAL) == pytest.approx(0.04)
    with pytest.raises(ValueError):
        reference_loss(m, np.zeros((0, 16)), [], EVAL)


def test_target_weights_examples():
    np.testing.assert_allclose(compute_target_weights([0.2, 0.2, 0.2], 50), [1 / 3] * 3)
    # oracle: direct scalar evaluation
    e = [math.exp(-50 * l) for l in (0.01, 0.02, 0.03)]
    oracle = [v / sum(e) for v in e]
    np.testing.assert_allclose(oracle, [0.5065, 0.3072, 0.1863], atol=5e-5)
    np.testing.assert_allclose(compute_target_weights([0.01, 0.02, 0.03], 50), oracle, atol=1e-15)
    np.testing.assert_allclose(compute_target_weights([0.1, 5.0, 0.7], 1e-12), [1 / 3] * 3, atol=1e-10)


def test_target_weights_stable_for_large_losses():
    w = compute_target_weights([100.0, 101.0, 1000.0], 50)
    assert np.all(np.isfinite(w)) and w.sum() == pytest.approx(1.0)


def test_update_examples():
    w = ModalityWeights(alpha=0.5)
    new = update_weights(w, [0.5, 0.3, 0.2])
    np.testing.assert_allclose(new.w, [0.41667, 0.31667, 0.26667], atol=5e-6)
    same = update_weights(new, new.w)
    np.testing.assert_allclose(same.w, new.w, atol=1e-16)
    frozen = update_weights(ModalityWeights(alpha=1 - 1e-12), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(frozen.w, [1 / 3] * 3, atol=1e-11)


loss_triples = st.lists(st.floats(0, 2, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(st.lists(loss_triples, min_size=1, max_size=30), st.floats(0.01, 0.99),
       st.floats(0.01, 200.0))
def test_weights_stay_on_simplex(history, alpha, beta):
    w = ModalityWeights(alpha=alpha, beta=beta)
    for losses in history:
        w = update_weights(w, compute_target_weights(losses, beta), losses)
        assert abs(w.w.sum() - 1.0) < 1e-9
        assert np.all(w.w >= 0) and np.all(w.w <= 1)


@settings(max_examples=200, deadline=None)
@given(loss_triples, st.floats(0.01, 100.0))
def test_lower_loss_means_higher_target(losses, beta):
    w = compute_target_weights(losses, beta)
    for i in range(3):
        for j in range(3):
            if losses[i] < losses[j] and beta * (losses[j] - losses[i]) > 1e-9:
                assert w[i] > w[j]


def test_weighted_concat_examples():
    rng = np.random.default_rng(0)
    ha, hv, hl = (rng.normal(size=16) for _ in range(3))
    out = weighted_concat(ha, hv, hl, [1.0, 0.0, 0.0]).data
    np.testing.assert_array_equal(out, np.concatenate([ha, np.zeros(16), np.zeros(16)]))
    ones = np.ones(16)
    np.testing.assert_allclose(weighted_concat(ones, ones, ones, [1 / 3] * 3).data, 1 / 3)
    assert weighted_concat(np.ones((5, 16)), np.ones((5, 16)), np.ones((5, 16)), [1 / 3] * 3).shape == (5, 48)
