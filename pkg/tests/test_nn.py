import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from feddistill.nn import (
    EPS,
    DimensionError,
    DivergenceError,
    ModelWeights,
    Sample,
    Trainer,
    cross_entropy,
    fd_loss,
    fd_loss_gradient,
    forward,
    init_weights,
    one_hot,
    sgd_step,
    softmax,
    zeros_like,
)


def finite_difference(w, sample, teacher, gamma, h=1e-5):
    out = []
    for t, (wt, bt) in enumerate(w.layers):
        grads = []
        for arr_index, arr in enumerate((wt, bt)):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                plus = w.copy()
                minus = w.copy()
                plus.layers[t][arr_index][idx] += h
                minus.layers[t][arr_index][idx] -= h
                g[idx] = (fd_loss(plus, sample, teacher, gamma) - fd_loss(minus, sample, teacher, gamma)) / (2 * h)
            grads.append(g)
        out.append(tuple(grads))
    return ModelWeights(tuple(out), w.activation)


def max_rel_error(a, b):
    return max(
        float(np.max(np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), 1e-6)))
        for x, y in zip(a.arrays(), b.arrays())
    )


def test_zero_network_gives_uniform(rng):
    w = zeros_like(init_weights((5, 4, 7), rng))
    np.testing.assert_allclose(forward(w, rng.random(5)), np.full(7, 1 / 7))


def test_identity_net_argmax_follows_hot_index():
    w = ModelWeights(((np.eye(4) * 3.0, np.zeros(4)),))
    for k in range(4):
        x = np.zeros(4)
        x[k] = 1.0
        assert forward(w, x).argmax() == k


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-50, 50)), st.integers(0, 2**32 - 1))
def test_forward_is_valid_logit_vector(x, seed):
    w = init_weights((6, 5, 4), np.random.default_rng(seed))
    p = forward(w, x)
    assert abs(p.sum() - 1.0) <= 1e-6
    assert np.all((p >= 0) & (p <= 1))


def test_forward_dimension_mismatch_names_layer(rng):
    w = init_weights((5, 3, 2), rng)
    with pytest.raises(DimensionError, match="layer 0") as err:
        forward(w, np.zeros(4))
    assert err.value.layer == 0


def test_weights_must_chain():
    with pytest.raises(DimensionError, match="layer 1"):
        ModelWeights(((np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 2)), np.zeros(2))))


def test_forward_deterministic(rng):
    w = init_weights((8, 6, 3), rng)
    x = rng.random(8)
    assert forward(w, x).tobytes() == forward(w, x).tobytes()


def test_cross_entropy_examples():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0])) <= 1e-11
    assert cross_entropy(np.full(10, 0.1), one_hot(3, 10)) == pytest.approx(math.log(10), abs=1e-9)
    expected = 0.5 * (-math.log(0.7) - math.log(0.3))
    assert cross_entropy(np.array([0.7, 0.3]), np.array([0.5, 0.5])) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.78032, abs=1e-5)


def test_cross_entropy_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        cross_entropy(np.ones(3) / 3, np.ones(2) / 2)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-20, 20)), arrays(np.float64, 5, elements=st.floats(-20, 20)))
def test_cross_entropy_nonnegative(a, b):
    assert cross_entropy(softmax(a), softmax(b)) >= 0.0


def test_cross_entropy_zero_only_for_matching_point_mass():
    assert cross_entropy(one_hot(1, 3), one_hot(1, 3)) < 1e-11
    assert cross_entropy(np.array([0.5, 0.5, 0.0]), one_hot(1, 3)) > 0.1


def test_gradient_gamma_zero_is_plain(rng):
    w = init_weights((4, 5, 3), rng)
    s = Sample(rng.random(4), 1)
    teacher = softmax(rng.normal(size=3))
    plain = fd_loss_gradient(w, s)
    for a, b in zip(fd_loss_gradient(w, s, teacher, 0.0).arrays(), plain.arrays()):
        np.testing.assert_array_equal(a, b)


def test_gradient_onehot_teacher_doubles(rng):
    w = init_weights((4, 5, 3), rng)
    s = Sample(rng.random(4), 2)
    plain = fd_loss_gradient(w, s)
    doubled = fd_loss_gradient(w, s, one_hot(2, 3), 1.0)
    for a, b in zip(doubled.arrays(), plain.arrays()):
        np.testing.assert_allclose(a, 2 * b, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradient_matches_finite_differences_2_4_3(rng, activation):
    w = init_weights((2, 4, 3), rng, activation)
    s = Sample(rng.random(2), 1)
    teacher = softmax(rng.normal(size=3))
    analytic = fd_loss_gradient(w, s, teacher, 0.8)
    assert max_rel_error(analytic, finite_difference(w, s, teacher, 0.8)) < 1e-4


def test_gradient_rejects_negative_gamma(rng):
    w = init_weights((2, 3), rng)
    with pytest.raises(ValueError):
        fd_loss_gradient(w, Sample(np.zeros(2), 0), None, -1.0)


def test_sgd_step_examples(rng):
    w = init_weights((3, 4, 2), rng)
    same = sgd_step(w, zeros_like(w), 0.1)
    for a, b in zip(same.arrays(), w.arrays()):
        np.testing.assert_array_equal(a, b)
    zero = sgd_step(w, w, 1.0)
    assert all(not a.any() for a in zero.arrays())
    g = init_weights((3, 4, 2), rng)
    two = sgd_step(sgd_step(w, g, 0.05), g, 0.05)
    for a, b, c in zip(two.arrays(), w.arrays(), g.arrays()):
        np.testing.assert_allclose(a, b - 2 * 0.05 * c, atol=1e-15)


def test_sgd_step_rejects_nonfinite_and_bad_eta(rng):
    w = init_weights((3, 2), rng)
    bad = zeros_like(w)
    bad.layers[0][0][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        sgd_step(w, bad, 0.1)
    with pytest.raises(ValueError):
        sgd_step(w, w, 0.0)


def test_sgd_step_does_not_mutate(rng):
    w = init_weights((3, 2), rng)
    before = [a.copy() for a in w.arrays()]
    sgd_step(w, w, 0.5)
    for a, b in zip(w.arrays(), before):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_trainer_matches_pure_update(rng, activation):
    w = init_weights((6, 5, 4, 3), rng, activation)
    tr = Trainer(w, 0.07)
    ref = w
    for k in range(20):
        x = rng.random(6)
        y = int(rng.integers(3))
        teacher = softmax(rng.normal(size=3)) if k % 2 else None
        tr.step(x, y, teacher, 0.6)
        ref = sgd_step(ref, fd_loss_gradient(ref, Sample(x, y), teacher, 0.6), 0.07)
    for a, b in zip(tr.weights().arrays(), ref.arrays()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    np.testing.assert_allclose(tr.probs(x), forward(ref, x), atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_trainer_raises_on_divergence(rng):
    w = init_weights((2, 2), rng)
    w.layers[0][0][0, 0] = np.inf
    with pytest.raises(DivergenceError):
        Trainer(w, 0.1).step(np.ones(2), 0)


def test_flat_checkpoint_round_trip(rng):
    w = init_weights((5, 4, 3), rng, "tanh")
    doc = w.to_flat()
    assert doc["dims"] == [5, 4, 3]
    assert len(doc["params"]) == w.num_parameters == 5 * 4 + 4 + 4 * 3 + 3
    back = ModelWeights.from_flat(doc)
    assert back.activation == "tanh"
    for a, b in zip(back.arrays(), w.arrays()):
        np.testing.assert_array_equal(a, b)
    doc["params"] = doc["params"][:-1]
    with pytest.raises(ValueError):
        ModelWeights.from_flat(doc)


def test_init_is_glorot_uniform_and_seeded():
    a = init_weights((10, 6), np.random.default_rng(1))
    b = init_weights((10, 6), np.random.default_rng(1))
    np.testing.assert_array_equal(a.layers[0][0], b.layers[0][0])
    assert np.abs(a.layers[0][0]).max() <= math.sqrt(6 / 16)
    assert not a.layers[0][1].any()
    assert EPS == 1e-12
