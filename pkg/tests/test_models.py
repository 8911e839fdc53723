import math

import numpy as np
import pytest

from dpcore import models, prng

from conftest import finite_difference_grad, random_example, random_model


def test_logistic_layout_and_zero_biases():
    m = models.Model(kind="logistic", input_dim=3)
    p = models.init_params(m, prng.seed(0))
    assert p.layout.segments == (("w", 0, 3), ("b", 3, 1))
    assert p.segment("b")[0] == 0.0


def test_init_deterministic():
    m = models.Model(kind="mlp", input_dim=4, hidden_dim=8)
    a = models.init_params(m, prng.seed(5))
    b = models.init_params(m, prng.seed(5))
    assert np.array_equal(a.values, b.values)


def test_mlp_param_count():
    m = models.Model(kind="mlp", input_dim=4, hidden_dim=8)
    assert m.param_count() == 4 * 8 + 8 + 8 + 1 == 49


def test_init_weight_scale():
    # N(0, 1/fan_in): the empirical std of a wide layer should be close.
    m = models.Model(kind="mlp", input_dim=100, hidden_dim=100)
    p = models.init_params(m, prng.seed(1))
    assert abs(p.segment("w1").std() - 0.1) < 0.005
    assert np.all(p.segment("b1") == 0.0)


def test_zero_width_layer_rejected():
    with pytest.raises(ValueError):
        models.Model(kind="mlp", input_dim=4, hidden_dim=0)
    with pytest.raises(ValueError):
        models.Model(kind="linear", input_dim=0)


def test_logistic_loss_at_origin_is_log2():
    m = models.Model(kind="logistic", input_dim=2)
    p = models.GradientVector.zeros(m.layout())
    for y in (0.0, 1.0):
        ex = models.Example(np.array([3.0, -1.0]), y)
        assert models.per_example_loss(m, p, ex) == pytest.approx(math.log(2), rel=1e-12)


def test_linear_loss_at_origin():
    m = models.Model(kind="linear", input_dim=2)
    p = models.GradientVector.zeros(m.layout())
    ex = models.Example(np.array([1.0, 1.0]), 2.0)
    assert models.per_example_loss(m, p, ex) == pytest.approx(2.0, rel=1e-12)


def test_mlp_loss_nonnegative_finite(rng):
    m = models.Model(kind="mlp", input_dim=5, hidden_dim=4, activation="tanh")
    p = models.init_params(m, prng.seed(3))
    for _ in range(20):
        loss = models.per_example_loss(m, p, random_example(rng, 5, True))
        assert loss >= 0.0 and math.isfinite(loss)


def test_logistic_grad_closed_form_at_origin():
    m = models.Model(kind="logistic", input_dim=3)
    p = models.GradientVector.zeros(m.layout())
    x = np.array([0.5, -2.0, 1.5])
    for y in (0.0, 1.0):
        g = models.per_example_grad(m, p, models.Example(x, y))
        np.testing.assert_allclose(g.segment("w"), (0.5 - y) * x, rtol=1e-12)
        np.testing.assert_allclose(g.segment("b"), [0.5 - y], rtol=1e-12)


def test_gradients_match_finite_differences(rng):
    # 100 random (model, params, example) triples across all three kinds.
    for _ in range(100):
        m = random_model(rng)
        p = models.init_params(m, prng.seed(int(rng.integers(0, 2**31))))
        ex = random_example(rng, m.input_dim, classification=True)
        g = models.per_example_grad(m, p, ex)
        fd = finite_difference_grad(m, p, ex)
        denom = np.maximum(np.abs(fd), 1e-8)
        assert np.max(np.abs(g.values - fd) / denom) < 1e-4


def test_dummy_example_zero_gradient():
    m = models.Model(kind="logistic", input_dim=3)
    p = models.init_params(m, prng.seed(0))
    dummy = models.Example(np.array([1.0, 2.0, 3.0]), 1.0, is_dummy=True)
    assert np.array_equal(models.per_example_grad(m, p, dummy).values, np.zeros(4))
    assert models.per_example_loss(m, p, dummy) == 0.0


def test_grad_layout_matches_params(rng):
    for _ in range(10):
        m = random_model(rng)
        p = models.init_params(m, prng.seed(7))
        ex = random_example(rng, m.input_dim, True)
        assert models.per_example_grad(m, p, ex).layout == p.layout


def test_dimension_mismatch_rejected():
    m = models.Model(kind="linear", input_dim=3)
    p = models.init_params(m, prng.seed(0))
    with pytest.raises(ValueError):
        models.per_example_loss(m, p, models.Example(np.zeros(4), 0.0))
    with pytest.raises(ValueError):
        models.per_example_grad(m, p, models.Example(np.zeros(2), 0.0))


def test_batch_grads_match_single(rng):
    m = models.Model(kind="mlp", input_dim=4, hidden_dim=3, loss="mse")
    p = models.init_params(m, prng.seed(11))
    exs = [random_example(rng, 4, False) for _ in range(6)]
    rows = models.batch_grads(
        m, p, np.stack([e.features for e in exs]), np.array([e.label for e in exs])
    )
    for ex, row in zip(exs, rows):
        assert np.array_equal(row, models.per_example_grad(m, p, ex).values)


def test_gradient_vector_arithmetic_layout_checked():
    a = models.GradientVector(np.ones(3), models.Layout((("x", 0, 3),)))
    b = models.GradientVector(np.ones(3), models.Layout((("y", 0, 3),)))
    with pytest.raises(ValueError):
        _ = a + b
    c = a + models.GradientVector(2 * np.ones(3), a.layout)
    assert np.array_equal(c.values, 3 * np.ones(3))
    assert a.scale(2.0).norm() == pytest.approx(2 * math.sqrt(3))


def test_vector_norms():
    v = np.array([3.0, -4.0])
    assert models.vector_norm(v, "l2") == pytest.approx(5.0)
    assert models.vector_norm(v, "l1") == pytest.approx(7.0)
    assert models.vector_norm(v, "linf") == pytest.approx(4.0)
    with pytest.raises(ValueError):
        models.vector_norm(v, "l0")
