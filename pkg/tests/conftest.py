import numpy as np
import pytest

from dpcore import models, prng


@pytest.fixture
def rng():
    return np.random.default_rng(0xD5EED)


def random_model(rng) -> models.Model:
    kind = rng.choice(["linear", "logistic", "mlp"])
    d = int(rng.integers(2, 8))
    if kind == "mlp":
        return models.Model(
            kind="mlp",
            input_dim=d,
            hidden_dim=int(rng.integers(2, 7)),
            activation=str(rng.choice(["relu", "tanh"])),
            loss=str(rng.choice(["log", "mse"])),
        )
    return models.Model(kind=str(kind), input_dim=d)


def random_example(rng, d: int, classification: bool) -> models.Example:
    x = rng.standard_normal(d)
    y = float(rng.integers(0, 2)) if classification else float(rng.standard_normal())
    return models.Example(x, y)


def random_batch(rng, d: int, size: int, classification: bool = True):
    return [random_example(rng, d, classification) for _ in range(size)]


def finite_difference_grad(model, params, ex, step=1e-5) -> np.ndarray:
    """Central-difference gradient oracle, independent of the backprop path."""
    grad = np.zeros_like(params.values)
    for i in range(params.values.size):
        up = params.values.copy()
        dn = params.values.copy()
        up[i] += step
        dn[i] -= step
        lu = models.per_example_loss(model, models.GradientVector(up, params.layout), ex)
        ld = models.per_example_loss(model, models.GradientVector(dn, params.layout), ex)
        grad[i] = (lu - ld) / (2.0 * step)
    return grad


def fresh_params(model, seed=0):
    return models.init_params(model, prng.seed(seed))
