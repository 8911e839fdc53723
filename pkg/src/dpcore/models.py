"""Reference differentiable models with exact per-example gradients.

Three desk-scale models (linear regression, logistic regression, and a
one-hidden-layer MLP) implemented with explicit backprop in numpy. They are
the substrate the clipping machinery operates on; everything downstream is
model-agnostic.

All parameters and gradients travel as :class:`GradientVector`, a flat
float64 array with a named segment layout, so optimizer and noise code never
needs to know the model structure.

Per-example gradient math deliberately avoids BLAS-backed reductions
(``np.einsum`` with its default fixed-order C loops) so that a given
example's gradient is bit-identical regardless of how the batch is sliced
into microbatches.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from . import prng

_EINSUM_OPTS = dict(optimize=False)


@dataclasses.dataclass(frozen=True)
class Layout:
    """Named segmentation of a flat parameter/gradient vector."""

    segments: tuple[tuple[str, int, int], ...]

    @property
    def total_length(self) -> int:
        return sum(length for _, _, length in self.segments)

    def slice_of(self, name: str) -> slice:
        for seg_name, offset, length in self.segments:
            if seg_name == name:
                return slice(offset, offset + length)
        raise KeyError(f"no segment named {name!r}")


def _make_layout(sizes: list[tuple[str, int]]) -> Layout:
    segments = []
    offset = 0
    for name, length in sizes:
        segments.append((name, offset, length))
        offset += length
    return Layout(tuple(segments))


@dataclasses.dataclass(frozen=True)
class GradientVector:
    """A flat float64 vector with a named segment layout.

    Used for parameters, gradients, optimizer moments, and noise. Arithmetic
    is only defined between vectors with identical layouts. Treat instances
    as immutable; operations return new vectors.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if self.values.shape[0] != self.layout.total_length:
            raise ValueError(
                f"values length {self.values.shape[0]} does not match layout "
                f"length {self.layout.total_length}"
            )

    def _check_layout(self, other: "GradientVector") -> None:
        if self.layout != other.layout:
            raise ValueError("gradient vectors have different layouts")

    def __add__(self, other: "GradientVector") -> "GradientVector":
        self._check_layout(other)
        return GradientVector(self.values + other.values, self.layout)

    def __sub__(self, other: "GradientVector") -> "GradientVector":
        self._check_layout(other)
        return GradientVector(self.values - other.values, self.layout)

    def scale(self, factor: float) -> "GradientVector":
        return GradientVector(self.values * factor, self.layout)

    def norm(self, geometry: str = "l2") -> float:
        return float(vector_norm(self.values, geometry))

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice_of(name)]

    @classmethod
    def zeros(cls, layout: Layout) -> "GradientVector":
        return cls(np.zeros(layout.total_length, dtype=np.float64), layout)


def vector_norm(values: np.ndarray, geometry: str) -> float:
    if geometry == "l2":
        return float(np.sqrt(np.einsum("i,i->", values, values, **_EINSUM_OPTS)))
    if geometry == "l1":
        return float(np.sum(np.abs(values)))
    if geometry == "linf":
        return float(np.max(np.abs(values))) if values.size else 0.0
    raise ValueError(f"unknown geometry {geometry!r}")


@dataclasses.dataclass(frozen=True)
class Example:
    """One training example.

    Dummy examples (batch padding) contribute exactly zero to any gradient
    sum and are never counted as contributing.
    """

    features: np.ndarray
    label: float
    group_key: Optional[int] = None
    is_dummy: bool = False


@dataclasses.dataclass(frozen=True)
class Dataset:
    """An in-memory dataset of examples sharing one feature dimension."""

    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    task: str  # "regression" | "binary-classification"
    group_keys: Optional[np.ndarray] = None  # (n,) int, optional

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be (n, d)")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels length must match features")
        if self.task not in ("regression", "binary-classification"):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def example(self, i: int) -> Example:
        group = None if self.group_keys is None else int(self.group_keys[i])
        return Example(self.features[i], float(self.labels[i]), group_key=group)


LINEAR = "linear"
LOGISTIC = "logistic"
MLP = "mlp"


@dataclasses.dataclass(frozen=True)
class Model:
    """Model architecture descriptor.

    kinds:
      linear:   w.x + b with squared-error loss 0.5*(z - y)^2
      logistic: sigmoid(w.x + b) with log loss
      mlp:      one hidden layer (relu or tanh), log or mse loss
    """

    kind: str
    input_dim: int
    hidden_dim: int = 0
    activation: str = "relu"  # mlp only
    loss: str = "log"  # mlp only: "log" | "mse"

    def __post_init__(self):
        if self.kind not in (LINEAR, LOGISTIC, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be at least 1")
        if self.kind == MLP:
            if self.hidden_dim < 1:
                raise ValueError("mlp hidden_dim must be at least 1")
            if self.activation not in ("relu", "tanh"):
                raise ValueError(f"unknown activation {self.activation!r}")
            if self.loss not in ("log", "mse"):
                raise ValueError(f"unknown loss {self.loss!r}")

    def layout(self) -> Layout:
        d, h = self.input_dim, self.hidden_dim
        if self.kind in (LINEAR, LOGISTIC):
            return _make_layout([("w", d), ("b", 1)])
        return _make_layout([("w1", d * h), ("b1", h), ("w2", h), ("b2", 1)])

    def param_count(self) -> int:
        return self.layout().total_length


def init_params(model: Model, key: prng.PrngKey) -> GradientVector:
    """Deterministic init: weights N(0, 1/fan_in), biases exactly zero."""
    layout = model.layout()
    values = np.zeros(layout.total_length, dtype=np.float64)
    d, h = model.input_dim, model.hidden_dim
    if model.kind in (LINEAR, LOGISTIC):
        weight_segs = [("w", d)]
    else:
        weight_segs = [("w1", d), ("w2", h)]
    keys = prng.split(key, len(weight_segs))
    for (name, fan_in), k in zip(weight_segs, keys):
        sl = layout.slice_of(name)
        length = sl.stop - sl.start
        values[sl] = prng.gaussian(k, length, 1.0 / np.sqrt(fan_in))
    return GradientVector(values, layout)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # expit, written out to keep the dependency surface of this module tiny.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_loss(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # -[y log p + (1-y) log(1-p)] with p = sigmoid(z), in the stable form
    # softplus(z) - y*z.
    return np.logaddexp(0.0, z) - y * z


def _check_example(model: Model, ex: Example) -> None:
    if ex.features.shape != (model.input_dim,):
        raise ValueError(
            f"feature dimension {ex.features.shape} does not match model "
            f"input_dim {model.input_dim}"
        )


def per_example_loss(model: Model, params: GradientVector, ex: Example) -> float:
    """Loss of one example; dummy examples have loss 0 by definition."""
    _check_example(model, ex)
    if ex.is_dummy:
        return 0.0
    x = ex.features[np.newaxis, :]
    y = np.array([ex.label])
    return float(batch_losses(model, params, x, y)[0])


def per_example_grad(model: Model, params: GradientVector, ex: Example) -> GradientVector:
    """Exact analytic gradient of per_example_loss w.r.t. params."""
    _check_example(model, ex)
    if ex.is_dummy:
        return GradientVector.zeros(params.layout)
    x = ex.features[np.newaxis, :]
    y = np.array([ex.label])
    return GradientVector(batch_grads(model, params, x, y)[0], params.layout)


def batch_losses(
    model: Model, params: GradientVector, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Per-example losses for a (B, d) feature matrix. Vectorized.

    Non-finite features flow through as non-finite losses without warnings;
    rejecting or zeroing them is the caller's policy (see clipping).
    """
    if features.shape[1] != model.input_dim:
        raise ValueError("feature dimension mismatch")
    with np.errstate(invalid="ignore", over="ignore"):
        return _batch_losses_impl(model, params, features, labels)


def _batch_losses_impl(model, params, features, labels):
    if model.kind == LINEAR:
        z = np.einsum("bd,d->b", features, params.segment("w"), **_EINSUM_OPTS)
        z = z + params.segment("b")[0]
        return 0.5 * (z - labels) ** 2
    if model.kind == LOGISTIC:
        z = np.einsum("bd,d->b", features, params.segment("w"), **_EINSUM_OPTS)
        z = z + params.segment("b")[0]
        return _log_loss(z, labels)
    # mlp
    z, _, _ = _mlp_forward(model, params, features)
    if model.loss == "log":
        return _log_loss(z, labels)
    return 0.5 * (z - labels) ** 2


def _mlp_forward(model: Model, params: GradientVector, features: np.ndarray):
    d, h = model.input_dim, model.hidden_dim
    w1 = params.segment("w1").reshape(d, h)
    pre = np.einsum("bd,dh->bh", features, w1, **_EINSUM_OPTS) + params.segment("b1")
    if model.activation == "relu":
        act = np.maximum(pre, 0.0)
    else:
        act = np.tanh(pre)
    z = np.einsum("bh,h->b", act, params.segment("w2"), **_EINSUM_OPTS)
    z = z + params.segment("b2")[0]
    return z, pre, act


def batch_grads(
    model: Model, params: GradientVector, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Per-example gradients, one row per example, shape (B, P).

    The returned rows are a pure per-example function of (params, example):
    slicing the batch differently yields bit-identical rows.
    """
    if features.shape[1] != model.input_dim:
        raise ValueError("feature dimension mismatch")
    with np.errstate(invalid="ignore", over="ignore"):
        return _batch_grads_impl(model, params, features, labels)


def _batch_grads_impl(model, params, features, labels):
    n = features.shape[0]
    if model.kind in (LINEAR, LOGISTIC):
        z = np.einsum("bd,d->b", features, params.segment("w"), **_EINSUM_OPTS)
        z = z + params.segment("b")[0]
        if model.kind == LINEAR:
            dz = z - labels
        else:
            dz = _sigmoid(z) - labels
        grads = np.empty((n, params.layout.total_length), dtype=np.float64)
        grads[:, params.layout.slice_of("w")] = dz[:, np.newaxis] * features
        grads[:, params.layout.slice_of("b")] = dz[:, np.newaxis]
        return grads
    # mlp backprop
    d, h = model.input_dim, model.hidden_dim
    z, pre, act = _mlp_forward(model, params, features)
    if model.loss == "log":
        dz = _sigmoid(z) - labels
    else:
        dz = z - labels
    w2 = params.segment("w2")
    d_act = dz[:, np.newaxis] * w2[np.newaxis, :]
    if model.activation == "relu":
        d_pre = d_act * (pre > 0.0)
    else:
        d_pre = d_act * (1.0 - np.tanh(pre) ** 2)
    grads = np.empty((n, params.layout.total_length), dtype=np.float64)
    gw1 = np.einsum("bd,bh->bdh", features, d_pre, **_EINSUM_OPTS)
    grads[:, params.layout.slice_of("w1")] = gw1.reshape(n, d * h)
    grads[:, params.layout.slice_of("b1")] = d_pre
    grads[:, params.layout.slice_of("w2")] = dz[:, np.newaxis] * act
    grads[:, params.layout.slice_of("b2")] = dz[:, np.newaxis]
    return grads


def dataset_mean_loss(model: Model, params: GradientVector, dataset: Dataset) -> float:
    """Mean per-example loss over a dataset, ignoring non-finite entries."""
    losses = batch_losses(model, params, dataset.features, dataset.labels)
    finite = losses[np.isfinite(losses)]
    if finite.size == 0:
        return float("nan")
    return float(np.mean(finite))
