"""Construction, evaluation, and optimization of banded noise strategies.

A strategy is a unit-diagonal banded lower-triangular Toeplitz matrix C
given by its coefficients c_0 = 1, c_1, ..., c_{b-1}. Correlated noise
C^{-1} Z replaces i.i.d. noise Z; the total squared error of the mechanism
on a workload A is ||A C^{-1}||_F^2 times the squared sensitivity of C (its
maximum column norm). Banded strategies stream with O(b) memory in the
privatizer.

The optimizer is plain gradient descent on c_1..c_{b-1} with central
finite-difference gradients. At the sizes this package targets (n <= 256,
b <= 16) the O(b n^2) cost per step is negligible and finite differences
remove a whole class of derivation bugs; best-iterate bookkeeping makes the
result never worse than the identity strategy.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import numpy as np
import scipy.linalg


class OptimizationDivergedError(RuntimeError):
    """The search objective became non-finite."""


@dataclasses.dataclass(frozen=True)
class Workload:
    """A lower-triangular linear query workload over n steps."""

    n: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != (self.n, self.n):
            raise ValueError("workload matrix must be n x n")
        if not np.allclose(self.matrix, np.tril(self.matrix)):
            raise ValueError("workload matrix must be lower-triangular")


@dataclasses.dataclass(frozen=True)
class Strategy:
    """Coefficients of a unit-diagonal banded lower-triangular Toeplitz C."""

    coefficients: tuple[float, ...]

    def __post_init__(self):
        if len(self.coefficients) < 1:
            raise ValueError("strategy needs at least one coefficient")
        if self.coefficients[0] != 1.0:
            raise ValueError("strategies are normalized to c_0 = 1")

    @property
    def bands(self) -> int:
        return len(self.coefficients)


IDENTITY = Strategy((1.0,))


def prefix_workload(n: int) -> Workload:
    """The running-sum workload: A[i, j] = 1 for j <= i."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    return Workload(n, np.tril(np.ones((n, n))))


def materialize(s: Strategy, n: int) -> np.ndarray:
    """The n x n matrix of a strategy (first column c, shifted down each column)."""
    if n < s.bands:
        raise ValueError(f"n={n} is smaller than the strategy band count {s.bands}")
    col = np.zeros(n)
    col[: s.bands] = s.coefficients
    return scipy.linalg.toeplitz(col, np.zeros(n))


def sensitivity(s: Strategy, n: int) -> float:
    """Maximum column L2 norm of the materialized strategy.

    For banded Toeplitz matrices with n >= bands every full column has the
    same norm, so this is simply the L2 norm of the coefficient vector.
    """
    if n < s.bands:
        raise ValueError(f"n={n} is smaller than the strategy band count {s.bands}")
    return float(np.linalg.norm(np.asarray(s.coefficients)))


def expected_error(w: Workload, s: Strategy) -> float:
    """Total squared error ||A C^{-1}||_F^2 * sensitivity(C)^2.

    Wild coefficients can overflow to inf; that is reported as an infinite
    error (the optimizer treats it as divergence), not a warning.
    """
    c = materialize(s, w.n)
    with np.errstate(over="ignore", invalid="ignore"):
        c_inv = scipy.linalg.solve_triangular(c, np.eye(w.n), lower=True)
        b = w.matrix @ c_inv
        return float(np.sum(b * b)) * sensitivity(s, w.n) ** 2


def optimize_banded(
    w: Workload,
    bands: int,
    iters: int = 200,
    step_size: float = 1e-4,
    callback: Optional[Callable[[int, float, float], None]] = None,
) -> Strategy:
    """Gradient descent over band coefficients, c_0 pinned to 1.

    Gradients are central finite differences (step 1e-6). Starts at the
    identity strategy and returns the best iterate seen, so the result is
    never worse than identity.

    Args:
      w: The workload to minimize expected_error against.
      bands: Number of bands; 1 returns the identity strategy.
      iters: Gradient steps.
      step_size: Fixed descent step.
      callback: Optional hook called as callback(iteration, objective,
        best_objective) after each step.

    Returns:
      The best strategy found.

    Raises:
      OptimizationDivergedError: The objective became non-finite; reduce
        step_size.
    """
    if bands < 1:
        raise ValueError("bands must be at least 1")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if bands == 1:
        return IDENTITY
    if w.n < bands:
        raise ValueError(f"workload horizon {w.n} is smaller than bands {bands}")

    fd_step = 1e-6

    def objective(tail: np.ndarray) -> float:
        return expected_error(w, Strategy((1.0, *tail)))

    tail = np.zeros(bands - 1)
    best_tail = tail.copy()
    best_val = objective(tail)
    for it in range(iters):
        grad = np.zeros_like(tail)
        for i in range(tail.size):
            bump = np.zeros_like(tail)
            bump[i] = fd_step
            grad[i] = (objective(tail + bump) - objective(tail - bump)) / (2 * fd_step)
        tail = tail - step_size * grad
        val = objective(tail)
        if not np.isfinite(val):
            raise OptimizationDivergedError(
                f"objective became non-finite at iteration {it} "
                f"(coefficients {tuple(tail)}); reduce step_size"
            )
        if val < best_val:
            best_val = val
            best_tail = tail.copy()
        if callback is not None:
            callback(it, val, best_val)
    return Strategy((1.0, *best_tail))


def strategy_to_text(s: Strategy, n: int) -> str:
    """Serializes a strategy and its horizon to a plain text record.

    Coefficients use shortest round-trip decimal formatting, so parsing the
    record recovers them exactly.
    """
    coef = ",".join(repr(float(c)) for c in s.coefficients)
    return f"n={n}\nbands={s.bands}\ncoefficients={coef}\n"


def strategy_from_text(text: str) -> tuple[Strategy, int]:
    """Parses the record produced by :func:`strategy_to_text`."""
    fields = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        n = int(fields["n"])
        bands = int(fields["bands"])
        coefficients = tuple(float(tok) for tok in fields["coefficients"].split(","))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed strategy record: {exc}") from exc
    if len(coefficients) != bands:
        raise ValueError(
            f"record declares {bands} bands but has {len(coefficients)} coefficients"
        )
    return Strategy(coefficients), n
