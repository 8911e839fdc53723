import numpy as np
import pytest

from dpcore import clipping, matrix_factorization as mf, models, privatizer as pz, prng


def test_prefix_workload_small():
    assert np.array_equal(mf.prefix_workload(1).matrix, [[1.0]])
    np.testing.assert_array_equal(
        mf.prefix_workload(3).matrix, [[1, 0, 0], [1, 1, 0], [1, 1, 1]]
    )


@pytest.mark.parametrize("n", [1, 4, 17])
def test_prefix_workload_frobenius(n):
    a = mf.prefix_workload(n).matrix
    assert np.sum(a * a) == n * (n + 1) / 2


def test_sensitivity_identity():
    assert mf.sensitivity(mf.IDENTITY, 5) == 1.0


def test_sensitivity_two_band():
    s = mf.Strategy((1.0, -0.5))
    assert mf.sensitivity(s, 2) == pytest.approx(np.sqrt(1.25), rel=1e-15)


def test_sensitivity_matches_dense_materialization(rng):
    for _ in range(10):
        bands = int(rng.integers(1, 7))
        coefs = tuple([1.0] + list(rng.uniform(-1.0, 1.0, size=bands - 1)))
        s = mf.Strategy(coefs)
        n = 12
        dense = mf.materialize(s, n)
        brute = max(np.linalg.norm(dense[:, j]) for j in range(n))
        assert abs(mf.sensitivity(s, n) - brute) < 1e-12


def test_sensitivity_n_below_bands_rejected():
    with pytest.raises(ValueError):
        mf.sensitivity(mf.Strategy((1.0, 0.5, 0.2)), 2)


def test_expected_error_identity_prefix():
    assert mf.expected_error(mf.prefix_workload(4), mf.IDENTITY) == pytest.approx(10.0)


def test_expected_error_n_one():
    assert mf.expected_error(mf.prefix_workload(1), mf.IDENTITY) == pytest.approx(1.0)


def test_expected_error_matches_dense_inverse():
    n = 32
    s = mf.Strategy((1.0, -0.25))
    w = mf.prefix_workload(n)
    c = mf.materialize(s, n)
    b = w.matrix @ np.linalg.inv(c)
    expected = np.sum(b * b) * mf.sensitivity(s, n) ** 2
    assert abs(mf.expected_error(w, s) - expected) < 1e-9


def test_optimize_beats_identity_prefix32():
    w = mf.prefix_workload(32)
    identity_error = mf.expected_error(w, mf.IDENTITY)
    assert identity_error == pytest.approx(32 * 33 / 2)
    s = mf.optimize_banded(w, 2, iters=200)
    assert mf.expected_error(w, s) < identity_error


def test_optimize_band_one_returns_identity():
    w = mf.prefix_workload(8)
    s = mf.optimize_banded(w, 1, iters=10)
    assert s == mf.IDENTITY
    assert mf.expected_error(w, s) == pytest.approx(np.sum(w.matrix**2))


def test_optimize_best_objective_monotone():
    history = []
    mf.optimize_banded(
        mf.prefix_workload(16), 3, iters=50,
        callback=lambda it, val, best: history.append(best),
    )
    assert all(b2 <= b1 for b1, b2 in zip(history, history[1:]))


def test_optimize_never_worse_than_identity(rng):
    w = mf.prefix_workload(12)
    identity_error = mf.expected_error(w, mf.IDENTITY)
    for bands in (2, 3, 5):
        s = mf.optimize_banded(w, bands, iters=30)
        assert mf.expected_error(w, s) <= identity_error


def test_optimize_divergence_detected():
    with pytest.raises(mf.OptimizationDivergedError):
        mf.optimize_banded(mf.prefix_workload(32), 2, iters=50, step_size=1e6)


def test_strategy_normalization_enforced():
    with pytest.raises(ValueError):
        mf.Strategy((0.5, 0.1))
    with pytest.raises(ValueError):
        mf.Strategy(())


def test_serialization_round_trip_exact():
    # Coefficients with no short decimal representation must survive exactly.
    s = mf.Strategy((1.0, 0.1 + 0.2, -1.0 / 3.0, 2.0**-45))
    text = mf.strategy_to_text(s, 64)
    back, n = mf.strategy_from_text(text)
    assert n == 64
    assert back.coefficients == s.coefficients


def test_serialization_rejects_malformed():
    with pytest.raises(ValueError):
        mf.strategy_from_text("n=4\nbands=2\ncoefficients=1.0")
    with pytest.raises(ValueError):
        mf.strategy_from_text("nope")


def test_optimized_strategy_prefix_sum_variance():
    # End-to-end: streaming privatizer noise, accumulated into prefix sums,
    # must show total variance matching expected_error. Each coordinate of a
    # wide vector is an independent scalar trial.
    n, trials = 16, 10**4
    w = mf.prefix_workload(n)
    s = mf.optimize_banded(w, 3, iters=80)
    stddev = mf.sensitivity(s, n)  # noise multiplier 1, clip norm 1
    p = pz.Privatizer(kind="banded", noise_stddev=stddev, sensitivity=1.0,
                      coefficients=s.coefficients)
    layout = models.Layout((("x", 0, trials),))
    st = pz.init(p, layout, prng.seed(123))
    zero = clipping.ClippedGradientSum(models.GradientVector.zeros(layout), 1.0, 0, 0)
    prefix = np.zeros(trials)
    total_sq = np.zeros(trials)
    for _ in range(n):
        out, st = pz.privatize(p, zero, st)
        prefix += out.values
        total_sq += prefix**2
    empirical = float(np.mean(total_sq))
    assert empirical == pytest.approx(mf.expected_error(w, s), rel=0.05)
