"""Empirical privacy auditing: canaries, attack scores, epsilon lower bounds.

An audit crafts canary examples, includes each in training with an
independent fair coin, attacks the final model with a per-canary score, and
converts attack performance into a statistically sound lower bound on the
privacy leakage. A lower bound above the accountant's guarantee is
evidence of a bug -- the failure mode worth engineering against, since a
broken privacy mechanism typically trains beautifully.

Two bounds are computed per audit:

  * Clopper-Pearson: the attack's false-positive and false-negative rates
    are upper-bounded with exact one-sided binomial confidence intervals
    and plugged into the hypothesis-testing characterization of
    (epsilon, delta)-DP.
  * One-run: the attack guesses only on the most confident canaries; under
    epsilon-DP each guess is correct with probability at most
    e^eps / (1 + e^eps), so the correct-guess count has a binomial tail
    that can be inverted for epsilon. The delta correction is deliberately
    omitted (a delta = 0 bound): at delta <= 1e-5 and desk-scale canary
    counts it is negligible next to the Monte-Carlo width.

Canary inclusion uses a fair coin (probability 1/2), matching the one-run
bound's assumptions without an extra tracked parameter.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Optional, Sequence

import numpy as np
import scipy.stats

from . import accounting, prng, training
from .models import Dataset, Example, GradientVector, Model, batch_grads, batch_losses

LABEL_FLIP = "label-flip"
GRADIENT_DIRECTION = "gradient-direction"


@dataclasses.dataclass(frozen=True)
class CanarySet:
    """Crafted canary examples and their secret inclusion bits."""

    kind: str
    included: np.ndarray  # (m,) bool
    examples: list[Example]

    @property
    def m(self) -> int:
        return len(self.examples)


@dataclasses.dataclass(frozen=True)
class AuditConfig:
    """Audit parameters layered on top of a training config.

    one_run_guesses is the number of guesses per side (top-k scored canaries
    guessed "in", bottom-k guessed "out", the rest abstain).
    """

    num_canaries: int
    kind: str = LABEL_FLIP
    confidence: float = 0.95
    one_run_guesses: Optional[int] = None
    report_path: Optional[str] = None

    def __post_init__(self):
        if self.num_canaries < 1:
            raise ValueError("num_canaries must be at least 1")
        if self.kind not in (LABEL_FLIP, GRADIENT_DIRECTION):
            raise ValueError(f"unknown canary kind {self.kind!r}")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")


@dataclasses.dataclass(frozen=True)
class AuditReport:
    """Canary assignments, attack scores/decisions, and epsilon lower bounds."""

    included: np.ndarray  # (m,) bool, the secret inclusion bits
    scores: np.ndarray
    guesses: list[str]  # per canary: "in" | "out" | "abstain"
    epsilon_theory: float
    epsilon_cp: float
    epsilon_one_run: float
    confidence: float
    m: int
    r: int
    v: int
    passed: bool

    def to_json_dict(self) -> dict:
        return {
            "epsilon_theory": self.epsilon_theory,
            "epsilon_cp": self.epsilon_cp,
            "epsilon_one_run": self.epsilon_one_run,
            "confidence": self.confidence,
            "m": self.m,
            "r": self.r,
            "v": self.v,
            "pass": self.passed,
        }


def assign_canaries(
    m: int, kind: str, dataset: Dataset, key: prng.PrngKey
) -> CanarySet:
    """Crafts m canaries from a base dataset with fair-coin inclusion bits.

    Label-flip canaries are the last m examples of the dataset with their
    labels flipped; callers must hold that tail out of training (run_audit
    does). Gradient-direction canaries are synthetic unit-norm feature
    vectors in random directions with label 1, so each one's gradient at a
    near-zero init points (approximately) along a fixed random direction.

    Args:
      m: Number of canaries, at least 1.
      kind: "label-flip" or "gradient-direction".
      dataset: Source of held-out examples (label-flip) and of the feature
        dimension (gradient-direction).
      key: Dedicated key for inclusion bits and canary payloads.

    Returns:
      A CanarySet with i.i.d. fair-coin inclusion bits.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if kind not in (LABEL_FLIP, GRADIENT_DIRECTION):
        raise ValueError(f"unknown canary kind {kind!r}")
    bits_key, payload_key = prng.split(key, 2)
    included = prng.uniform(bits_key, m) < 0.5

    examples = []
    if kind == LABEL_FLIP:
        if m > dataset.size:
            raise ValueError(f"m={m} exceeds dataset size {dataset.size}")
        for i in range(dataset.size - m, dataset.size):
            src = dataset.example(i)
            flipped = 1.0 - src.label if dataset.task == "binary-classification" else -src.label
            examples.append(Example(src.features.copy(), flipped))
    else:
        d = dataset.feature_dim
        raw = prng.gaussian(payload_key, m * d, 1.0).reshape(m, d)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        label = 1.0
        for i in range(m):
            examples.append(Example(raw[i], label))
    return CanarySet(kind=kind, included=included, examples=examples)


def score_canaries(
    model: Model,
    final_params: GradientVector,
    canaries: CanarySet,
    init_params: Optional[GradientVector] = None,
) -> np.ndarray:
    """Attack scores; higher means "more likely included".

    Label-flip: negative loss of the canary under the final model (an
    included canary's flipped label was trained on, lowering its loss).
    Gradient-direction: inner product of the parameter displacement with the
    canary's descent direction at init (requires init_params).
    """
    features = np.stack([ex.features for ex in canaries.examples])
    labels = np.array([ex.label for ex in canaries.examples])
    if canaries.kind == LABEL_FLIP:
        return -batch_losses(model, final_params, features, labels)
    if init_params is None:
        raise ValueError("gradient-direction scoring requires init_params")
    grads = batch_grads(model, init_params, features, labels)
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    directions = -grads / norms
    displacement = final_params.values - init_params.values
    return directions @ displacement


def _clopper_pearson_upper(k: int, n: int, confidence: float) -> float:
    """Exact one-sided upper confidence bound on a binomial proportion."""
    if n < 1:
        raise ValueError("need at least one trial")
    if k >= n:
        return 1.0
    return float(scipy.stats.beta.ppf(confidence, k + 1, n - k))


def clopper_pearson_epsilon(
    decisions: Sequence[bool],
    truth: Sequence[bool],
    delta: float,
    confidence: float,
) -> float:
    """Epsilon lower bound from attack error rates with exact CP intervals.

    Upper-bounds the attack's FPR and FNR at the given one-sided confidence
    level and returns

        max(0, log((1 - delta - FNR)/FPR), log((1 - delta - FPR)/FNR)),

    with each branch dropped when its numerator is non-positive.

    Args:
      decisions: Per-canary membership guesses (True = "in").
      truth: Per-canary ground-truth inclusion bits.
      delta: The DP delta of the guarantee under test.
      confidence: Confidence level of the bound, in (0, 1).

    Raises:
      ValueError: degenerate truth vector (needs at least one included and
        one excluded canary).
    """
    decisions = np.asarray(decisions, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if decisions.shape != truth.shape:
        raise ValueError("decisions and truth must have equal length")
    if not (0.0 < confidence < 1.0):
        raise ValueError("confidence must be in (0, 1)")
    if not (0.0 <= delta < 1.0):
        raise ValueError("delta must be in [0, 1)")
    n_in = int(np.sum(truth))
    n_out = int(np.sum(~truth))
    if n_in == 0 or n_out == 0:
        raise ValueError("truth vector must contain both included and excluded canaries")
    false_pos = int(np.sum(decisions & ~truth))
    false_neg = int(np.sum(~decisions & truth))
    fpr_ub = _clopper_pearson_upper(false_pos, n_out, confidence)
    fnr_ub = _clopper_pearson_upper(false_neg, n_in, confidence)
    eps = 0.0
    if fpr_ub > 0.0 and (1.0 - delta - fnr_ub) > 0.0:
        eps = max(eps, math.log((1.0 - delta - fnr_ub) / fpr_ub))
    if fnr_ub > 0.0 and (1.0 - delta - fpr_ub) > 0.0:
        eps = max(eps, math.log((1.0 - delta - fpr_ub) / fnr_ub))
    return eps


def one_run_epsilon(r: int, v: int, m: int, confidence: float) -> float:
    """Epsilon lower bound from guess counts in a single training run.

    Under epsilon-DP with fair-coin inclusion, each of r guesses is correct
    with probability at most p = e^eps / (1 + e^eps), so observing v correct
    guesses rejects every epsilon whose binomial tail
    P[Binom(r, p(eps)) >= v] is at most 1 - confidence. Returns the largest
    rejected epsilon (bisection, tolerance 1e-4), or 0 when v <= r/2 or
    nothing is rejected. This is the delta = 0 form of the bound; m is the
    total canary count, recorded for reporting.

    Raises:
      ValueError: counts are inconsistent (need 0 <= v <= r <= m).
    """
    if not (0 <= v <= r <= m):
        raise ValueError(f"need 0 <= v <= r <= m, got v={v}, r={r}, m={m}")
    if not (0.0 < confidence < 1.0):
        raise ValueError("confidence must be in (0, 1)")
    if r == 0 or v * 2 <= r:
        return 0.0
    alpha = 1.0 - confidence

    def tail(eps: float) -> float:
        p = 1.0 / (1.0 + math.exp(-eps))
        return float(scipy.stats.binom.sf(v - 1, r, p))

    if tail(0.0) > alpha:
        return 0.0
    lo, hi = 0.0, 1.0
    while tail(hi) <= alpha:
        lo, hi = hi, hi * 2.0
        if hi > 1e6:
            return lo
    while hi - lo > 1e-4:
        mid = 0.5 * (lo + hi)
        if tail(mid) <= alpha:
            lo = mid
        else:
            hi = mid
    return lo


def run_audit(
    cfg: training.RunConfig, audit: AuditConfig
) -> AuditReport:
    """Trains with randomly included canaries and bounds the leakage.

    The base dataset's last num_canaries examples are held out as canary
    sources; training data is the remaining prefix plus the included
    canaries. Scores are thresholded at their median for the
    Clopper-Pearson bound and converted to top-k/bottom-k guesses with
    abstention for the one-run bound. Deterministic given cfg.seed.

    The report's pass flag compares the larger empirical bound against the
    accountant's guarantee for the trained mechanism (infinite when the
    noise multiplier is zero or the mechanism is non-private).
    """
    base = training.build_dataset(cfg)
    m = audit.num_canaries
    if audit.kind == LABEL_FLIP and m >= base.size:
        raise ValueError("num_canaries must be smaller than the dataset")
    root = prng.seed(cfg.seed)
    canaries = assign_canaries(m, audit.kind, base, prng.fold_in(root, 4))

    if audit.kind == LABEL_FLIP:
        keep = base.size - m
    else:
        keep = base.size
    included_examples = [
        ex for ex, bit in zip(canaries.examples, canaries.included) if bit
    ]
    features = [base.features[:keep]]
    labels = [base.labels[:keep]]
    if included_examples:
        features.append(np.stack([ex.features for ex in included_examples]))
        labels.append(np.array([ex.label for ex in included_examples]))
    train_dataset = Dataset(
        np.concatenate(features), np.concatenate(labels), base.task
    )

    outcome = training.run_training(cfg, train_dataset)
    model = cfg.model.build()
    scores = score_canaries(
        model, outcome.final_params, canaries, init_params=outcome.initial_params
    )

    delta = cfg.privacy.delta if cfg.privacy is not None else 1e-5
    eps_theory = outcome.report["achieved_epsilon"]
    if eps_theory is None:
        eps_theory = math.inf

    decisions = scores > np.median(scores)
    eps_cp = clopper_pearson_epsilon(
        decisions, canaries.included, delta, audit.confidence
    )

    k = audit.one_run_guesses if audit.one_run_guesses is not None else max(1, m // 10)
    k = min(k, m // 2)
    order = np.argsort(-scores, kind="stable")
    guesses = ["abstain"] * m
    correct = 0
    for idx in order[:k]:
        guesses[idx] = "in"
        correct += bool(canaries.included[idx])
    for idx in order[m - k :]:
        guesses[idx] = "out"
        correct += not canaries.included[idx]
    r = 2 * k
    eps_one_run = one_run_epsilon(r, correct, m, audit.confidence)

    passed = max(eps_cp, eps_one_run) <= eps_theory
    report = AuditReport(
        included=canaries.included,
        scores=scores,
        guesses=guesses,
        epsilon_theory=float(eps_theory),
        epsilon_cp=float(eps_cp),
        epsilon_one_run=float(eps_one_run),
        confidence=audit.confidence,
        m=m,
        r=r,
        v=int(correct),
        passed=bool(passed),
    )
    if audit.report_path:
        with open(audit.report_path, "w") as fh:
            json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
