"""dpcore: a self-contained toolkit for differentially private training.

Components: splittable PRNG keys, reference differentiable models with exact
per-example gradients, per-example/per-group gradient clipping with attached
sensitivity, index-only batch selection, i.i.d. and correlated (banded) noise
addition, Renyi-DP accounting and noise calibration, and empirical privacy
auditing, wired together by a config-driven trainer and benchmark CLI.
"""

__version__ = "0.1.0"
