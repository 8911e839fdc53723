"""Config-driven training engine and throughput benchmark.

One training step is the fixed composition

    batch indices -> clipped gradient sum -> privatize -> normalize by the
    expected batch size -> optimizer update -> apply,

with the non-private baseline (mechanism "none") replacing the first three
stages by a plain per-example gradient sum. Everything stochastic flows
from the run seed through explicit PRNG keys, so a report is a pure
function of its config (timing fields aside).

Config and policy validation happens before the first step: a configuration
whose accounting would be invalid (for example amplified accounting on
shuffled batches, or correlated noise under a plan that allows repeated
participation) never starts training.

The benchmark harness measures throughput as total examples processed
divided by total wall time, after warmup, sweeping batch sizes in powers of
two and reporting the maximum per mechanism plus the private/non-private
ratio.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from typing import Optional

import numpy as np

from . import accounting, batch_selection, matrix_factorization, prng
from .clipping import ClipConfig, clipped_grad_sum
from .models import (
    Dataset,
    GradientVector,
    Model,
    batch_grads,
    dataset_mean_loss,
    init_params,
)
from .optimizers import ADAMW_DEFAULTS, adamw_init, adamw_update, sgd_update
from .privatizer import BANDED, GAUSSIAN, Privatizer
from .privatizer import init as privatizer_init
from .privatizer import privatize

MECHANISMS = ("none", "dpsgd", "banded-mf")


class ConfigError(ValueError):
    """Invalid or conflicting run configuration (CLI exit code 2)."""


class PolicyError(ConfigError):
    """Configuration whose privacy accounting would be invalid."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    kind: str
    input_dim: int
    hidden_dim: int = 0
    activation: str = "relu"
    loss: str = "log"

    def build(self) -> Model:
        return Model(
            kind=self.kind,
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            activation=self.activation,
            loss=self.loss,
        )


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    source: str  # "synthetic" | "csv"
    n: int = 0
    d: int = 0
    task: str = "binary-classification"
    seed: int = 0
    num_groups: Optional[int] = None
    path: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class PrivacyConfig:
    delta: float
    target_epsilon: Optional[float] = None
    noise_multiplier: Optional[float] = None


@dataclasses.dataclass(frozen=True)
class BatchConfig:
    strategy: str
    sampling_prob: Optional[float] = None
    batch_size: Optional[int] = None
    max_batch_size: Optional[int] = None

    def plan(self, n: int, iterations: int, key: prng.PrngKey) -> batch_selection.BatchPlan:
        return batch_selection.BatchPlan(
            strategy=self.strategy,
            n=n,
            iterations=iterations,
            key=key,
            sampling_prob=self.sampling_prob,
            batch_size=self.batch_size,
            max_batch_size=self.max_batch_size,
        )


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" | "adamw"
    learning_rate: float = 0.1
    beta1: float = ADAMW_DEFAULTS["beta1"]
    beta2: float = ADAMW_DEFAULTS["beta2"]
    eps: float = ADAMW_DEFAULTS["eps"]
    weight_decay: float = ADAMW_DEFAULTS["weight_decay"]


@dataclasses.dataclass(frozen=True)
class MfConfig:
    bands: int = 4
    opt_iters: int = 200
    opt_step_size: float = 1e-4


@dataclasses.dataclass(frozen=True)
class BenchmarkConfig:
    warmup_steps: int = 5
    measured_steps: int = 50
    batch_sizes: Optional[tuple[int, ...]] = None  # default: powers of two


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Full description of one run; every report echoes it with defaults filled."""

    model: ModelConfig
    dataset: DatasetConfig
    mechanism: str
    steps: int
    seed: int = 0
    privacy: Optional[PrivacyConfig] = None
    clip: Optional[ClipConfig] = None
    batch: BatchConfig = dataclasses.field(
        default_factory=lambda: BatchConfig(strategy="poisson", sampling_prob=0.01)
    )
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    mf: MfConfig = dataclasses.field(default_factory=MfConfig)
    benchmark: BenchmarkConfig = dataclasses.field(default_factory=BenchmarkConfig)
    eval_every: Optional[int] = None
    report_path: Optional[str] = None


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def config_from_dict(raw: dict) -> RunConfig:
    """Parses a JSON config dict into a validated RunConfig."""
    try:
        model = ModelConfig(**raw["model"])
        dataset = DatasetConfig(**raw["dataset"])
        mechanism = raw.get("mechanism", "none")
        privacy = PrivacyConfig(**raw["privacy"]) if "privacy" in raw else None
        clip = ClipConfig(**raw["clip"]) if "clip" in raw else None
        batch = BatchConfig(**raw["batch"]) if "batch" in raw else BatchConfig(
            strategy="poisson", sampling_prob=0.01
        )
        optimizer = (
            OptimizerConfig(**raw["optimizer"]) if "optimizer" in raw else OptimizerConfig()
        )
        mf = MfConfig(**raw["mf"]) if "mf" in raw else MfConfig()
        bench_raw = dict(raw.get("benchmark", {}))
        if bench_raw.get("batch_sizes") is not None:
            bench_raw["batch_sizes"] = tuple(bench_raw["batch_sizes"])
        benchmark_cfg = BenchmarkConfig(**bench_raw)
        cfg = RunConfig(
            model=model,
            dataset=dataset,
            mechanism=mechanism,
            steps=raw["steps"],
            seed=raw.get("seed", 0),
            privacy=privacy,
            clip=clip,
            batch=batch,
            optimizer=optimizer,
            mf=mf,
            benchmark=benchmark_cfg,
            eval_every=raw.get("eval_every"),
            report_path=raw.get("report_path"),
        )
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Fail-fast validation; no invalid configuration reaches step 1."""
    _require(cfg.mechanism in MECHANISMS, f"unknown mechanism {cfg.mechanism!r}")
    _require(cfg.steps >= 1, "steps must be at least 1")
    _require(cfg.optimizer.kind in ("sgd", "adamw"), "optimizer kind must be sgd or adamw")
    _require(
        cfg.dataset.source in ("synthetic", "csv"),
        "dataset source must be synthetic or csv",
    )
    if cfg.dataset.source == "csv":
        _require(cfg.dataset.path is not None, "csv dataset requires a path")

    strategy = cfg.batch.strategy
    _require(
        strategy in (batch_selection.POISSON, batch_selection.CYCLIC_POISSON,
                     batch_selection.SHUFFLED_FIXED, batch_selection.TRUNCATED_POISSON),
        f"unknown batch strategy {strategy!r}",
    )
    if strategy != batch_selection.SHUFFLED_FIXED:
        q = cfg.batch.sampling_prob
        _require(q is not None and 0.0 <= q <= 1.0,
                 f"{strategy} requires sampling_prob in [0, 1]")
    else:
        _require(cfg.batch.batch_size is not None and cfg.batch.batch_size >= 1,
                 "shuffled-fixed requires batch_size >= 1")
    if strategy == batch_selection.TRUNCATED_POISSON:
        _require(cfg.batch.max_batch_size is not None and cfg.batch.max_batch_size >= 0,
                 "truncated-poisson requires max_batch_size >= 0")

    if cfg.mechanism == "none":
        _require(
            cfg.privacy is None,
            "mechanism 'none' is the non-private baseline; remove privacy fields",
        )
        return

    _require(cfg.privacy is not None, f"mechanism {cfg.mechanism!r} requires privacy fields")
    _require(cfg.clip is not None, f"mechanism {cfg.mechanism!r} requires a clip config")
    has_target = cfg.privacy.target_epsilon is not None
    has_sigma = cfg.privacy.noise_multiplier is not None
    _require(
        has_target != has_sigma,
        "specify exactly one of privacy.target_epsilon and privacy.noise_multiplier",
    )
    if has_target:
        _require(cfg.privacy.target_epsilon > 0, "target_epsilon must be positive")
    if has_sigma:
        _require(cfg.privacy.noise_multiplier >= 0, "noise_multiplier must be non-negative")
    _require(0.0 < cfg.privacy.delta < 1.0, "delta must be in (0, 1)")

    amplification_ok = cfg.batch.strategy != batch_selection.SHUFFLED_FIXED
    if not amplification_ok:
        raise PolicyError(
            "shuffled fixed-size batches invalidate subsampling-amplified "
            "accounting; use a Poisson-family batch strategy for private "
            "mechanisms"
        )
    if cfg.mechanism == "banded-mf":
        _require(cfg.mf.bands >= 1, "mf.bands must be at least 1")
        if cfg.batch.strategy != batch_selection.CYCLIC_POISSON:
            raise PolicyError(
                "banded-mf accounting assumes single participation; use the "
                "cyclic-poisson batch strategy"
            )
        q = cfg.batch.sampling_prob
        epoch_len = math.ceil(1.0 / q) if q > 0 else 1
        if cfg.steps > epoch_len:
            raise PolicyError(
                f"banded-mf accounting assumes single participation, which "
                f"bounds steps by one epoch ({epoch_len} at q={q}); "
                f"got steps={cfg.steps}"
            )


def config_to_dict(cfg: RunConfig) -> dict:
    """Materializes the config, defaults included, for the report echo."""

    def scrub(obj):
        if dataclasses.is_dataclass(obj):
            return {k: scrub(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, tuple):
            return [scrub(v) for v in obj]
        return obj

    return scrub(cfg)


def synthesize_dataset(
    n: int,
    d: int,
    task: str,
    key: prng.PrngKey,
    num_groups: Optional[int] = None,
) -> Dataset:
    """Synthetic data with a planted linear signal.

    Features are i.i.d. standard normal; a hidden unit-scaled weight vector
    produces either noisy linear targets (regression) or separable-ish
    binary labels (classification).
    """
    kx, kw, knoise = prng.split(key, 3)
    features = prng.gaussian(kx, n * d, 1.0).reshape(n, d)
    true_w = prng.gaussian(kw, d, 1.0) / np.sqrt(d)
    logits = features @ true_w
    if task == "regression":
        labels = logits + prng.gaussian(knoise, n, 0.1)
    elif task == "binary-classification":
        labels = (logits + prng.gaussian(knoise, n, 0.1) > 0.0).astype(np.float64)
    else:
        raise ConfigError(f"unknown task {task!r}")
    group_keys = None
    if num_groups is not None:
        if num_groups < 1:
            raise ConfigError("num_groups must be at least 1")
        group_keys = np.arange(n, dtype=np.int64) % num_groups
    return Dataset(features, labels, task, group_keys)


def load_csv_dataset(path: str, task: str) -> Dataset:
    """Loads a dataset from CSV with columns x0..x{d-1}, y (header required)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"empty csv dataset: {path}")
        try:
            y_col = header.index("y")
        except ValueError as exc:
            raise ConfigError("csv dataset needs a 'y' column") from exc
        d = len(header) - 1
        expected = [f"x{i}" for i in range(d)]
        x_cols = [c for c in header if c != "y"]
        if x_cols != expected:
            raise ConfigError(f"csv feature columns must be x0..x{d-1}, got {x_cols}")
        col_index = [header.index(c) for c in expected]
        features, labels = [], []
        for row in reader:
            features.append([float(row[i]) for i in col_index])
            labels.append(float(row[y_col]))
    if not features:
        raise ConfigError(f"csv dataset has no rows: {path}")
    return Dataset(np.array(features), np.array(labels), task)


def build_dataset(cfg: RunConfig) -> Dataset:
    ds = cfg.dataset
    if ds.source == "synthetic":
        _require(ds.n >= 1 and ds.d >= 1, "synthetic dataset needs n >= 1 and d >= 1")
        return synthesize_dataset(
            ds.n, ds.d, ds.task, prng.seed(ds.seed), num_groups=ds.num_groups
        )
    return load_csv_dataset(ds.path, ds.task)


@dataclasses.dataclass(frozen=True)
class TrainOutcome:
    """Everything a caller may need from a finished run."""

    initial_params: GradientVector
    final_params: GradientVector
    report: dict


def _resolve_sigma(cfg: RunConfig) -> float:
    p = cfg.privacy
    if p.noise_multiplier is not None:
        return p.noise_multiplier
    q = cfg.batch.sampling_prob if cfg.batch.sampling_prob is not None else 1.0
    if cfg.mechanism == "dpsgd":
        return accounting.calibrate_noise(p.target_epsilon, p.delta, q, cfg.steps)
    return accounting.calibrate_mf_noise(p.target_epsilon, p.delta)


def _normalization_denominator(cfg: RunConfig, n: int) -> float:
    if cfg.batch.strategy == batch_selection.SHUFFLED_FIXED:
        return float(cfg.batch.batch_size)
    return float(cfg.batch.sampling_prob) * n


def _achieved_epsilon(cfg, sigma, strategy):
    if cfg.mechanism == "none":
        return None
    if sigma == 0.0:
        return math.inf
    if cfg.mechanism == "dpsgd":
        spec = accounting.PrivacySpec(
            epsilon=math.inf,
            delta=cfg.privacy.delta,
            noise_multiplier=sigma,
            sampling_prob=cfg.batch.sampling_prob,
            steps=cfg.steps,
            amplification_valid=True,
        )
        return accounting.epsilon(spec)
    return accounting.mf_epsilon(strategy, sigma, cfg.privacy.delta, cfg.steps)


def run_training(cfg: RunConfig, dataset: Dataset) -> TrainOutcome:
    """Runs the training loop on an already-built dataset.

    Deterministic given (cfg, dataset): all randomness flows from cfg.seed.
    """
    validate_config(cfg)
    model = cfg.model.build()
    _require(
        model.input_dim == dataset.feature_dim,
        f"model input_dim {model.input_dim} does not match dataset "
        f"feature dim {dataset.feature_dim}",
    )
    root = prng.seed(cfg.seed)
    init_key, batch_key, noise_key = (prng.fold_in(root, i) for i in (1, 2, 3))

    params = init_params(model, init_key)
    initial_params = params

    strategy = None
    sigma = None
    priv = None
    priv_state = None
    if cfg.mechanism != "none":
        sigma = _resolve_sigma(cfg)
        if cfg.mechanism == "dpsgd":
            priv = Privatizer(
                kind=GAUSSIAN,
                noise_stddev=sigma * cfg.clip.clip_norm,
                sensitivity=cfg.clip.clip_norm,
            )
        else:
            strategy = matrix_factorization.optimize_banded(
                matrix_factorization.prefix_workload(cfg.steps),
                cfg.mf.bands,
                iters=cfg.mf.opt_iters,
                step_size=cfg.mf.opt_step_size,
            )
            priv = Privatizer(
                kind=BANDED,
                noise_stddev=accounting.banded_noise_stddev(
                    strategy, sigma, cfg.clip.clip_norm, cfg.steps
                ),
                sensitivity=cfg.clip.clip_norm,
                coefficients=strategy.coefficients,
            )
        priv_state = privatizer_init(priv, params.layout, noise_key)

    plan = cfg.batch.plan(dataset.size, cfg.steps, batch_key)
    denom = _normalization_denominator(cfg, dataset.size)
    _require(denom > 0, "expected batch size must be positive")

    opt_state = adamw_init(params.layout) if cfg.optimizer.kind == "adamw" else None
    eval_every = cfg.eval_every if cfg.eval_every is not None else max(1, cfg.steps // 20)

    trajectory = [[0, dataset_mean_loss(model, params, dataset)]]
    empty_batches = 0
    dropped_total = 0
    contributing_total = 0

    started = time.perf_counter()
    for step, batch_idx in enumerate(batch_selection.batches(plan), start=1):
        if batch_idx.size == 0:
            empty_batches += 1
        if cfg.mechanism == "none":
            grad_values = _raw_grad_sum(model, params, dataset, batch_idx)
            grad = GradientVector(grad_values, params.layout)
        else:
            examples = [dataset.example(int(i)) for i in batch_idx]
            csum = clipped_grad_sum(model, params, examples, cfg.clip)
            dropped_total += csum.dropped_nonfinite_count
            contributing_total += csum.contributing_count
            noisy, priv_state = privatize(priv, csum, priv_state)
            grad = noisy
        grad = GradientVector(grad.values / denom, params.layout)
        if cfg.optimizer.kind == "sgd":
            update, _ = sgd_update(cfg.optimizer.learning_rate, grad, params)
        else:
            o = cfg.optimizer
            update, opt_state = adamw_update(
                o.learning_rate, o.beta1, o.beta2, o.eps, o.weight_decay,
                grad, opt_state, params,
            )
        params = params + update
        if step % eval_every == 0 or step == cfg.steps:
            trajectory.append([step, dataset_mean_loss(model, params, dataset)])
    elapsed = time.perf_counter() - started

    achieved = _achieved_epsilon(cfg, sigma, strategy)
    report = {
        "config": config_to_dict(cfg),
        "privacy_warning": plan.privacy_warning,
        "seed": cfg.seed,
        "mechanism": cfg.mechanism,
        "sigma": sigma,
        "clip_norm": cfg.clip.clip_norm if cfg.clip else None,
        "delta": cfg.privacy.delta if cfg.privacy else None,
        "achieved_epsilon": achieved,
        "normalization_denominator": denom,
        "strategy_coefficients": list(strategy.coefficients) if strategy else None,
        "strategy_objective": "total-squared-error-frobenius" if strategy else None,
        "steps_run": cfg.steps,
        "empty_batches": empty_batches,
        "dropped_nonfinite_total": dropped_total,
        "contributing_total": contributing_total,
        "loss_trajectory": trajectory,
        "initial_loss": trajectory[0][1],
        "final_loss": trajectory[-1][1],
        "timing": {
            "total_seconds": elapsed,
            "seconds_per_step": elapsed / cfg.steps,
        },
    }
    return TrainOutcome(initial_params=initial_params, final_params=params, report=report)


def _raw_grad_sum(model, params, dataset, batch_idx) -> np.ndarray:
    """Unclipped per-example gradient sum, accumulated in batch order."""
    total = np.zeros(params.layout.total_length, dtype=np.float64)
    if batch_idx.size == 0:
        return total
    rows = batch_grads(
        model, params, dataset.features[batch_idx], dataset.labels[batch_idx]
    )
    for row in rows:
        total += row
    return total


def train(cfg: RunConfig) -> TrainOutcome:
    """Builds the dataset, trains, and writes the report if configured."""
    dataset = build_dataset(cfg)
    outcome = run_training(cfg, dataset)
    if cfg.report_path:
        write_report(outcome.report, cfg.report_path)
    return outcome


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def write_report(report: dict, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(report_json(report))
        fh.write("\n")


def _power_of_two_sizes(limit: int) -> tuple[int, ...]:
    sizes = []
    b = 1
    while b <= limit:
        sizes.append(b)
        b *= 2
    return tuple(sizes)


@dataclasses.dataclass(frozen=True)
class BenchmarkResult:
    """Sweep rows plus per-mechanism maxima and the private/non-private ratio."""

    rows: list[dict]
    max_throughput: dict[str, float]
    ratio: float

    def to_csv(self, path: str) -> None:
        fieldnames = [
            "record", "model", "params", "mechanism", "batch_size",
            "examples_per_sec", "relative_throughput",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def run_benchmark(cfg: RunConfig) -> BenchmarkResult:
    """Throughput sweep: mechanisms {none, dpsgd} x power-of-two batch sizes.

    Each cell runs warmup steps then measured steps on synthetic data with a
    fixed batch size (consecutive index windows, so the dataset acts purely
    as dummy input). Throughput is examples processed per second over the
    measured steps; the summary rows report the max across batch sizes and
    the dpsgd/none ratio of those maxima.
    """
    dataset = build_dataset(cfg)
    model = cfg.model.build()
    bench = cfg.benchmark
    sizes = bench.batch_sizes or _power_of_two_sizes(min(dataset.size, 256))
    clip = cfg.clip if cfg.clip is not None else ClipConfig(clip_norm=1.0)
    sigma = 1.0
    if cfg.privacy is not None and cfg.privacy.noise_multiplier is not None:
        sigma = cfg.privacy.noise_multiplier

    rows = []
    best: dict[str, float] = {}
    for mechanism in ("none", "dpsgd"):
        for batch_size in sizes:
            throughput = _benchmark_cell(
                cfg, model, dataset, mechanism, batch_size, clip, sigma
            )
            rows.append({
                "record": "sweep",
                "model": model.kind,
                "params": model.param_count(),
                "mechanism": mechanism,
                "batch_size": batch_size,
                "examples_per_sec": round(throughput, 3),
                "relative_throughput": "",
            })
            best[mechanism] = max(best.get(mechanism, 0.0), throughput)
    ratio = best["dpsgd"] / best["none"]
    for mechanism in ("none", "dpsgd"):
        rows.append({
            "record": "max",
            "model": model.kind,
            "params": model.param_count(),
            "mechanism": mechanism,
            "batch_size": "",
            "examples_per_sec": round(best[mechanism], 3),
            "relative_throughput": round(best[mechanism] / best["none"], 4),
        })
    return BenchmarkResult(rows=rows, max_throughput=best, ratio=ratio)


def _benchmark_cell(cfg, model, dataset, mechanism, batch_size, clip, sigma):
    root = prng.seed(cfg.seed)
    params = init_params(model, prng.fold_in(root, 1))
    priv = None
    priv_state = None
    if mechanism == "dpsgd":
        priv = Privatizer(
            kind=GAUSSIAN, noise_stddev=sigma * clip.clip_norm, sensitivity=clip.clip_norm
        )
        priv_state = privatizer_init(priv, params.layout, prng.fold_in(root, 3))
    opt_state = adamw_init(params.layout) if cfg.optimizer.kind == "adamw" else None
    n = dataset.size

    def one_step(step, params, priv_state, opt_state):
        start = (step * batch_size) % n
        idx = np.arange(start, start + batch_size) % n
        if mechanism == "none":
            grad = GradientVector(
                _raw_grad_sum(model, params, dataset, idx), params.layout
            )
        else:
            examples = [dataset.example(int(i)) for i in idx]
            csum = clipped_grad_sum(model, params, examples, clip)
            grad, priv_state = privatize(priv, csum, priv_state)
        grad = GradientVector(grad.values / batch_size, params.layout)
        if cfg.optimizer.kind == "sgd":
            update, _ = sgd_update(cfg.optimizer.learning_rate, grad, params)
            new_opt = opt_state
        else:
            o = cfg.optimizer
            update, new_opt = adamw_update(
                o.learning_rate, o.beta1, o.beta2, o.eps, o.weight_decay,
                grad, opt_state, params,
            )
        return params + update, priv_state, new_opt

    for step in range(cfg.benchmark.warmup_steps):
        params, priv_state, opt_state = one_step(step, params, priv_state, opt_state)
    started = time.perf_counter()
    for step in range(cfg.benchmark.measured_steps):
        params, priv_state, opt_state = one_step(step, params, priv_state, opt_state)
    elapsed = time.perf_counter() - started
    return cfg.benchmark.measured_steps * batch_size / elapsed
