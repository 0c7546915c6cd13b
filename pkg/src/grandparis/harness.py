"""Experiment orchestration: datasets, replicated runs, metrics, CSV output.

One experiment simulates a dataset, computes a reference value from
high-particle-count runs of the online smoother, runs replicated
estimations with the online smoother and with fixed-lag baselines, and
writes plot-ready CSVs plus a JSON manifest. Everything is deterministic
given the config seed, including across thread counts, because every job
draws from its own derived stream.
"""
from __future__ import annotations

import hashlib
import json
import sys
import time
from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .density import BOUND_KINDS, ExactTransition, GPE1Estimator
from .exceptions import ConfigError, MetricUndefinedError
from .models import (
    DiffusionModel,
    LinearGaussianModel,
    ObservationModel,
    log_growth_model,
    simulate_data,
    sine_model,
)
from .rng import RngStream
from .smoothing import AdditiveFunctional, fixed_lag_smooth, smooth_additive

__all__ = [
    "ExperimentConfig",
    "ReplicateResult",
    "MetricsRow",
    "parse_config",
    "load_config",
    "build_model",
    "simulate_dataset",
    "em_functional",
    "compute_metrics",
    "run_experiment",
    "emit_results",
    "format_float",
]

_MODELS = ("sine", "log_growth", "linear_gaussian")
_ADJUSTMENTS = ("unit", "fully_adapted")

# purpose tags for derived rng streams
_DATA, _REFERENCE, _GRAND_PARIS, _FIXED_LAG = 10, 11, 12, 13


@dataclass(frozen=True)
class ExperimentConfig:
    """Full experiment description; mirrors the config-file keys."""

    model: str
    theta: float = 0.0
    kappa: float = 0.1
    sigma: float = 0.1
    gamma: float = 1000.0
    a: float = 0.9
    t0: float = 0.0
    delta: float = 0.5
    n_steps: int = 50
    obs_variance: float = 1.0
    x0: float = 0.0
    substeps: int = 100
    n_particles: int = 200
    fixed_lag_particles: int = 800
    n_backward: int = 2
    density_draws: int = 30
    lags: tuple = (1, 2, 5, 10)
    replicates: int = 50
    reference_particles: int = 1000
    reference_replicates: int = 5
    datasets: int = 1
    seed: int = 0
    bound_strategy: str = "pairwise"
    adjustment: str = "unit"
    record_timings: bool = False
    output_dir: str = "results"

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {_MODELS}")
        if not self.delta > 0:
            raise ConfigError("delta must be > 0")
        for name in (
            "n_steps",
            "substeps",
            "n_particles",
            "fixed_lag_particles",
            "n_backward",
            "density_draws",
            "replicates",
            "reference_particles",
            "reference_replicates",
            "datasets",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.obs_variance > 0:
            raise ConfigError("obs_variance must be > 0")
        if self.bound_strategy not in BOUND_KINDS:
            raise ConfigError(
                f"unknown bound_strategy {self.bound_strategy!r}; expected one of {BOUND_KINDS}"
            )
        if self.adjustment not in _ADJUSTMENTS:
            raise ConfigError(
                f"unknown adjustment {self.adjustment!r}; expected one of {_ADJUSTMENTS}"
            )
        if any(int(lag) < 1 for lag in self.lags):
            raise ConfigError("lags must all be >= 1")


def _coerce(name: str, ftype: str, raw: str):
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype.startswith("tuple"):
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse a key=value config; '#' starts a comment, unknown keys error."""
    types = {f.name: str(f.type) for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    if "model" not in values:
        raise ConfigError("config is missing the required key 'model'")
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def build_model(config: ExperimentConfig):
    """Model and observation channel described by the config."""
    obs_model = ObservationModel(config.obs_variance)
    if config.model == "sine":
        return sine_model(config.theta), obs_model
    if config.model == "log_growth":
        return log_growth_model(config.kappa, config.sigma, config.gamma), obs_model
    return (
        LinearGaussianModel(
            a=config.a,
            state_noise_variance=config.delta,
            obs_variance=config.obs_variance,
        ),
        obs_model,
    )


def simulate_dataset(config: ExperimentConfig, rng):
    """Latent path and observations on the config time grid; rng is a Generator."""
    model, obs_model = build_model(config)
    times = config.t0 + config.delta * np.arange(config.n_steps + 1)
    if isinstance(model, LinearGaussianModel):
        states = np.empty(len(times))
        states[0] = config.x0
        sq = np.sqrt(model.state_noise_variance)
        for k in range(1, len(times)):
            states[k] = model.a * states[k - 1] + sq * rng.standard_normal()
        observations = states + np.sqrt(model.obs_variance) * rng.standard_normal(len(times))
        return times, states, observations
    states, observations = simulate_data(
        model, obs_model, config.x0, times, config.substeps, rng
    )
    return times, states, observations


def _make_em_term(estimator, obs_model: ObservationModel, y_next, M: int, y0, default_rng):
    def term(x, x_next, rng):
        gen = rng if rng is not None else default_rng
        vals = obs_model.log_density(np.asarray(x_next, dtype=float), y_next)
        vals = vals + estimator.log_mean_batch(x, x_next, M, gen)
        if y0 is not None:
            vals = vals + obs_model.log_density(np.asarray(x, dtype=float), y0)
        return vals

    return term


def em_functional(
    model,
    obs_model: ObservationModel,
    observations,
    M: int,
    rng=None,
    *,
    delta: float | None = None,
    estimator=None,
) -> AdditiveFunctional:
    """Per-transition terms of the EM intermediate quantity.

    h_k(x, x') = log g_{k+1}(x', y_{k+1}) + log of the M-draw average
    transition-density estimate; the first term additionally carries
    log g_0(x, y_0). The initial law is a point mass at the simulation
    start, so its log-density contributes no x-dependence and is dropped.
    ``rng`` is only a fallback generator for terms evaluated without one.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    y = np.asarray(observations, dtype=float)
    if len(y) < 2:
        raise ValueError("need at least two observations")
    if estimator is None:
        if isinstance(model, LinearGaussianModel):
            estimator = ExactTransition.from_lg(model)
        elif isinstance(model, DiffusionModel):
            if delta is None:
                raise ValueError("delta is required for diffusion models")
            estimator = GPE1Estimator(model, delta)
        else:
            raise ValueError("model must be a diffusion or linear-Gaussian model")
    default_rng = rng.generator() if isinstance(rng, RngStream) else rng
    terms = [
        _make_em_term(estimator, obs_model, y[k + 1], M, y[0] if k == 0 else None, default_rng)
        for k in range(len(y) - 1)
    ]
    return AdditiveFunctional(terms=terms)


@dataclass(frozen=True)
class ReplicateResult:
    method: str  # "grand_paris" or "fixed_lag"
    lag: int | None
    replicate: int
    q_hat: float
    wall_time_s: float
    mean_acceptance_rate: float | None
    dataset: int = 0

    def __post_init__(self):
        if not np.isfinite(self.q_hat):
            raise ValueError(f"non-finite estimate in {self.method} replicate {self.replicate}")


@dataclass(frozen=True)
class MetricsRow:
    method: str
    lag: int | None
    arb: float
    acv: float
    mean_q: float
    sd_q: float
    q_star: float
    dataset: int = 0


def compute_metrics(estimates, q_star: float, method: str = "", lag=None, dataset: int = 0) -> MetricsRow:
    """Absolute relative bias and coefficient of variation of the sample.

    arb = |mean - q_star| / |q_star|; acv = sd / |mean| with the sample
    standard deviation (denominator R - 1).
    """
    est = np.asarray(estimates, dtype=float)
    if len(est) < 2:
        raise MetricUndefinedError("acv needs at least 2 replicates")
    if q_star == 0.0:
        raise MetricUndefinedError("reference value is zero; arb is undefined")
    mean = float(est.mean())
    if mean == 0.0:
        raise MetricUndefinedError("mean estimate is zero; acv is undefined")
    sd = float(est.std(ddof=1))
    return MetricsRow(
        method=method,
        lag=lag,
        arb=abs(mean - q_star) / abs(q_star),
        acv=sd / abs(mean),
        mean_q=mean,
        sd_q=sd,
        q_star=q_star,
        dataset=dataset,
    )


def _run_replicate(job):
    """One smoothing job; module-level so process pools can pickle it."""
    config, observations, method, lag, n_particles, replicate, stream = job
    model, obs_model = build_model(config)
    functional = em_functional(
        model, obs_model, observations, config.density_draws, delta=config.delta
    )
    t_start = time.perf_counter()
    if method == "fixed_lag":
        result = fixed_lag_smooth(
            model,
            obs_model,
            observations,
            functional,
            n_particles=n_particles,
            lag=lag,
            delta=config.delta,
            density_draws=config.density_draws,
            adjustment=config.adjustment,
            rng=stream,
            x0=config.x0,
        )
        acceptance = None
    else:
        result = smooth_additive(
            model,
            obs_model,
            observations,
            functional,
            n_particles=n_particles,
            delta=config.delta,
            n_backward=config.n_backward,
            density_draws=config.density_draws,
            bound_strategy=config.bound_strategy,
            adjustment=config.adjustment,
            rng=stream,
            x0=config.x0,
        )
        acceptance = result.diagnostics["mean_acceptance_rate"]
    wall = time.perf_counter() - t_start
    return method, lag, replicate, result.estimate, wall, acceptance


def _dataset_jobs(config: ExperimentConfig, observations, dataset: int):
    root = RngStream(config.seed)
    jobs = []
    for r in range(config.reference_replicates):
        jobs.append(
            (
                config,
                observations,
                "reference",
                None,
                config.reference_particles,
                r,
                root.derive(_REFERENCE, dataset, r),
            )
        )
    for r in range(config.replicates):
        jobs.append(
            (
                config,
                observations,
                "grand_paris",
                None,
                config.n_particles,
                r,
                root.derive(_GRAND_PARIS, dataset, r),
            )
        )
    for lag in config.lags:
        for r in range(config.replicates):
            jobs.append(
                (
                    config,
                    observations,
                    "fixed_lag",
                    int(lag),
                    config.fixed_lag_particles,
                    r,
                    root.derive(_FIXED_LAG, dataset, lag, r),
                )
            )
    return jobs


def _execute(jobs, threads: int):
    """Run jobs, yielding raw rows; on failure return what finished so far."""
    rows = []
    if threads <= 1:
        for job in jobs:
            try:
                rows.append(_run_replicate(job))
            except Exception as exc:
                return rows, exc
        return rows, None
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_run_replicate, job) for job in jobs]
        wait(futures, return_when=FIRST_EXCEPTION)
        error = None
        for fut in futures:
            if not fut.done() or fut.cancelled():
                continue
            exc = fut.exception()
            if exc is not None:
                error = error if error is not None else exc
                continue
            rows.append(fut.result())
    return rows, error


def format_float(value) -> str:
    return "" if value is None else f"{float(value):.17g}"


def _write_csv(path: Path, header, rows):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_results(results, metrics, paths) -> None:
    """Write the per-replicate and metrics CSVs.

    ``paths`` maps "results" and "metrics" to file paths; either key may
    be absent. Lag is empty for the online smoother, acceptance is empty
    for fixed-lag, wall time is kept only when the result carries one.
    """
    if "results" in paths:
        rows = []
        for r in results:
            rows.append(
                [
                    r.method,
                    "" if r.lag is None else str(r.lag),
                    str(r.replicate),
                    format_float(r.q_hat),
                    format_float(r.wall_time_s),
                    format_float(r.mean_acceptance_rate),
                ]
            )
        _write_csv(
            Path(paths["results"]),
            ["method", "lag", "replicate", "Q_hat", "wall_time_s", "mean_acceptance_rate"],
            rows,
        )
    if "metrics" in paths:
        rows = []
        for m in metrics:
            rows.append(
                [
                    m.method,
                    "" if m.lag is None else str(m.lag),
                    format_float(m.arb),
                    format_float(m.acv),
                    format_float(m.mean_q),
                    format_float(m.sd_q),
                    format_float(m.q_star),
                ]
            )
        _write_csv(
            Path(paths["metrics"]),
            ["method", "lag", "arb", "acv", "mean_Q", "sd_Q", "Q_star"],
            rows,
        )


def _config_sha256(config: ExperimentConfig) -> str:
    canon = json.dumps(asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(canon.encode()).hexdigest()


def _sort_key(row):
    method, lag, replicate = row[0], row[1], row[2]
    return (method, -1 if lag is None else lag, replicate)


def run_experiment(config: ExperimentConfig, threads: int = 1, out_dir=None):
    """Full protocol: simulate, reference runs, replicated runs, metrics.

    Returns (results, metrics) over all datasets. When ``out_dir`` is
    given, writes dataset_XXX/results.csv and metrics.csv per dataset plus
    a top-level manifest.json; partial results are flushed before any
    error is re-raised. Deterministic for a fixed seed at any thread
    count (timings excluded, and blanked unless record_timings is set).
    """
    out_path = Path(out_dir) if out_dir is not None else None
    root = RngStream(config.seed)
    t_start = time.perf_counter()
    all_results: list = []
    all_metrics: list = []
    manifest_datasets = []
    failure = None
    for d in range(config.datasets):
        _, _, observations = simulate_dataset(
            config, root.derive(_DATA, d).generator()
        )
        rows, failure = _execute(_dataset_jobs(config, observations, d), threads)
        rows.sort(key=_sort_key)
        reference = [row[3] for row in rows if row[0] == "reference"]
        q_star = float(np.mean(reference)) if reference else float("nan")
        results = [
            ReplicateResult(
                method=row[0],
                lag=row[1],
                replicate=row[2],
                q_hat=row[3],
                wall_time_s=row[4] if config.record_timings else None,
                mean_acceptance_rate=row[5],
                dataset=d,
            )
            for row in rows
            if row[0] != "reference"
        ]
        all_results.extend(results)
        dataset_dir = out_path / f"dataset_{d:03d}" if out_path is not None else None
        if dataset_dir is not None:
            emit_results(results, [], {"results": dataset_dir / "results.csv"})
        metrics = []
        try:
            if failure is None:
                groups: dict = {}
                for r in results:
                    groups.setdefault((r.method, r.lag), []).append(r.q_hat)
                for (method, lag), estimates in sorted(
                    groups.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])
                ):
                    metrics.append(
                        compute_metrics(estimates, q_star, method=method, lag=lag, dataset=d)
                    )
        except MetricUndefinedError as exc:
            failure = exc
        if dataset_dir is not None:
            emit_results([], metrics, {"metrics": dataset_dir / "metrics.csv"})
        all_metrics.extend(metrics)
        manifest_datasets.append(
            {
                "dataset": d,
                "q_star": q_star,
                "reference_estimates": reference,
                "observations_sha256": hashlib.sha256(
                    np.ascontiguousarray(observations).tobytes()
                ).hexdigest(),
            }
        )
        if failure is not None:
            break
    if out_path is not None:
        manifest = {
            "config": asdict(config),
            "config_sha256": _config_sha256(config),
            "seed": config.seed,
            "versions": {
                "python": sys.version.split()[0],
                "numpy": np.__version__,
            },
            "datasets": manifest_datasets,
            "complete": failure is None,
        }
        if config.record_timings:
            manifest["total_wall_time_s"] = time.perf_counter() - t_start
        out_path.mkdir(parents=True, exist_ok=True)
        manifest_file = out_path / "manifest.json"
        try:
            manifest_file.write_text(json.dumps(manifest, indent=2, default=list) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write {manifest_file}: {exc}") from exc
    if failure is not None:
        raise failure
    return all_results, all_metrics
