"""Online smoothing of additive functionals.

The main smoother keeps one per-particle statistic tau alongside the
filter and updates it at each step from a few backward indices drawn by
accept-reject: repeatedly pick a candidate ancestor with probability
proportional to its filter weight, draw a fresh unbiased density estimate
for the candidate transition, and accept when a uniform falls below the
estimate divided by the dominating constant. Accepted indices follow the
exact backward kernel even though the transition density is only ever
estimated.

A fixed-lag smoother over the surviving genealogy is included as the
baseline it is compared against.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .density import BoundStrategy, ExactTransition, GPE1Estimator, sigma_plus
from .exceptions import (
    BackwardStallError,
    BoundViolationError,
    DegenerateKernelError,
)
from .filtering import (
    InitialLaw,
    ParticleCloud,
    filter_step,
    init_cloud,
    lg_fully_adapted_adjustment,
    lg_optimal_proposal,
    fully_adapted_adjustment,
    optimal_proposal,
    point_mass_init,
    unit_adjustment,
)
from .models import DiffusionModel, LinearGaussianModel, ObservationModel

__all__ = [
    "TauStatistics",
    "BackwardTrialLog",
    "AdditiveFunctional",
    "SmootherResult",
    "pairwise_product_functional",
    "backward_index",
    "backward_indices_batch",
    "exact_lambda",
    "paris_step",
    "paris_step_exact",
    "smooth_additive",
    "fixed_lag_smooth",
]

# purpose tags for derived rng streams
_INIT, _FILTER, _BACKWARD, _HFUNC = 0, 1, 2, 3


@dataclass
class TauStatistics:
    """Per-particle smoothing statistics; all zero at step 0."""

    values: np.ndarray
    step: int = 0

    @classmethod
    def initial(cls, n: int) -> "TauStatistics":
        return cls(values=np.zeros(n), step=0)


@dataclass
class BackwardTrialLog:
    """Accept-reject effort for one smoothing step."""

    trials: np.ndarray  # (n_particles, n_backward)
    total_draws: int
    acceptance_rate: float


@dataclass(frozen=True)
class AdditiveFunctional:
    """Sum of per-transition terms h_k(x_k, x_{k+1}).

    Terms are vectorized callables (x, x_next, rng) -> values; the rng
    argument serves terms that are themselves Monte Carlo estimates and is
    ignored by deterministic ones.
    """

    terms: Sequence[Callable]

    def __len__(self) -> int:
        return len(self.terms)

    def evaluate_path(self, path, rng=None) -> float:
        path = np.asarray(path, dtype=float)
        if len(path) != len(self.terms) + 1:
            raise ValueError("path length must be number of terms + 1")
        total = 0.0
        for k, h in enumerate(self.terms):
            total += float(np.asarray(h(path[k : k + 1], path[k + 1 : k + 2], rng))[0])
        return total


def pairwise_product_functional(n_terms: int) -> AdditiveFunctional:
    """H = sum of x_k * x_{k+1}, the standard smoothing test functional."""

    def term(x, x_next, rng):
        return np.asarray(x) * np.asarray(x_next)

    return AdditiveFunctional(terms=[term] * n_terms)


@dataclass
class SmootherResult:
    estimate: float
    diagnostics: dict


def exact_lambda(prev_cloud: ParticleCloud, new_particle: float, q_evaluator) -> np.ndarray:
    """Exact backward-kernel probabilities over the previous cloud (oracle use)."""
    raw = prev_cloud.weights * np.asarray(
        q_evaluator(prev_cloud.particles, new_particle), dtype=float
    )
    total = raw.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateKernelError("backward kernel normalizer is zero")
    return raw / total


def backward_index(
    prev_cloud: ParticleCloud,
    new_particle: float,
    estimator,
    sigma_bound: float,
    rng,
    max_trials: int = 10**6,
    site=None,
):
    """One backward index by accept-reject with a fresh estimate per trial.

    Each trial draws a fresh estimator realization, a uniform, and a
    candidate index proportional to the previous weights, accepting when
    U <= q_hat / sigma_bound. Returns (index, trials).
    """
    sigma_bound = float(np.max(sigma_bound))
    probs = prev_cloud.weights / prev_cloud.total_weight
    n = len(prev_cloud)
    target = np.asarray([new_particle], dtype=float)
    for trial in range(1, max_trials + 1):
        j = int(rng.choice(n, p=probs))
        q_hat = float(estimator.draw_batch(prev_cloud.particles[j : j + 1], target, rng)[0])
        if q_hat > sigma_bound * (1.0 + 1e-12):
            raise BoundViolationError(
                f"estimate {q_hat} exceeds bound {sigma_bound} at step {prev_cloud.step}"
            )
        if rng.random() <= q_hat / sigma_bound:
            return j, trial
    raise BackwardStallError(prev_cloud.step, site, max_trials)


def backward_indices_batch(
    prev_cloud: ParticleCloud,
    new_particles: np.ndarray,
    estimator,
    sigma_bound,
    rng,
    max_trials: int = 10**6,
):
    """Backward indices for many targets at once; returns (indices, trials).

    ``sigma_bound`` is a scalar or one dominating value per target; the
    accept-reject law per target only needs its own bound. Every trial is
    independent: a candidate drawn proportional to the previous weights, a
    fresh estimator draw, and a uniform. Each round hands every
    still-pending target a doubling block of such trials and keeps its
    first acceptance, which leaves the accepted-index law exactly that of
    one-at-a-time rejection sampling while amortizing the fixed cost of an
    estimator call over far fewer, larger batches. Any estimate above its
    bound raises (the bound assumptions would be breached), and a target
    that exhausts ``max_trials`` without an acceptance stalls.
    """
    new_particles = np.asarray(new_particles, dtype=float)
    B = len(new_particles)
    sig = np.broadcast_to(np.asarray(sigma_bound, dtype=float), (B,))
    probs = prev_cloud.weights / prev_cloud.total_weight
    n = len(prev_cloud)
    out = np.full(B, -1, dtype=np.intp)
    trials = np.zeros(B, dtype=np.int64)
    pending = np.arange(B)
    block = 1
    while pending.size:
        # all pending targets share the same trial count by construction
        used = int(trials[pending[0]])
        if used >= max_trials:
            raise BackwardStallError(prev_cloud.step, int(pending[0]), used)
        k = min(block, max_trials - used)
        total = pending.size * k
        cand = rng.choice(n, size=total, p=probs)
        q_hat = estimator.draw_batch(
            prev_cloud.particles[cand], np.repeat(new_particles[pending], k), rng
        )
        sig_rep = np.repeat(sig[pending], k)
        if np.any(q_hat > sig_rep * (1.0 + 1e-12)):
            worst = int(np.argmax(q_hat / sig_rep))
            raise BoundViolationError(
                f"estimate {q_hat[worst]} exceeds bound {sig_rep[worst]} "
                f"at step {prev_cloud.step}"
            )
        accept = (rng.random(total) <= q_hat / sig_rep).reshape(pending.size, k)
        hit = accept.any(axis=1)
        first = accept.argmax(axis=1)
        trials[pending] += np.where(hit, first + 1, k)
        out[pending[hit]] = cand.reshape(pending.size, k)[np.nonzero(hit)[0], first[hit]]
        pending = pending[~hit]
        block = min(block * 2, 64)
    return out, trials


def paris_step(
    tau: TauStatistics,
    prev_cloud: ParticleCloud,
    new_cloud: ParticleCloud,
    h_k: Callable,
    n_backward: int,
    estimator,
    bound_strategy: BoundStrategy,
    rng,
    h_rng=None,
    max_trials: int = 10**6,
):
    """One online smoothing update of the per-particle statistics.

    For each new particle, draws ``n_backward`` backward indices and
    averages tau[J] + h_k(xi_prev[J], xi_new); returns the new statistics
    and the accept-reject effort log.
    """
    if n_backward < 1:
        raise ValueError("n_backward must be >= 1")
    n = len(new_cloud)
    bound = sigma_plus(
        bound_strategy, estimator, prev_cloud.particles, new_cloud.particles
    )
    targets = np.repeat(new_cloud.particles, n_backward)
    sigma = np.repeat(bound, n_backward) if np.ndim(bound) == 1 else bound
    indices, trials = backward_indices_batch(
        prev_cloud, targets, estimator, sigma, rng, max_trials
    )
    h_vals = np.asarray(
        h_k(prev_cloud.particles[indices], targets, h_rng if h_rng is not None else rng),
        dtype=float,
    )
    contrib = (tau.values[indices] + h_vals).reshape(n, n_backward)
    new_tau = TauStatistics(values=contrib.mean(axis=1), step=tau.step + 1)
    total = int(trials.sum())
    log = BackwardTrialLog(
        trials=trials.reshape(n, n_backward),
        total_draws=total,
        acceptance_rate=(n * n_backward) / total,
    )
    return new_tau, log


def paris_step_exact(
    tau: TauStatistics,
    prev_cloud: ParticleCloud,
    new_cloud: ParticleCloud,
    h_k: Callable,
    q_evaluator,
    h_rng=None,
) -> TauStatistics:
    """Deterministic reference update replacing sampling with the exact kernel.

    Computes, for every new particle, the full expectation of
    tau[J] + h_k under the exact backward probabilities (oracle models
    only; O(N^2)).
    """
    n = len(new_cloud)
    values = np.empty(n)
    for i, xi in enumerate(new_cloud.particles):
        lam = exact_lambda(prev_cloud, xi, q_evaluator)
        h_vals = np.asarray(
            h_k(prev_cloud.particles, np.full(len(prev_cloud), xi), h_rng), dtype=float
        )
        values[i] = float(np.dot(lam, tau.values + h_vals))
    return TauStatistics(values=values, step=tau.step + 1)


def _resolve_components(
    model,
    obs_model: ObservationModel,
    delta,
    estimator,
    proposal,
    adjustment,
):
    """Default estimator/proposal/adjustment for the given model type."""
    if estimator is None:
        if isinstance(model, LinearGaussianModel):
            estimator = ExactTransition.from_lg(model)
        elif isinstance(model, DiffusionModel):
            if delta is None:
                raise ValueError("delta is required for diffusion models")
            estimator = GPE1Estimator(model, delta)
        else:
            raise ValueError("need an estimator when model is neither diffusion nor linear-Gaussian")
    if proposal is None:
        if isinstance(model, LinearGaussianModel):
            proposal = lg_optimal_proposal(model)
        elif isinstance(model, DiffusionModel):
            proposal = optimal_proposal(model, obs_model.obs_variance, delta)
        else:
            raise ValueError("need a proposal when model is neither diffusion nor linear-Gaussian")
    if isinstance(adjustment, str):
        if adjustment == "unit":
            adjustment = unit_adjustment()
        elif adjustment == "fully_adapted":
            if isinstance(model, LinearGaussianModel):
                adjustment = lg_fully_adapted_adjustment(model)
            else:
                adjustment = fully_adapted_adjustment(model, delta, obs_model.obs_variance)
        else:
            raise ValueError(f"unknown adjustment kind {adjustment!r}")
    return estimator, proposal, adjustment


def smooth_additive(
    model,
    obs_model: ObservationModel,
    observations,
    functional: AdditiveFunctional,
    *,
    n_particles: int,
    delta: float | None = None,
    n_backward: int = 2,
    density_draws: int = 30,
    bound_strategy: str | BoundStrategy = "pairwise",
    adjustment="unit",
    rng=None,
    estimator=None,
    proposal=None,
    init: InitialLaw | None = None,
    chi_density=None,
    x0: float | None = None,
    max_trials: int = 10**6,
    step_hook: Callable | None = None,
) -> SmootherResult:
    """Online estimate of the smoothed additive functional.

    Runs the random-weight auxiliary filter and, after every filter step,
    the backward-index update of the per-particle statistics; no cloud
    older than the previous step is retained. ``rng`` is an RngStream.
    The initial cloud comes from ``init`` (or a point mass at ``x0``).
    """
    y = np.asarray(observations, dtype=float)
    n = len(y) - 1
    if n < 1:
        raise ValueError("need at least two observations")
    if len(functional) != n:
        raise ValueError(f"functional has {len(functional)} terms, expected {n}")
    from .rng import RngStream

    if rng is None:
        rng = RngStream(0)
    estimator, proposal, adjustment = _resolve_components(
        model, obs_model, delta, estimator, proposal, adjustment
    )
    if init is None:
        if x0 is None:
            raise ValueError("provide init or x0")
        init = point_mass_init(x0)
    strategy = (
        bound_strategy
        if isinstance(bound_strategy, BoundStrategy)
        else BoundStrategy(kind=bound_strategy)
    )
    t_start = time.perf_counter()
    cloud = init_cloud(
        init,
        chi_density,
        lambda x: obs_model.density(x, y[0]),
        n_particles,
        rng.derive(0, _INIT).generator(),
    )
    tau = TauStatistics.initial(n_particles)
    acceptance = np.empty(n)
    total_draws = 0
    bounds_used = []
    for k in range(n):
        new_cloud = filter_step(
            cloud,
            estimator,
            proposal,
            adjustment,
            obs_model,
            y[k + 1],
            density_draws,
            rng.derive(k + 1, _FILTER).generator(),
        )
        tau, trial_log = paris_step(
            tau,
            cloud,
            new_cloud,
            functional.terms[k],
            n_backward,
            estimator,
            strategy,
            rng.derive(k + 1, _BACKWARD).generator(),
            h_rng=rng.derive(k + 1, _HFUNC).generator(),
            max_trials=max_trials,
        )
        acceptance[k] = trial_log.acceptance_rate
        total_draws += trial_log.total_draws
        bounds_used.append(strategy.cached_bound)
        cloud = new_cloud
        if step_hook is not None:
            step_hook(k, cloud, tau, trial_log)
    estimate = float(np.dot(cloud.weights, tau.values) / cloud.total_weight)
    diagnostics = {
        "acceptance_rates": acceptance,
        "mean_acceptance_rate": float(acceptance.mean()),
        "total_backward_draws": total_draws,
        "bound_kind": strategy.effective_kind,
        "bounds": np.asarray(bounds_used),
        "wall_time_s": time.perf_counter() - t_start,
    }
    return SmootherResult(estimate=estimate, diagnostics=diagnostics)


def fixed_lag_smooth(
    model,
    obs_model: ObservationModel,
    observations,
    functional: AdditiveFunctional,
    *,
    n_particles: int,
    lag: int,
    delta: float | None = None,
    density_draws: int = 30,
    adjustment="unit",
    rng=None,
    estimator=None,
    proposal=None,
    init: InitialLaw | None = None,
    chi_density=None,
    x0: float | None = None,
    step_hook: Callable | None = None,
) -> SmootherResult:
    """Fixed-lag baseline over the surviving genealogy.

    Each in-window term value is carried per particle and permuted by the
    ancestor indices at every step; the term for transition (k, k+1) is
    frozen under the weights of step k + lag (or the final weights when it
    never ages out). With lag >= n this is the plain genealogical path
    smoother, at the price of O(n_particles * lag) extra memory and a bias
    that does not vanish for small lags.
    """
    if lag < 1:
        raise ValueError("lag must be >= 1")
    y = np.asarray(observations, dtype=float)
    n = len(y) - 1
    if n < 1:
        raise ValueError("need at least two observations")
    if len(functional) != n:
        raise ValueError(f"functional has {len(functional)} terms, expected {n}")
    from .rng import RngStream

    if rng is None:
        rng = RngStream(0)
    estimator, proposal, adjustment = _resolve_components(
        model, obs_model, delta, estimator, proposal, adjustment
    )
    if init is None:
        if x0 is None:
            raise ValueError("provide init or x0")
        init = point_mass_init(x0)
    t_start = time.perf_counter()
    cloud = init_cloud(
        init,
        chi_density,
        lambda x: obs_model.density(x, y[0]),
        n_particles,
        rng.derive(0, _INIT).generator(),
    )
    window: dict[int, np.ndarray] = {}
    frozen = 0.0
    for k in range(n):
        new_cloud = filter_step(
            cloud,
            estimator,
            proposal,
            adjustment,
            obs_model,
            y[k + 1],
            density_draws,
            rng.derive(k + 1, _FILTER).generator(),
        )
        anc = new_cloud.ancestors
        for key in window:
            window[key] = window[key][anc]
        h_rng = rng.derive(k + 1, _HFUNC).generator()
        window[k] = np.asarray(
            functional.terms[k](cloud.particles[anc], new_cloud.particles, h_rng),
            dtype=float,
        )
        aged_out = k + 1 - lag
        if aged_out in window:
            frozen += float(
                np.dot(new_cloud.weights, window.pop(aged_out)) / new_cloud.total_weight
            )
        cloud = new_cloud
        if step_hook is not None:
            step_hook(k, cloud, window)
    for values in window.values():
        frozen += float(np.dot(cloud.weights, values) / cloud.total_weight)
    diagnostics = {
        "lag": lag,
        "degenerates_to_full_genealogy": lag >= n,
        "wall_time_s": time.perf_counter() - t_start,
    }
    return SmootherResult(estimate=frozen, diagnostics=diagnostics)
