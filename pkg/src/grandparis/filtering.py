"""Random-weight auxiliary particle filter.

One filter step selects ancestors with probability proportional to
weight times adjustment multiplier, proposes from a Gaussian kernel, and
weights each new particle by

    q_bar * g(x_new, y) / (adjustment(x_old) * proposal_density(x_old, x_new))

where q_bar is an unbiased Monte Carlo average of transition-density
estimates, so the weights themselves are random but unbiased.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import WeightDegeneracyError
from .models import DiffusionModel, LinearGaussianModel, ObservationModel

__all__ = [
    "ParticleCloud",
    "ProposalKernel",
    "AdjustmentMultiplier",
    "InitialLaw",
    "init_cloud",
    "point_mass_init",
    "gaussian_init",
    "optimal_proposal",
    "euler_proposal",
    "lg_optimal_proposal",
    "lg_prior_proposal",
    "unit_adjustment",
    "fully_adapted_adjustment",
    "lg_fully_adapted_adjustment",
    "draw_ancestors",
    "filter_step",
    "filter_estimate",
]

# live-instance registry backing the memory audit: an online smoother must
# never keep clouds for more than two consecutive steps
_live_clouds: "weakref.WeakSet" = weakref.WeakSet()


@dataclass(eq=False)
class ParticleCloud:
    """Particles, unnormalized weights, and ancestor indices at one step.

    ``trans_density_mean`` keeps the per-particle averaged density estimate
    that entered the weights, so a stored weight can be recomputed and
    audited from its ingredients.
    """

    step: int
    particles: np.ndarray
    weights: np.ndarray
    ancestors: np.ndarray
    total_weight: float = field(init=False)
    trans_density_mean: np.ndarray | None = None

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.ancestors = np.asarray(self.ancestors, dtype=np.intp)
        n = len(self.particles)
        if n < 1 or len(self.weights) != n or len(self.ancestors) != n:
            raise ValueError("particles, weights, ancestors must share a length >= 1")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise WeightDegeneracyError(self.step, f"non-finite or negative weights at step {self.step}")
        if not np.any(self.weights > 0):
            raise WeightDegeneracyError(self.step)
        if np.any(self.ancestors < 0) or np.any(self.ancestors >= n):
            raise ValueError("ancestor indices out of range")
        self.total_weight = float(self.weights.sum())
        _live_clouds.add(self)

    def __len__(self) -> int:
        return len(self.particles)

    @staticmethod
    def live_count() -> int:
        return len(_live_clouds)


@dataclass(frozen=True)
class ProposalKernel:
    """Gaussian proposal with observation-dependent mean and fixed variance."""

    mean_fn: Callable  # (x, y_obs) -> mean array
    variance: float

    def sample(self, x, y_obs, rng):
        mean = self.mean_fn(np.asarray(x, dtype=float), y_obs)
        return mean + np.sqrt(self.variance) * rng.standard_normal(np.shape(mean))

    def density(self, x, x_new, y_obs):
        mean = self.mean_fn(np.asarray(x, dtype=float), y_obs)
        v = self.variance
        return np.exp(-((np.asarray(x_new, dtype=float) - mean) ** 2) / (2.0 * v)) / np.sqrt(
            2.0 * np.pi * v
        )


@dataclass(frozen=True)
class AdjustmentMultiplier:
    """Strictly positive selection multiplier for the auxiliary filter."""

    kind: str
    theta: Callable  # (x, y_obs) -> positive array


def unit_adjustment() -> AdjustmentMultiplier:
    return AdjustmentMultiplier(kind="unit", theta=lambda x, y: np.ones(np.shape(x)))


def fully_adapted_adjustment(
    model: DiffusionModel, delta: float, obs_variance: float
) -> AdjustmentMultiplier:
    """Gaussian predictive density of the next observation under the Euler kernel."""
    v = delta + obs_variance

    def theta(x, y):
        mean = np.asarray(x, dtype=float) + model.drift(x) * delta
        return np.exp(-((y - mean) ** 2) / (2.0 * v)) / np.sqrt(2.0 * np.pi * v)

    return AdjustmentMultiplier(kind="fully_adapted", theta=theta)


def lg_fully_adapted_adjustment(model: LinearGaussianModel) -> AdjustmentMultiplier:
    v = model.state_noise_variance + model.obs_variance

    def theta(x, y):
        mean = model.a * np.asarray(x, dtype=float)
        return np.exp(-((y - mean) ** 2) / (2.0 * v)) / np.sqrt(2.0 * np.pi * v)

    return AdjustmentMultiplier(kind="fully_adapted", theta=theta)


@dataclass(frozen=True)
class InitialLaw:
    """Samplable initial proposal with a density for importance correction."""

    sample: Callable  # (n, rng) -> array
    density: Callable | None = None  # x -> density values


def init_cloud(
    eta0: InitialLaw,
    chi_density: Callable | None,
    g0_density: Callable,
    n: int,
    rng,
) -> ParticleCloud:
    """Initial cloud: particles from eta0, weights chi * g0 / eta0.

    ``chi_density=None`` declares that the initial target chi equals the
    proposal eta0 (the importance ratio is then identically one), which
    also covers the point-mass initialization used by the harness.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    particles = np.asarray(eta0.sample(n, rng), dtype=float)
    weights = np.asarray(g0_density(particles), dtype=float)
    if chi_density is not None:
        if eta0.density is None:
            raise ValueError("eta0 needs a density when chi differs from it")
        weights = weights * chi_density(particles) / eta0.density(particles)
    return ParticleCloud(
        step=0, particles=particles, weights=weights, ancestors=np.arange(n)
    )


def point_mass_init(x0: float) -> InitialLaw:
    """All particles start at the known x0; weights reduce to g0(x0)."""
    return InitialLaw(sample=lambda n, rng: np.full(n, float(x0)), density=None)


def gaussian_init(mean: float, variance: float) -> InitialLaw:
    def sample(n, rng):
        return mean + np.sqrt(variance) * rng.standard_normal(n)

    def density(x):
        return np.exp(-((np.asarray(x, dtype=float) - mean) ** 2) / (2.0 * variance)) / np.sqrt(
            2.0 * np.pi * variance
        )

    return InitialLaw(sample=sample, density=density)


def optimal_proposal(model: DiffusionModel, obs_variance: float, delta: float) -> ProposalKernel:
    """Product of the Euler kernel and the Gaussian likelihood, normalized.

    Variance v = (1/delta + 1/obs_variance)^-1 and mean
    v * (euler_mean/delta + y/obs_variance) with euler_mean = x + drift(x) delta.
    """
    if delta <= 0 or obs_variance <= 0:
        raise ValueError("delta and obs_variance must be > 0")
    v = 1.0 / (1.0 / delta + 1.0 / obs_variance)

    def mean_fn(x, y):
        mu_e = x + model.drift(x) * delta
        return v * (mu_e / delta + y / obs_variance)

    return ProposalKernel(mean_fn=mean_fn, variance=v)


def euler_proposal(model: DiffusionModel, delta: float) -> ProposalKernel:
    """The prior Euler kernel itself (bootstrap proposal)."""

    def mean_fn(x, y):
        return x + model.drift(x) * delta

    return ProposalKernel(mean_fn=mean_fn, variance=delta)


def lg_optimal_proposal(model: LinearGaussianModel) -> ProposalKernel:
    sv, ov = model.state_noise_variance, model.obs_variance
    v = 1.0 / (1.0 / sv + 1.0 / ov)

    def mean_fn(x, y):
        return v * (model.a * x / sv + y / ov)

    return ProposalKernel(mean_fn=mean_fn, variance=v)


def lg_prior_proposal(model: LinearGaussianModel) -> ProposalKernel:
    def mean_fn(x, y):
        return model.a * x

    return ProposalKernel(mean_fn=mean_fn, variance=model.state_noise_variance)


def draw_ancestors(cloud: ParticleCloud, adjustment: AdjustmentMultiplier, y_next, size: int, rng):
    """Multinomial ancestor indices with probability proportional to weight * theta."""
    probs = cloud.weights * adjustment.theta(cloud.particles, y_next)
    total = probs.sum()
    if not np.isfinite(total) or total <= 0:
        raise WeightDegeneracyError(cloud.step, f"selection weights degenerate at step {cloud.step}")
    return rng.choice(len(cloud), size=size, p=probs / total)


def filter_step(
    cloud: ParticleCloud,
    estimator,
    proposal: ProposalKernel,
    adjustment: AdjustmentMultiplier,
    obs_model: ObservationModel,
    y_next,
    M: int,
    rng,
) -> ParticleCloud:
    """One auxiliary-filter step with Monte Carlo averaged random weights.

    ``estimator.average_batch`` supplies q_bar, the mean of M unbiased
    transition-density estimates from each selected ancestor to its
    proposed successor.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    n = len(cloud)
    ancestors = draw_ancestors(cloud, adjustment, y_next, n, rng)
    sources = cloud.particles[ancestors]
    new_particles = proposal.sample(sources, y_next, rng)
    q_bar = estimator.average_batch(sources, new_particles, M, rng)
    weights = (
        q_bar
        * obs_model.density(new_particles, y_next)
        / (adjustment.theta(sources, y_next) * proposal.density(sources, new_particles, y_next))
    )
    return ParticleCloud(
        step=cloud.step + 1,
        particles=new_particles,
        weights=weights,
        ancestors=ancestors,
        trans_density_mean=q_bar,
    )


def filter_estimate(cloud: ParticleCloud, h: Callable) -> float:
    """Self-normalized estimate of the filter expectation of h."""
    return float(np.dot(cloud.weights, h(cloud.particles)) / cloud.total_weight)
