"""Diffusion models with gradient drift, plus oracle and observation models.

A model packages the potential A, its drift alpha = A', the second
derivative alpha', and the phi-function (alpha^2 + alpha')/2 together with
whatever bounds on phi the density estimator needs: global two-sided
bounds (domain class D1) or a global lower bound plus an upper bound on
each half-line [m, inf) (domain class D2, reachable through the bridge
minimum).

All callables are vectorized over numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "DiffusionModel",
    "ObservationModel",
    "LampertiMap",
    "LinearGaussianModel",
    "sine_model",
    "log_growth_model",
    "lamperti",
    "simulate_data",
    "lg_transition_density",
]


@dataclass(frozen=True)
class DiffusionModel:
    potential: Callable  # A
    drift: Callable  # alpha = A'
    drift_derivative: Callable  # alpha'
    phi: Callable  # (alpha^2 + alpha')/2
    global_phi_bounds: tuple[float, float] | None
    phi_bounds_below_min: Callable | None  # m -> (L, U_m), vectorized in m
    domain_class: str  # "D1" | "D2"
    params: dict = field(default_factory=dict)
    # (inf A, sup A) when A is bounded; enables the global bound strategy
    potential_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.domain_class not in ("D1", "D2"):
            raise ValueError(f"unknown domain class {self.domain_class!r}")
        if self.domain_class == "D1" and self.global_phi_bounds is None:
            raise ValueError("D1 models need global_phi_bounds")
        if self.domain_class == "D2" and self.phi_bounds_below_min is None:
            raise ValueError("D2 models need phi_bounds_below_min")


@dataclass(frozen=True)
class ObservationModel:
    """Gaussian observation channel y = x + noise."""

    obs_variance: float

    def __post_init__(self):
        if not self.obs_variance > 0:
            raise ValueError("obs_variance must be > 0")

    def density(self, x, y):
        v = self.obs_variance
        return np.exp(-((y - x) ** 2) / (2.0 * v)) / np.sqrt(2.0 * np.pi * v)

    def log_density(self, x, y):
        v = self.obs_variance
        return -0.5 * np.log(2.0 * np.pi * v) - (y - x) ** 2 / (2.0 * v)

    def sample(self, x, rng):
        return x + np.sqrt(self.obs_variance) * rng.standard_normal(np.shape(x))


@dataclass(frozen=True)
class LampertiMap:
    eta: Callable
    eta_inverse: Callable


@dataclass(frozen=True)
class LinearGaussianModel:
    """Oracle model: x' ~ N(a x, state_noise_variance), y ~ N(x, obs_variance)."""

    a: float
    state_noise_variance: float
    obs_variance: float


def sine_model(theta: float = 0.0) -> DiffusionModel:
    """Unit-diffusion SDE with drift sin(x - theta).

    A(x) = -cos(x - theta); phi is globally bounded in [-1/2, 5/8], so the
    bridge needs no minimum conditioning (domain class D1).
    """

    def potential(x):
        return -np.cos(x - theta)

    def drift(x):
        return np.sin(x - theta)

    def drift_derivative(x):
        return np.cos(x - theta)

    def phi(x):
        c = np.cos(x - theta)
        return (1.0 - c * c + c) / 2.0

    return DiffusionModel(
        potential=potential,
        drift=drift,
        drift_derivative=drift_derivative,
        phi=phi,
        global_phi_bounds=(-0.5, 0.625),
        phi_bounds_below_min=None,
        domain_class="D1",
        params={"theta": theta},
        potential_range=(-1.0, 1.0),
    )


def log_growth_model(kappa: float, sigma: float, gamma: float) -> DiffusionModel:
    """Logistic growth diffusion after the Lamperti change of variables.

    In the transformed coordinate x = -log(z)/sigma the drift is
    alpha(x) = sigma/2 - kappa/sigma + (kappa/(gamma sigma)) exp(-sigma x).
    phi is a convex quadratic in s = exp(-sigma x), which gives closed-form
    bounds: a global lower bound at the vertex and, on each half-line
    [m, inf), an upper bound at the endpoints (domain class D2).
    """
    if sigma <= 0 or gamma <= 0:
        raise ValueError("sigma and gamma must be > 0")
    c0 = sigma / 2.0 - kappa / sigma
    c1 = kappa / (gamma * sigma)

    def potential(x):
        return c0 * x - (c1 / sigma) * np.exp(-sigma * x)

    def drift(x):
        return c0 + c1 * np.exp(-sigma * x)

    def drift_derivative(x):
        return -sigma * c1 * np.exp(-sigma * x)

    def _p(s):
        # 2*phi as a polynomial in s = exp(-sigma x)
        return c1 * c1 * s * s + c1 * (2.0 * c0 - sigma) * s + c0 * c0

    def phi(x):
        return _p(np.exp(-sigma * x)) / 2.0

    if c1 > 0:
        s_vertex = (sigma - 2.0 * c0) / (2.0 * c1)
        lower = _p(s_vertex) / 2.0 if s_vertex > 0 else c0 * c0 / 2.0
    else:
        # kappa = 0: phi is constant c0^2/2
        lower = c0 * c0 / 2.0

    def phi_bounds_below_min(m):
        m = np.asarray(m, dtype=float)
        s_hi = np.exp(-sigma * m)
        upper = np.maximum(c0 * c0, _p(s_hi)) / 2.0
        return np.broadcast_to(lower, m.shape), upper

    return DiffusionModel(
        potential=potential,
        drift=drift,
        drift_derivative=drift_derivative,
        phi=phi,
        global_phi_bounds=None,
        phi_bounds_below_min=phi_bounds_below_min,
        domain_class="D2",
        params={"kappa": kappa, "sigma": sigma, "gamma": gamma},
        potential_range=None,
    )


def lamperti(sigma: float) -> LampertiMap:
    """Change of variables x = -log(z)/sigma reducing the diffusion to unit scale."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")

    def eta(z):
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise ValueError("eta is defined on the positive axis")
        return -np.log(z) / sigma

    def eta_inverse(x):
        return np.exp(-sigma * np.asarray(x, dtype=float))

    return LampertiMap(eta=eta, eta_inverse=eta_inverse)


def simulate_data(model: DiffusionModel, obs, x0, times, substeps: int, rng):
    """Euler-Maruyama latent path plus Gaussian observations at the given times.

    ``obs`` is an ObservationModel or a plain variance (0 allowed for a
    noiseless channel). ``x0`` may be an array to simulate many paths at
    once; outputs then have shape (len(times), len(x0)).
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    obs_variance = obs.obs_variance if isinstance(obs, ObservationModel) else float(obs)
    x = np.asarray(x0, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).astype(float)
    states = np.empty((len(times), len(x)))
    states[0] = x
    for k in range(1, len(times)):
        dt = (times[k] - times[k - 1]) / substeps
        sq = np.sqrt(dt)
        for _ in range(substeps):
            x = x + model.drift(x) * dt + sq * rng.standard_normal(len(x))
        states[k] = x
    noise = rng.standard_normal(states.shape) if obs_variance > 0 else 0.0
    observations = states + np.sqrt(obs_variance) * noise
    if scalar:
        return states[:, 0], observations[:, 0]
    return states, observations


def lg_transition_density(model: LinearGaussianModel, x, y):
    """Exact Gaussian transition density of the oracle model."""
    v = model.state_noise_variance
    return np.exp(-((y - model.a * x) ** 2) / (2.0 * v)) / np.sqrt(2.0 * np.pi * v)
