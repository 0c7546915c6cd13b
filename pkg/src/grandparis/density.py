"""Unbiased positive transition-density estimators and their bounds.

The estimators replace the intractable transition density of a
unit-diffusion SDE with a positive unbiased Monte Carlo value built from a
Brownian bridge, a Poisson number of evaluation times, and bounds on the
phi-function along the bridge. The deterministic envelope ``rho`` bounds
every such value, which is what the accept-reject backward sampler needs.

Batch entry points draw many estimates in one numpy pass; the scalar entry
points additionally record the full auxiliary realization so a draw can be
inspected or re-evaluated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bridges import (
    BridgeSkeleton,
    bridge_interpolate,
    sample_bessel_bridge_point,
    sample_bridge_minimum,
    sample_bridge_minimum_batch,
    sequential_bridge_batch,
)
from .exceptions import ConfigError, StrategyUnavailableError
from .models import DiffusionModel, LinearGaussianModel

__all__ = [
    "EstimatorDraw",
    "DensityEstimate",
    "BoundStrategy",
    "PoissonKappa",
    "GeometricKappa",
    "rho",
    "gpe1_estimate",
    "general_poisson_estimate",
    "gpe1_batch",
    "log_density_estimate",
    "sigma_plus",
    "GPE1Estimator",
    "ExactTransition",
    "BOUND_KINDS",
]

BOUND_KINDS = ("global", "fixed_source", "pairwise")


def _gauss_log_norm(delta: float) -> float:
    return -0.5 * math.log(2.0 * math.pi * delta)


def rho(model: DiffusionModel, x, y, delta: float, phi_lower):
    """Deterministic envelope bounding every estimator draw from x to y.

    Gaussian density of y around x with variance delta, times
    exp(A(y) - A(x) - phi_lower * delta).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    log_val = (
        _gauss_log_norm(delta)
        - (y - x) ** 2 / (2.0 * delta)
        + model.potential(y)
        - model.potential(x)
        - np.asarray(phi_lower) * delta
    )
    return np.exp(log_val)


@dataclass(frozen=True)
class PoissonKappa:
    """The estimator's native choice: kappa ~ Poisson((U_w - L_w) * delta)."""

    def sample(self, rng, mean: float) -> int:
        return int(rng.poisson(mean))

    def pmf(self, k: int, mean: float) -> float:
        return math.exp(-mean) * mean**k / math.factorial(k)


@dataclass(frozen=True)
class GeometricKappa:
    """kappa ~ Geometric on {0, 1, ...}; support covers every Poisson value."""

    p: float = 0.5

    def sample(self, rng, mean: float) -> int:
        return int(rng.geometric(self.p)) - 1

    def pmf(self, k: int, mean: float) -> float:
        return self.p * (1.0 - self.p) ** k


@dataclass
class EstimatorDraw:
    """One realization of the estimator's auxiliary randomness."""

    kappa: int
    bridge: BridgeSkeleton
    times: np.ndarray
    phi_lower: float  # L_w
    phi_upper: float  # U_w
    phi_values: np.ndarray


@dataclass
class DensityEstimate:
    value: float
    draw: EstimatorDraw
    gaussian_factor: float
    exp_factor: float


def _scalar_bounds(model: DiffusionModel, skeleton: BridgeSkeleton, rng):
    """Resolve (L_w, U_w) for one bridge, recording a minimum for D2 models."""
    if model.domain_class == "D1":
        if model.global_phi_bounds is None:
            raise ConfigError("D1 model without global phi bounds")
        lo, hi = model.global_phi_bounds
        return float(lo), float(hi)
    m, t_min = sample_bridge_minimum(skeleton.start, skeleton.end, skeleton.duration, rng)
    skeleton.record_minimum(m, t_min)
    lo, hi = model.phi_bounds_below_min(np.asarray(m))
    return float(lo), float(hi)


def _draw_auxiliary(model, x, y, delta, kappa_dist, rng) -> EstimatorDraw:
    skeleton = BridgeSkeleton(start=float(x), end=float(y), duration=float(delta))
    lo, hi = _scalar_bounds(model, skeleton, rng)
    mean = (hi - lo) * delta
    kappa = kappa_dist.sample(rng, mean)
    times = rng.uniform(0.0, delta, size=kappa)
    if model.domain_class == "D1":
        values = [bridge_interpolate(skeleton, t, rng) for t in times]
    else:
        values = [sample_bessel_bridge_point(skeleton, t, rng) for t in times]
    phi_values = model.phi(np.asarray(values, dtype=float))
    return EstimatorDraw(
        kappa=kappa,
        bridge=skeleton,
        times=times,
        phi_lower=lo,
        phi_upper=hi,
        phi_values=phi_values,
    )


def gpe1_estimate(model: DiffusionModel, x, y, delta, rng) -> DensityEstimate:
    """One unbiased density estimate with Poisson((U_w - L_w) delta) points.

    The value is the envelope ``rho`` times the product of the per-point
    factors (U_w - phi(w)) / (U_w - L_w), each in [0, 1], so every draw is
    positive and bounded by the envelope.
    """
    draw = _draw_auxiliary(model, x, y, delta, PoissonKappa(), rng)
    gaussian_factor = math.exp(_gauss_log_norm(delta) - (y - x) ** 2 / (2.0 * delta))
    exp_factor = math.exp(
        float(model.potential(y)) - float(model.potential(x)) - draw.phi_lower * delta
    )
    width = draw.phi_upper - draw.phi_lower
    if draw.kappa > 0:
        factors = (draw.phi_upper - draw.phi_values) / width
        product = float(np.prod(factors))
    else:
        product = 1.0
    return DensityEstimate(
        value=gaussian_factor * exp_factor * product,
        draw=draw,
        gaussian_factor=gaussian_factor,
        exp_factor=exp_factor,
    )


def general_poisson_estimate(model, x, y, delta, kappa_dist, rng) -> DensityEstimate:
    """Unbiased density estimate under an arbitrary point-count distribution.

    Value: Gaussian factor times exp(A(y) - A(x) - U_w delta) times
    delta^kappa / (pmf(kappa) kappa!) times prod (U_w - phi(w_j)).
    """
    draw = _draw_auxiliary(model, x, y, delta, kappa_dist, rng)
    mean = (draw.phi_upper - draw.phi_lower) * delta
    pk = kappa_dist.pmf(draw.kappa, mean)
    if pk <= 0.0:
        raise ValueError(f"kappa distribution has zero mass at drawn kappa={draw.kappa}")
    gaussian_factor = math.exp(_gauss_log_norm(delta) - (y - x) ** 2 / (2.0 * delta))
    exp_factor = math.exp(
        float(model.potential(y)) - float(model.potential(x)) - draw.phi_upper * delta
    )
    product = float(np.prod(draw.phi_upper - draw.phi_values)) if draw.kappa else 1.0
    weight = delta**draw.kappa / (pk * math.factorial(draw.kappa))
    return DensityEstimate(
        value=gaussian_factor * exp_factor * weight * product,
        draw=draw,
        gaussian_factor=gaussian_factor,
        exp_factor=exp_factor,
    )


def gpe1_batch(model: DiffusionModel, x, y, delta: float, rng) -> np.ndarray:
    """Vectorized unbiased density estimates for paired arrays x[i] -> y[i]."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    B = x.shape[0]
    if B == 0:
        return np.empty(0)
    if model.domain_class == "D1":
        lo, hi = model.global_phi_bounds
        lw = np.full(B, float(lo))
        uw = np.full(B, float(hi))
        m = t_min = None
    else:
        m, t_min = sample_bridge_minimum_batch(x, y, delta, rng)
        lw, uw = model.phi_bounds_below_min(m)
        lw = np.ascontiguousarray(np.broadcast_to(lw, (B,)), dtype=float)
        uw = np.asarray(uw, dtype=float)
    lam = (uw - lw) * delta
    kappa = rng.poisson(lam)
    prod = np.ones(B)
    # rows with no evaluation points contribute a factor of one; all bridge
    # work happens on the compacted active rows only
    act = np.nonzero(kappa > 0)[0]
    if act.size:
        Ka = int(kappa[act].max())
        times = rng.uniform(0.0, delta, size=(act.size, Ka))
        mask = np.arange(Ka)[None, :] < kappa[act][:, None]
        width = np.where(uw[act] > lw[act], uw[act] - lw[act], 1.0)[:, None]
        if model.domain_class == "D1":
            vals, _, ms = sequential_bridge_batch(x[act], y[act], delta, times, mask, rng)
            phi_w = model.phi(vals)
            ratio = np.where(ms, (uw[act][:, None] - phi_w) / width, 1.0)
            prod[act] = np.prod(ratio, axis=1)
        else:
            xa, ya, ma, ta = x[act], y[act], m[act], t_min[act]
            uwa = uw[act]
            is_left = times < ta[:, None]
            s_all = np.where(is_left, ta[:, None] - times, times - ta[:, None])
            prod_a = np.ones(act.size)
            for side in (0, 1):
                side_mask = mask & (is_left if side == 0 else ~is_left)
                rows = np.nonzero(side_mask.any(axis=1))[0]
                if rows.size == 0:
                    continue
                seg_len = (ta if side == 0 else delta - ta)[rows]
                endval = ((xa - ma) if side == 0 else (ya - ma))[rows]
                n_r = rows.size
                # the three bridge components share times per row, so one
                # tiled call draws them together; identical keys sort the
                # same way in every copy, keeping the components aligned
                b_all, ts3, ms3 = sequential_bridge_batch(
                    0.0,
                    0.0,
                    np.tile(seg_len, 3),
                    np.tile(s_all[rows], (3, 1)),
                    np.tile(side_mask[rows], (3, 1)),
                    rng,
                )
                b1, b2, b3 = b_all[:n_r], b_all[n_r : 2 * n_r], b_all[2 * n_r :]
                ts, ms = ts3[:n_r], ms3[:n_r]
                ts_safe = np.where(ms, ts, 0.0)
                # rows whose minimum sits on this side's boundary carry no
                # points here (mask false); keep their lanes finite
                seg_safe = np.where(seg_len > 0.0, seg_len, 1.0)
                lin = endval[:, None] * ts_safe / seg_safe[:, None]
                radial = ma[rows][:, None] + np.sqrt((lin + b1) ** 2 + b2**2 + b3**2)
                phi_w = model.phi(radial)
                ratio = np.where(ms, (uwa[rows][:, None] - phi_w) / width[rows], 1.0)
                prod_a[rows] = prod_a[rows] * np.prod(ratio, axis=1)
            prod[act] = prod_a
    log_pref = (
        _gauss_log_norm(delta)
        - (y - x) ** 2 / (2.0 * delta)
        + model.potential(y)
        - model.potential(x)
        - lw * delta
    )
    return np.exp(log_pref) * prod


def log_density_estimate(model: DiffusionModel, x, y, delta, M: int, rng) -> float:
    """log of the arithmetic mean of M independent estimates.

    Consistent as M grows; for finite M it carries an O(1/M) downward bias
    relative to log q (Jensen), which is the approximation used inside the
    complete-data log-likelihood functional.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    vals = gpe1_batch(model, np.full(M, float(x)), np.full(M, float(y)), delta, rng)
    return float(np.log(np.mean(vals)))


@dataclass
class BoundStrategy:
    """Accept-reject bound scope: global, per-source, or realized pairs.

    ``effective_kind`` records what was actually used after falling back
    from an unavailable scope (global -> fixed_source -> pairwise).
    """

    kind: str = "pairwise"
    cached_bound: float | None = None
    effective_kind: str | None = None

    def __post_init__(self):
        if self.kind not in BOUND_KINDS:
            raise ConfigError(
                f"unknown bound strategy {self.kind!r}; expected one of {BOUND_KINDS}"
            )


def sigma_plus(strategy: BoundStrategy, estimator, sources, targets=None):
    """Resolve the dominating bound for the requested scope.

    Scalar for global/fixed_source scopes, one value per target for the
    pairwise scope. Falls back to the next weaker scope when the requested
    one has no finite bound for this estimator, recording the scope
    actually used; ``cached_bound`` keeps the scalar worst case either way.
    """
    start = BOUND_KINDS.index(strategy.kind)
    last_err = None
    for kind in BOUND_KINDS[start:]:
        try:
            if kind == "global":
                value = estimator.global_bound()
            elif kind == "fixed_source":
                value = estimator.source_bound(sources)
            else:
                value = estimator.pairwise_bound(sources, targets)
        except StrategyUnavailableError as err:
            last_err = err
            continue
        strategy.cached_bound = float(np.max(value))
        strategy.effective_kind = kind
        return value if np.ndim(value) else float(value)
    raise StrategyUnavailableError(f"no bound strategy available: {last_err}")


def _vector_golden_max(f: Callable, lo: np.ndarray, hi: np.ndarray, iters: int = 48):
    """Elementwise golden-section maximum of f on [lo, hi]; returns best values."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a = lo.astype(float).copy()
    b = hi.astype(float).copy()
    best = np.maximum(f(a), f(b))
    for _ in range(iters):
        x1 = b - invphi * (b - a)
        x2 = a + invphi * (b - a)
        f1 = f(x1)
        f2 = f(x2)
        best = np.maximum(best, np.maximum(f1, f2))
        keep_hi = f1 < f2
        a = np.where(keep_hi, x1, a)
        b = np.where(keep_hi, b, x2)
    return best


@dataclass
class GPE1Estimator:
    """Monte Carlo transition-density estimator for a diffusion over one gap.

    Wraps the batch estimator together with the envelope-based bounds the
    backward sampler needs. ``safety`` inflates numerically maximized
    bounds so a too-small constant cannot silently corrupt the sampler;
    every trial still asserts the bound at runtime.
    """

    model: DiffusionModel
    delta: float
    safety: float = 1.0 + 1e-6
    grid_points: int = 129
    golden_iters: int = 48

    def phi_lower(self) -> float:
        if self.model.domain_class == "D1":
            return float(self.model.global_phi_bounds[0])
        lo, _ = self.model.phi_bounds_below_min(np.asarray(0.0))
        return float(lo)  # the lower bound is global, independent of m

    def draw_batch(self, x, y, rng) -> np.ndarray:
        return gpe1_batch(self.model, x, y, self.delta, rng)

    def average_batch(self, x, y, M: int, rng) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        B = x.shape[0]
        vals = gpe1_batch(self.model, np.repeat(x, M), np.repeat(y, M), self.delta, rng)
        return vals.reshape(B, M).mean(axis=1)

    def log_mean_batch(self, x, y, M: int, rng) -> np.ndarray:
        return np.log(self.average_batch(x, y, M, rng))

    def global_bound(self) -> float:
        if self.model.potential_range is None:
            raise StrategyUnavailableError("potential has no finite global range")
        a_min, a_max = self.model.potential_range
        log_val = (
            _gauss_log_norm(self.delta) + a_max - a_min - self.phi_lower() * self.delta
        )
        return math.exp(log_val) * self.safety

    def source_bound(self, sources) -> float:
        """sup over y of the envelope from each source, maximized over sources."""
        x = np.asarray(sources, dtype=float)
        model = self.model
        delta = self.delta

        def g(yv):
            return -((yv - x) ** 2) / (2.0 * delta) + model.potential(yv)

        radius = 8.0 * math.sqrt(delta) + 8.0
        offsets = None
        for _ in range(48):
            offsets = np.linspace(-radius, radius, self.grid_points)
            grid = x[:, None] + offsets[None, :]
            vals = -((grid - x[:, None]) ** 2) / (2.0 * delta) + model.potential(grid)
            idx = np.argmax(vals, axis=1)
            if np.all((idx > 0) & (idx < self.grid_points - 1)):
                break
            radius *= 2.0
            if radius > 1e9:
                raise StrategyUnavailableError("envelope has no interior maximum in y")
        spacing = 2.0 * radius / (self.grid_points - 1)
        centers = x + offsets[idx]
        gmax = _vector_golden_max(g, centers - spacing, centers + spacing, self.golden_iters)
        log_bound = (
            _gauss_log_norm(delta)
            + gmax
            - model.potential(x)
            - self.phi_lower() * delta
        )
        return float(np.exp(log_bound).max()) * self.safety

    def pairwise_bound(self, sources, targets) -> np.ndarray:
        """Per-target bound: the envelope maximized over the realized sources.

        One value per target; a per-target bound keeps the accept-reject law
        intact (it is constant across candidates for a fixed target) while
        staying scale-invariant, so low-density targets keep a workable
        acceptance rate instead of paying for the best pair in the cloud.
        """
        if targets is None:
            raise ConfigError("pairwise bound needs the target particles")
        x = np.asarray(sources, dtype=float)
        y = np.asarray(targets, dtype=float)
        out = np.empty(y.shape[0])
        # chunk the targets so the pair matrix stays bounded in memory
        step = max(1, 4_000_000 // max(x.shape[0], 1))
        for i in range(0, y.shape[0], step):
            out[i : i + step] = rho(
                self.model, x[:, None], y[None, i : i + step], self.delta, self.phi_lower()
            ).max(axis=0)
        return out


@dataclass
class ExactTransition:
    """Known Gaussian transition density, as a zero-variance 'estimator'.

    Lets the filter and smoother run on oracle models where the transition
    density is available in closed form; every draw is the exact value.
    """

    a: float
    variance: float

    @classmethod
    def from_lg(cls, model: LinearGaussianModel) -> "ExactTransition":
        return cls(a=model.a, variance=model.state_noise_variance)

    def _density(self, x, y):
        v = self.variance
        return np.exp(-((y - self.a * np.asarray(x, dtype=float)) ** 2) / (2.0 * v)) / math.sqrt(
            2.0 * math.pi * v
        )

    def draw_batch(self, x, y, rng) -> np.ndarray:
        return self._density(x, y)

    def average_batch(self, x, y, M: int, rng) -> np.ndarray:
        return self._density(x, y)

    def log_mean_batch(self, x, y, M: int, rng) -> np.ndarray:
        v = self.variance
        return -0.5 * np.log(2.0 * np.pi * v) - (
            (np.asarray(y, dtype=float) - self.a * np.asarray(x, dtype=float)) ** 2
        ) / (2.0 * v)

    def global_bound(self) -> float:
        return 1.0 / math.sqrt(2.0 * math.pi * self.variance)

    def source_bound(self, sources) -> float:
        return self.global_bound()

    def pairwise_bound(self, sources, targets) -> np.ndarray:
        vals = self._density(
            np.asarray(sources, dtype=float)[:, None], np.asarray(targets, dtype=float)[None, :]
        )
        return vals.max(axis=0)
