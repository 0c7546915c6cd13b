"""Independent oracles used by the tests.

Everything here is computed by a different route than the library code
under test: closed-form Gaussian recursions, brute-force discretized
bridges, or direct definitional formulas.
"""
from dataclasses import dataclass

import numpy as np

from grandparis import LinearGaussianModel


def kalman_filter(model: LinearGaussianModel, observations, x0):
    """Exact filter moments for x' ~ N(a x, q), y ~ N(x, r), x_0 = x0 known.

    Returns (filter_means, filter_covs, pred_means, pred_covs); the
    prediction arrays hold the one-step-ahead moments used at each update
    (index 0 is the deterministic initial state).
    """
    a, q, r = model.a, model.state_noise_variance, model.obs_variance
    y = np.asarray(observations, dtype=float)
    n = len(y)
    means = np.empty(n)
    covs = np.empty(n)
    pred_means = np.empty(n)
    pred_covs = np.empty(n)
    pred_means[0], pred_covs[0] = x0, 0.0
    means[0], covs[0] = x0, 0.0
    for k in range(1, n):
        pm = a * means[k - 1]
        pc = a * a * covs[k - 1] + q
        gain = pc / (pc + r)
        means[k] = pm + gain * (y[k] - pm)
        covs[k] = (1.0 - gain) * pc
        pred_means[k], pred_covs[k] = pm, pc
    return means, covs, pred_means, pred_covs


def rts_smoother(model: LinearGaussianModel, observations, x0):
    """Smoothed means/covs plus lag-one covariances cov(x_k, x_{k+1} | y)."""
    means, covs, pred_means, pred_covs = kalman_filter(model, observations, x0)
    a = model.a
    n = len(means)
    sm = means.copy()
    sc = covs.copy()
    lag_one = np.zeros(max(n - 1, 0))
    for k in range(n - 2, -1, -1):
        gain = covs[k] * a / pred_covs[k + 1]
        sm[k] = means[k] + gain * (sm[k + 1] - pred_means[k + 1])
        sc[k] = covs[k] + gain * gain * (sc[k + 1] - pred_covs[k + 1])
        lag_one[k] = gain * sc[k + 1]
    return sm, sc, lag_one


def pair_sum_truth(model: LinearGaussianModel, observations, x0) -> float:
    """E[sum_k x_k x_{k+1} | y] in closed form."""
    sm, sc, lag_one = rts_smoother(model, observations, x0)
    return float(np.sum(sm[:-1] * sm[1:] + lag_one))


def em_truth(model: LinearGaussianModel, observations, x0) -> float:
    """Smoothed expectation of the complete-data log-likelihood.

    Matches the library's EM functional: all observation log-densities
    (including time 0) plus all transition log-densities; the point-mass
    initial law contributes nothing.
    """
    a, q, r = model.a, model.state_noise_variance, model.obs_variance
    sm, sc, lag_one = rts_smoother(model, observations, x0)
    y = np.asarray(observations, dtype=float)
    obs_part = np.sum(-0.5 * np.log(2.0 * np.pi * r) - ((y - sm) ** 2 + sc) / (2.0 * r))
    e2 = (
        (sm[1:] - a * sm[:-1]) ** 2
        + sc[1:]
        + a * a * sc[:-1]
        - 2.0 * a * lag_one
    )
    trans_part = np.sum(-0.5 * np.log(2.0 * np.pi * q) - e2 / (2.0 * q))
    return float(obs_part + trans_part)


def smoothed_pair_products(model: LinearGaussianModel, observations, x0):
    """Per-transition E[x_k x_{k+1} | y]; the summands of pair_sum_truth."""
    sm, sc, lag_one = rts_smoother(model, observations, x0)
    return sm[:-1] * sm[1:] + lag_one


@dataclass
class UniformNoisedEstimator:
    """Exact density times an independent Uniform[1-width, 1+width] factor.

    An artificial positive unbiased estimator with known law, used to test
    accept-reject correctness without any bridge machinery.
    """

    base: object
    width: float = 0.5

    def draw_batch(self, x, y, rng):
        q = self.base.draw_batch(x, y, rng)
        return q * rng.uniform(1.0 - self.width, 1.0 + self.width, size=np.shape(q))

    def average_batch(self, x, y, M, rng):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        draws = self.draw_batch(np.repeat(x, M), np.repeat(y, M), rng)
        return draws.reshape(len(x), M).mean(axis=1)

    def log_mean_batch(self, x, y, M, rng):
        return np.log(self.average_batch(x, y, M, rng))

    def global_bound(self):
        return self.base.global_bound() * (1.0 + self.width)

    def source_bound(self, sources):
        return self.base.source_bound(sources) * (1.0 + self.width)

    def pairwise_bound(self, sources, targets):
        return self.base.pairwise_bound(sources, targets) * (1.0 + self.width)


def brownian_bridge_paths(x, y, delta, n_paths, n_grid, rng):
    """Discretized Brownian bridges x -> y on [0, delta].

    Returns (ts, paths) with paths of shape (n_paths, n_grid + 1); the
    endpoints are exact.
    """
    ts = np.linspace(0.0, delta, n_grid + 1)
    dw = rng.standard_normal((n_paths, n_grid)) * np.sqrt(delta / n_grid)
    w = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dw, axis=1)], axis=1)
    frac = ts / delta
    return ts, x + frac * (y - x) + w - frac * w[:, -1:]


def bridge_discretization_density(
    model, x, y, delta, n_bridges, n_grid, rng, chunk=2000
):
    """Transition density by brute force: Girsanov weight on discretized bridges.

    q(x, y) = N(y; x, delta) * exp(A(y) - A(x)) * E[exp(-int phi(bridge))],
    with the integral approximated by the trapezoid rule on n_grid + 1
    points. Returns (estimate, standard_error).
    """
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_bridges:
        b = min(chunk, n_bridges - done)
        ts, paths = brownian_bridge_paths(x, y, delta, b, n_grid, rng)
        integrals = np.trapezoid(model.phi(paths), ts, axis=1)
        vals = np.exp(-integrals)
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += b
    mean = total / n_bridges
    var = max(total_sq / n_bridges - mean * mean, 0.0)
    gauss = np.exp(-((y - x) ** 2) / (2.0 * delta)) / np.sqrt(2.0 * np.pi * delta)
    pref = gauss * np.exp(model.potential(y) - model.potential(x))
    return pref * mean, pref * np.sqrt(var / n_bridges)


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())
