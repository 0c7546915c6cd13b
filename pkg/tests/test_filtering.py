import numpy as np
import pytest
from scipy import stats

from grandparis import (
    ExactTransition,
    GPE1Estimator,
    LinearGaussianModel,
    ObservationModel,
    ParticleCloud,
    RngStream,
    WeightDegeneracyError,
    draw_ancestors,
    euler_proposal,
    filter_estimate,
    filter_step,
    fully_adapted_adjustment,
    gaussian_init,
    init_cloud,
    lg_fully_adapted_adjustment,
    lg_optimal_proposal,
    lg_prior_proposal,
    optimal_proposal,
    point_mass_init,
    sine_model,
    unit_adjustment,
)

from helpers import kalman_filter


def _gen(*key):
    return RngStream(314).derive(*key).generator()


LG = LinearGaussianModel(a=0.9, state_noise_variance=0.5, obs_variance=1.0)


def _norm_pdf(x, mean, var):
    return np.exp(-((x - mean) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)


def test_cloud_validation():
    with pytest.raises(WeightDegeneracyError):
        ParticleCloud(step=3, particles=np.zeros(4), weights=np.zeros(4), ancestors=np.zeros(4, dtype=int))
    with pytest.raises(WeightDegeneracyError):
        ParticleCloud(step=0, particles=np.zeros(2), weights=np.array([1.0, np.nan]), ancestors=np.zeros(2, dtype=int))
    with pytest.raises(ValueError):
        ParticleCloud(step=0, particles=np.zeros(2), weights=np.ones(2), ancestors=np.array([0, 5]))
    c = ParticleCloud(step=0, particles=np.zeros(3), weights=np.array([1.0, 2.0, 3.0]), ancestors=np.arange(3))
    assert c.total_weight == 6.0
    assert len(c) == 3


def test_init_cloud_point_mass():
    obs = ObservationModel(1.0)
    cloud = init_cloud(point_mass_init(1.5), None, lambda x: obs.density(x, 2.0), 50, _gen(0))
    assert np.all(cloud.particles == 1.5)
    assert np.allclose(cloud.weights, obs.density(np.asarray(1.5), 2.0))
    assert cloud.step == 0


def test_init_cloud_importance_ratio():
    # proposal eta0 != target chi: weights carry chi * g0 / eta0 exactly
    eta0 = gaussian_init(0.0, 4.0)
    chi = lambda x: _norm_pdf(x, 1.0, 1.0)
    g0 = lambda x: _norm_pdf(x, 0.5, 2.0)
    cloud = init_cloud(eta0, chi, g0, 2000, _gen(1))
    expect = chi(cloud.particles) * g0(cloud.particles) / _norm_pdf(cloud.particles, 0.0, 4.0)
    assert np.allclose(cloud.weights, expect, rtol=1e-12)
    with pytest.raises(ValueError):
        init_cloud(point_mass_init(0.0), chi, g0, 10, _gen(2))


def test_optimal_proposal_is_normalized_product():
    # p(x, z | y) must equal Euler(z) * likelihood(y|z) / predictive(y)
    m = sine_model(0.0)
    delta, obs_var = 0.5, 1.0
    prop = optimal_proposal(m, obs_var, delta)
    x, y = 0.4, -0.3
    z = np.linspace(-5, 5, 11)
    euler_mean = x + float(m.drift(np.asarray(x))) * delta
    num = _norm_pdf(z, euler_mean, delta) * _norm_pdf(y, z, obs_var)
    den = _norm_pdf(y, euler_mean, delta + obs_var)
    assert np.allclose(prop.density(x, z, y), num / den, rtol=1e-10)
    # quadrature: the density integrates to one in z
    zz = np.linspace(-8, 8, 20_001)
    total = np.trapezoid(prop.density(x, zz, y), zz)
    assert abs(total - 1.0) < 1e-8


def test_lg_optimal_proposal_matches_posterior_algebra():
    prop = lg_optimal_proposal(LG)
    x, y = 1.0, 0.2
    q, r, a = LG.state_noise_variance, LG.obs_variance, LG.a
    v = 1.0 / (1.0 / q + 1.0 / r)
    mean = v * (a * x / q + y / r)
    z = np.linspace(-4, 4, 9)
    assert np.allclose(prop.density(x, z, y), _norm_pdf(z, mean, v), rtol=1e-12)


def test_proposal_sampling_matches_density():
    m = sine_model(0.0)
    prop = optimal_proposal(m, 1.0, 0.5)
    rng = _gen(3)
    x, y = 0.7, 1.2
    draws = np.array([prop.sample(x, y, rng) for _ in range(50_000)])
    mean = prop.mean_fn(x, y)
    sd = np.sqrt(prop.variance)
    assert stats.kstest((draws - mean) / sd, "norm").statistic < 0.01


def test_euler_proposal_moments():
    m = sine_model(0.0)
    prop = euler_proposal(m, 0.5)
    x = 0.3
    assert abs(prop.mean_fn(x, None) - (x + np.sin(x) * 0.5)) < 1e-12
    assert prop.variance == 0.5


def test_draw_ancestors_frequencies():
    weights = np.array([0.1, 0.4, 0.2, 0.3])
    cloud = ParticleCloud(step=0, particles=np.arange(4.0), weights=weights, ancestors=np.arange(4))
    counts = np.bincount(
        draw_ancestors(cloud, unit_adjustment(), 0.0, 200_000, _gen(4)), minlength=4
    )
    p = stats.chisquare(counts, 200_000 * weights).pvalue
    assert p > 1e-3


def test_draw_ancestors_uses_adjustment():
    # adjustment reweights selection toward particles predicting y_next
    adj = lg_fully_adapted_adjustment(LG)
    particles = np.array([-2.0, 0.0, 2.0])
    cloud = ParticleCloud(step=0, particles=particles, weights=np.ones(3), ancestors=np.arange(3))
    y_next = 2.0
    probs = adj.theta(particles, y_next)
    probs = probs / probs.sum()
    counts = np.bincount(draw_ancestors(cloud, adj, y_next, 100_000, _gen(5)), minlength=3)
    assert stats.chisquare(counts, 100_000 * probs).pvalue > 1e-3


def test_draw_ancestors_degenerate_adjustment():
    cloud = ParticleCloud(step=0, particles=np.zeros(3), weights=np.ones(3), ancestors=np.arange(3))
    from grandparis import AdjustmentMultiplier

    zero = AdjustmentMultiplier(kind="zero", theta=lambda x, y: np.zeros(np.shape(x)))
    with pytest.raises(WeightDegeneracyError):
        draw_ancestors(cloud, zero, 0.0, 5, _gen(6))


def test_filter_step_weight_audit():
    # stored weights must reproduce q_bar * g / (theta * proposal density)
    m = sine_model(0.0)
    obs = ObservationModel(1.0)
    est = GPE1Estimator(m, 0.5)
    prop = optimal_proposal(m, 1.0, 0.5)
    adj = fully_adapted_adjustment(m, 0.5, 1.0)
    cloud = init_cloud(point_mass_init(0.0), None, lambda x: obs.density(x, 0.1), 300, _gen(7))
    y_next = 0.6
    new = filter_step(cloud, est, prop, adj, obs, y_next, 8, _gen(8))
    sources = cloud.particles[new.ancestors]
    expect = (
        new.trans_density_mean
        * obs.density(new.particles, y_next)
        / (adj.theta(sources, y_next) * prop.density(sources, new.particles, y_next))
    )
    assert np.allclose(new.weights, expect, rtol=1e-12)
    assert new.step == cloud.step + 1


def test_bootstrap_weights_reduce_to_likelihood():
    # prior proposal + unit adjustment + exact density: weight == g(x_new, y)
    est = ExactTransition.from_lg(LG)
    prop = lg_prior_proposal(LG)
    obs = ObservationModel(LG.obs_variance)
    cloud = init_cloud(point_mass_init(0.5), None, lambda x: obs.density(x, 0.5), 400, _gen(9))
    y_next = -0.2
    new = filter_step(cloud, est, prop, unit_adjustment(), obs, y_next, 1, _gen(10))
    assert np.allclose(new.weights, obs.density(new.particles, y_next), rtol=1e-12)


def test_filter_tracks_kalman_moments():
    # one long run at N = 10^4 stays glued to the exact filter
    rng_data = _gen(11)
    n = 51
    x = np.empty(n)
    x[0] = 0.0
    for k in range(1, n):
        x[k] = LG.a * x[k - 1] + np.sqrt(LG.state_noise_variance) * rng_data.standard_normal()
    y = x + rng_data.standard_normal(n)
    means, covs, _, _ = kalman_filter(LG, y, 0.0)
    est = ExactTransition.from_lg(LG)
    prop = lg_optimal_proposal(LG)
    obs = ObservationModel(LG.obs_variance)
    adj = lg_fully_adapted_adjustment(LG)
    cloud = init_cloud(point_mass_init(0.0), None, lambda v: obs.density(v, y[0]), 10_000, _gen(12))
    errs = []
    for k in range(1, n):
        cloud = filter_step(cloud, est, prop, adj, obs, y[k], 1, _gen(13, k))
        pf_mean = filter_estimate(cloud, lambda v: v)
        errs.append((pf_mean - means[k]) / np.sqrt(covs[k]))
    errs = np.asarray(errs)
    # per-step error a few particle standard errors wide; sd(filter)/sqrt(N) ~ 0.01 sd
    assert np.max(np.abs(errs)) < 0.12
    assert abs(errs.mean()) < 0.02
    # weighted second moment approximates the filter variance
    var_pf = filter_estimate(cloud, lambda v: v**2) - filter_estimate(cloud, lambda v: v) ** 2
    assert abs(var_pf / covs[-1] - 1.0) < 0.15


def test_filter_unbiased_replicated_t_test():
    rng_data = _gen(14)
    n = 11
    x = np.empty(n)
    x[0] = 0.0
    for k in range(1, n):
        x[k] = LG.a * x[k - 1] + np.sqrt(LG.state_noise_variance) * rng_data.standard_normal()
    y = x + rng_data.standard_normal(n)
    means, covs, _, _ = kalman_filter(LG, y, 0.0)
    est = ExactTransition.from_lg(LG)
    prop = lg_optimal_proposal(LG)
    obs = ObservationModel(LG.obs_variance)
    adj = lg_fully_adapted_adjustment(LG)
    finals = []
    for r in range(40):
        cloud = init_cloud(point_mass_init(0.0), None, lambda v: obs.density(v, y[0]), 500, _gen(15, r, 0))
        for k in range(1, n):
            cloud = filter_step(cloud, est, prop, adj, obs, y[k], 1, _gen(15, r, k))
        finals.append(filter_estimate(cloud, lambda v: v))
    finals = np.asarray(finals)
    t = (finals.mean() - means[-1]) / (finals.std(ddof=1) / np.sqrt(len(finals)))
    assert abs(t) < 4.0


def test_filter_m1_and_m30_agree_in_mean():
    # the weight average over M draws does not change the filter law
    m = sine_model(0.0)
    obs = ObservationModel(1.0)
    est = GPE1Estimator(m, 0.5)
    prop = optimal_proposal(m, 1.0, 0.5)
    adj = fully_adapted_adjustment(m, 0.5, 1.0)
    y = np.array([0.0, 0.4, -0.2, 0.8, 0.3, -0.5, 0.1])
    finals = {1: [], 30: []}
    for M in (1, 30):
        for r in range(24):
            cloud = init_cloud(point_mass_init(0.0), None, lambda v: obs.density(v, y[0]), 250, _gen(16, M, r))
            for k in range(1, len(y)):
                cloud = filter_step(cloud, est, prop, adj, obs, y[k], M, _gen(17, M, r, k))
            finals[M].append(filter_estimate(cloud, lambda v: v))
    a = np.asarray(finals[1])
    b = np.asarray(finals[30])
    se = np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    assert abs(a.mean() - b.mean()) < 4 * se


def test_filter_estimate_is_weighted_mean():
    cloud = ParticleCloud(
        step=0,
        particles=np.array([1.0, 2.0, 3.0]),
        weights=np.array([1.0, 1.0, 2.0]),
        ancestors=np.arange(3),
    )
    assert abs(filter_estimate(cloud, lambda v: v) - 2.25) < 1e-15
    assert abs(filter_estimate(cloud, lambda v: v**2) - (1 + 4 + 18) / 4.0) < 1e-15
