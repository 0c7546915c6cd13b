"""Online particle smoothing for partially observed SDEs.

Unbiased transition-density estimation through Poisson-weighted Brownian
bridge functionals, a random-weight auxiliary particle filter, an online
backward-sampling smoother for additive functionals, a fixed-lag baseline,
and a reproducible experiment harness.
"""
from .bridges import (
    BridgeSkeleton,
    bridge_interpolate,
    sample_bessel_bridge_point,
    sample_bridge_minimum,
    sample_poisson_times,
)
from .density import (
    BoundStrategy,
    DensityEstimate,
    ExactTransition,
    GeometricKappa,
    GPE1Estimator,
    PoissonKappa,
    general_poisson_estimate,
    gpe1_batch,
    gpe1_estimate,
    log_density_estimate,
    rho,
    sigma_plus,
)
from .exceptions import (
    BackwardStallError,
    BoundViolationError,
    ConfigError,
    DegenerateKernelError,
    GrandParisError,
    MetricUndefinedError,
    StrategyUnavailableError,
    WeightDegeneracyError,
)
from .filtering import (
    AdjustmentMultiplier,
    InitialLaw,
    ParticleCloud,
    ProposalKernel,
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
    unit_adjustment,
)
from .harness import (
    ExperimentConfig,
    MetricsRow,
    ReplicateResult,
    build_model,
    compute_metrics,
    em_functional,
    emit_results,
    format_float,
    load_config,
    parse_config,
    run_experiment,
    simulate_dataset,
)
from .models import (
    DiffusionModel,
    LampertiMap,
    LinearGaussianModel,
    ObservationModel,
    lamperti,
    lg_transition_density,
    log_growth_model,
    simulate_data,
    sine_model,
)
from .rng import RngStream
from .smoothing import (
    AdditiveFunctional,
    BackwardTrialLog,
    SmootherResult,
    TauStatistics,
    backward_index,
    backward_indices_batch,
    exact_lambda,
    fixed_lag_smooth,
    pairwise_product_functional,
    paris_step,
    paris_step_exact,
    smooth_additive,
)

__version__ = "0.1.0"
