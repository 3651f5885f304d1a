"""Causal spatio-temporal sound field reconstruction and sample selection."""

from .baselines import (
    FirFilterBank,
    FreqKernelConfig,
    apply_fir_bank,
    diffuse_gram,
    fd_krr_full,
    fd_krr_trunc,
    fd_krr_windowed,
    spatial_baseline,
)
from .covariance import (
    CovarianceSet,
    Geometry,
    KernelModel,
    MediumParams,
    SourceSpectrum,
    SphereQuadrature,
    build_covariance_set,
    coherence_diffuse,
    cross_spectral_density,
    fibonacci_lattice,
    space_time_cov,
    temporal_correlation,
    windowed_cross_cov,
    windowed_cross_cov_matrix,
)
from .estimator import (
    FactorizationError,
    PosteriorModel,
    Reconstruction,
    fit_masked_posterior,
    fit_posterior,
    masked_posterior_cov,
    posterior_cov,
    posterior_mean,
    reconstruct_stream,
)
from .harness import (
    ExperimentConfig,
    SweepRecord,
    SweepResult,
    confidence_interval,
    cv_select_sigma2,
    empirical_error_variance,
    load_config,
    nmse,
    run_sweep,
)
from .selection import (
    SelectionMask,
    SelectionResult,
    greedy_select,
    project_capped_simplex,
    projected_gradient,
    prune_candidates,
    random_selection,
    recent_selection,
    select,
    selection_objective,
    selection_objective_grad,
)
from .simulator import (
    DiffuseSpec,
    ExcitationSpec,
    RirDataset,
    RoomSpec,
    add_noise_snr,
    bandlimited_noise,
    image_source_rir,
    load_rir_dataset,
    render_room,
    save_rir_dataset,
    simulate_diffuse,
)

__version__ = "0.1.0"
