"""Inference in multi-layer stochastic generative networks.

Estimate the input and hidden activations of a known alternating
linear/nonlinear chain from its observed output, predict the per-iteration
reconstruction error with a scalar state-evolution recursion, and compare
against MAP / Langevin-sampling baselines.
"""
from .engine import (
    EngineOptions,
    IterationRecord,
    MessageState,
    backward_pass,
    forward_pass,
    init_state,
    precision_update,
    extrinsic_mean,
    run,
)
from .errors import (
    ConfigError,
    DivergenceError,
    EngineError,
    MlvampError,
    MonteCarloError,
    QuadratureError,
)
from .experiment import (
    ExperimentConfig,
    ExperimentResult,
    nmse_db,
    paper_config,
    run_baseline_comparison,
    run_iteration_experiment,
    run_measurement_sweep,
)
from .network import (
    LinearStage,
    NetworkSpec,
    NonlinearStage,
    Trajectory,
    build_synthetic_network,
    empirical_layer_moments,
    load_network,
    sample_trajectory,
    save_network,
    svd_decompose_stage,
)
from .scalar_denoiser import (
    DenoiseResult,
    ScalarChannel,
    denoise_input,
    denoise_middle,
    denoise_output_nonlinear,
    mc_oracle_moments,
)
from .linear_denoiser import (
    ComponentSolve,
    component_solve,
    denoise_linear,
    denoise_linear_observed,
)
from .state_evolution import (
    LayerStatistics,
    SEState,
    compute_tau0,
    predicted_nmse_db,
    run_se,
    stats_from_network,
)

__version__ = "0.1.0"
