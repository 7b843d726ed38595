"""Dynamic latent space models for relational event counts.

Fitted by EM with an extended or unscented Kalman filter and a
Rauch-Tung-Striebel smoother in the E-step.
"""

from .em import (
    FitResult,
    SurrogateTrace,
    em_fit,
    init_locations,
    mstep_regression,
    offset_expectation,
    sigma_mle,
    static_fit,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DimensionError,
    DivergenceError,
    IngestError,
    LatentREMError,
    SingularMatrixError,
)
from .evaluate import caic, kl_out_of_fold, residuals
from .filter import filter_pass, ukf_sigma_points
from .model import (
    EffectSpec,
    LatentTrajectory,
    ModelConfig,
    NegativeBinomial,
    NetworkPanel,
    Parameters,
    Poisson,
    align_procrustes,
    jacobian,
    rate,
)
from .simulate import SimScenario, simulate_counts, simulate_scenario, simulate_trajectories
from .smoother import lag_one_cov, smooth_pass
from .study import SweepSpec, run_study

__version__ = "0.1.0"
