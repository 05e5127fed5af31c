"""Beta / graded-response item response model for bounded test scores.

Calibration by marginal (or joint) MAP with Laplace uncertainty, real-time scoring,
information-driven adaptive test selection and replay of recorded batteries.
"""

__version__ = "0.1.0"

from .adaptive import (
    Metric,
    ReplayReport,
    Session,
    prescribe,
    record_result,
    replay,
    select_next,
    start_session,
)
from .calibration import (
    CalibratedModel,
    OptimizerConfig,
    PriorConfig,
    calibrate,
    covariance_from_hessian,
    laplace_uncertainty,
    posterior_predictive_check,
    sample_information_band,
)
from .data import (
    BoundSource,
    RawScoreTable,
    SavedModel,
    ScoreMatrix,
    TestMeta,
    compute_empirical_bounds,
    load_model,
    read_accuracy_csv,
    read_scores_csv,
    read_test_meta,
    save_model,
    scale_scores,
)
from .errors import BetacatError, NumericalError, ValidationError
from .model import (
    BoundaryCategory,
    ItemBank,
    ItemParams,
    Theta,
    beta_shapes,
    categorize,
    category_probs,
    info_per_minute,
    item_information,
    log_density,
    mean_variance,
)
from .scoring import ResponseSet, ScoringMode, batch_score, pearson_correlation, score_respondent
from .simulation import TruthSpec, default_battery, generate_dataset, grid_mle, numeric_fisher_info
from .special import trigamma
