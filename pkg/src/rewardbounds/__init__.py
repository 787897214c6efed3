"""Uncertainty-aware reward models for pairwise preference data.

Provides ensemble, dropout, and Bayesian linear reward heads over fixed
embeddings, the accuracy/calibration metric suite with the ranking score,
a synthetic generator with exact ground truth, and a sweep harness with
threshold-then-rank model selection.
"""

__version__ = "0.1.0"

from .corpus import (
    DatasetError,
    PreferenceDataset,
    PreferenceExample,
    SyntheticWorld,
    dataset_arrays,
    generate_synthetic,
    load_dataset,
    make_dataset,
    random_world,
    save_dataset,
    symmetrize,
    true_preference_probability,
)
from .heads import (
    DEFAULT_BETA,
    LaplacePosterior,
    LowRankEnsemble,
    McDropoutHead,
    MlpEnsemble,
    ModelError,
    RewardEstimate,
    ensemble_aggregate,
    laplace_fit,
    laplace_uncertainty,
    laplace_update,
    load_model,
    mc_dropout_forward,
    model_init,
    predict,
    predict_batch,
    save_model,
)
from .metrics import (
    CalibrationBins,
    MetricError,
    MetricReport,
    PredictionSet,
    PreferenceBound,
    UqConfusion,
    bound_calibration,
    confusion,
    ece,
    evaluate,
    preference_bounds,
    ranking_score,
    ranking_score_counts,
    ranking_score_rates,
    ranking_weight,
)
from .optim import (
    AdamW,
    ConvergenceError,
    LossConfig,
    TrainingDivergedError,
    TrainSchedule,
    bce_preference_loss,
    dropout_loss,
    dropout_loss_gradient,
    ensemble_loss,
    ensemble_loss_gradient,
    fit_linear_map,
    learning_rate,
    linear_map_gradient,
    linear_map_objective,
    loss_gradient,
    train,
)
from .harness import (
    CategoryWeights,
    HarnessError,
    SelectionRule,
    SweepResult,
    SweepSpec,
    aggregate_by_category,
    export_report,
    load_structured,
    rerun_manifest,
    run_sweep,
    select_candidates,
    train_candidate,
)
