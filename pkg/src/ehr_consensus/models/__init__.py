from .evaluate import (
    ABLATION_SUBSETS,
    METRIC_NAMES,
    Metrics,
    MetricsReport,
    UndefinedMetricError,
    ablation_run,
    auc_score,
    compute_metrics,
    kfold_evaluate,
    stratified_folds,
)
from .train import (
    TRAINERS,
    ConstantPredictor,
    DenoisingEncoder,
    Predictor,
    TrainSpec,
    corrupt_mask,
    pretrain_denoising_autoencoder,
    sample_weights,
    train_deep_patient,
    train_logistic,
    train_recurrent,
)

__all__ = [
    "ABLATION_SUBSETS", "METRIC_NAMES", "Metrics", "MetricsReport", "UndefinedMetricError",
    "ablation_run", "auc_score", "compute_metrics", "kfold_evaluate", "stratified_folds",
    "TRAINERS", "ConstantPredictor", "DenoisingEncoder", "Predictor", "TrainSpec", "corrupt_mask",
    "pretrain_denoising_autoencoder", "sample_weights", "train_deep_patient", "train_logistic",
    "train_recurrent",
]
