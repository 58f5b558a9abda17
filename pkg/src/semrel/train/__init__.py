from .metrics import MetricsReport, compute_metrics, confusion_matrix, report_from_confusion
from .optim import AdamWState, adamw_step
from .trainer import (
    ABLATIONS,
    RunConfig,
    TrainingDiverged,
    ablate,
    evaluate,
    kendall_tau_batch,
    load_data,
    rank_agreement,
    train,
)

__all__ = [
    "ABLATIONS",
    "AdamWState",
    "MetricsReport",
    "RunConfig",
    "TrainingDiverged",
    "ablate",
    "adamw_step",
    "compute_metrics",
    "confusion_matrix",
    "evaluate",
    "kendall_tau_batch",
    "load_data",
    "rank_agreement",
    "report_from_confusion",
    "train",
]
