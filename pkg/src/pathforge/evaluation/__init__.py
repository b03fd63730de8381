from .cox import CoxPH, CoxResult, cox_fit, cox_partial_loglik, survival_target
from .evaluate import (
    COMPATIBLE,
    FRAMEWORKS,
    EvalResult,
    evaluate_task,
    is_compatible,
    load_feature_dir,
)
from .metrics import metric_auroc, metric_balanced_accuracy, metric_c_index, metric_qwk
from .mil import AttentionMIL, finetune_mil, mil_loss_and_grads
from .preprocessing import FoldStandardizer
from .probe import LinearProbe, probe_objective, train_linear_probe
from .retrieval import CaseRetrieval, retrieval_eval

__all__ = [
    "COMPATIBLE",
    "FRAMEWORKS",
    "AttentionMIL",
    "CaseRetrieval",
    "CoxPH",
    "CoxResult",
    "EvalResult",
    "FoldStandardizer",
    "LinearProbe",
    "cox_fit",
    "cox_partial_loglik",
    "evaluate_task",
    "finetune_mil",
    "is_compatible",
    "load_feature_dir",
    "metric_auroc",
    "metric_balanced_accuracy",
    "metric_c_index",
    "metric_qwk",
    "mil_loss_and_grads",
    "probe_objective",
    "retrieval_eval",
    "survival_target",
    "train_linear_probe",
]
