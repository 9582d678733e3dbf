from .folds import FoldError, FoldPlan, deal, make_folds, patient_labels
from .metrics import (
    EventScore,
    RocCurve,
    TriageResult,
    accuracy,
    aggregate,
    auc,
    classify_event,
    confusion_matrix,
    f1_score,
    roc_curve,
    sensitivity_at_specificity,
    who_triage_check,
)

_NESTED = {"MetricsReport", "NestedCVResult", "RecordingFeatures", "FoldFailure", "nested_cv"}


def __getattr__(name):
    # nested CV depends on models, which itself imports the metrics above
    if name in _NESTED:
        from . import nested

        return getattr(nested, name)
    raise AttributeError(name)
