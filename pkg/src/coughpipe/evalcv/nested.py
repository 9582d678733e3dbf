"""Nested cross-validation: inner folds pick (feature, classifier) settings, outer folds score them."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..audio import Label, Recording
from ..balance import SmoteConfig, smote
from ..features import FeatureConfig, FeatureMatrix, extract_features
from ..models import (
    CLASS_ORDER,
    ClassifierConfig,
    TrainConfig,
    build,
    f1_for,
    head_swap,
    label_indices,
    patient_split,
    predict_events,
    pretrained_standardizer,
    train,
)
from ..nn import Checkpoint
from .folds import FoldPlan, make_folds, patient_labels
from .metrics import (
    EventScore,
    accuracy,
    auc,
    classify_event,
    roc_curve,
    sensitivity_at_specificity,
    who_triage_check,
)

log = logging.getLogger(__name__)

FeatureSource = Callable[[FeatureConfig], Sequence[FeatureMatrix]]


class FoldFailure(RuntimeError):
    def __init__(self, fold: str, cause: BaseException):
        super().__init__(f"fold {fold} failed: {cause!r}")
        self.fold = fold


class RecordingFeatures:
    """Feature source over in-memory recordings, memoised per config."""

    def __init__(self, recordings: Sequence[Recording]):
        self.recordings = list(recordings)
        self._cache: dict[FeatureConfig, list[FeatureMatrix]] = {}

    def __call__(self, cfg: FeatureConfig) -> list[FeatureMatrix]:
        if cfg not in self._cache:
            self._cache[cfg] = [extract_features(r, cfg) for r in self.recordings]
        return self._cache[cfg]


@dataclass
class MetricsReport:
    task: str
    architecture: str
    classes: list[str]
    seed: int
    folds: list[dict]
    mean_f1: float
    sigma_f1: float
    mean_accuracy: float
    auc: float | None = None
    roc: dict | None = None
    sensitivity_at_70_specificity: float | None = None
    sensitivity_at_80_specificity: float | None = None
    triage_pass: bool | None = None
    head: list[int] | None = None
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        missing = [k for k in ("task", "architecture", "folds", "mean_f1", "sigma_f1") if k not in d]
        if missing:
            raise ValueError(f"report is missing fields {missing}")
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def roc_csv(self) -> str:
        lines = ["fpr,tpr,threshold"]
        if self.roc:
            for f, t, th in zip(self.roc["fpr"], self.roc["tpr"], self.roc["threshold"]):
                lines.append(f"{f!r},{t!r},{th}")
        return "\n".join(lines) + "\n"


@dataclass
class NestedCVResult:
    report: MetricsReport
    checkpoints: list[Checkpoint]
    scores: list[EventScore]
    plan: FoldPlan


@dataclass(frozen=True)
class CVSettings:
    classes: tuple[Label, ...]
    architecture: str
    train: TrainConfig = TrainConfig()
    smote_k: int = 5
    outer_k: int = 5
    inner_k: int = 4
    depth_blocks: int = 2
    base_filters: int = 8
    resnet_dense: int = 512
    pretrained: Checkpoint | None = None


def _tag(examples, fold):
    return [fm.with_fold(fold) for fm in examples]


def _fit(examples: Sequence[FeatureMatrix], clf: ClassifierConfig, st: CVSettings, seed: int):
    """Split off validation patients, SMOTE the rest, train one classifier."""
    n = len(st.classes)
    cfg = TrainConfig(max_epochs=st.train.max_epochs, patience=st.train.patience, seed=seed,
                      val_fraction=st.train.val_fraction, batch_size=clf.batch_size,
                      learning_rate=clf.learning_rate, dtype=st.train.dtype,
                      freeze_below=st.train.freeze_below)
    fit_part, val_part = patient_split(examples, cfg.val_fraction, seed)
    fit_part = smote(_tag(fit_part, "train"), SmoteConfig(st.smote_k, seed=seed))
    if st.pretrained is not None:
        if tuple(st.pretrained.spec.input_shape[1:]) != examples[0].shape:
            raise ValueError(
                f"pre-trained input {st.pretrained.spec.input_shape} does not match features "
                f"{examples[0].shape}"
            )
        net = head_swap(st.pretrained, n, seed, dtype=st.train.dtype)
        scaler = pretrained_standardizer(st.pretrained)
    else:
        scaler = None
        kw = {}
        if st.architecture == "resnet_mini":
            kw = dict(depth_blocks=st.depth_blocks, base_filters=st.base_filters,
                      dense_units=st.resnet_dense)
        net = build(st.architecture, clf, examples[0].shape, n, **kw)
    return train(net, fit_part, cfg, st.classes, validation=val_part, standardizer=scaler)


def _score(ckpt: Checkpoint, test: Sequence[FeatureMatrix], classes) -> list[EventScore]:
    if any(fm.synthetic for fm in test):
        raise AssertionError("synthetic example reached a test fold")
    probs = predict_events(ckpt, test)
    truth = label_indices(test, classes)
    # networks score the whole event matrix, so each event carries a single frame row
    return [EventScore(fm.event_id, fm.patient_id, int(t), p[None, :])
            for fm, t, p in zip(test, truth, probs)]


def _evaluate(scores: Sequence[EventScore], n_classes: int) -> dict:
    preds = [classify_event(s.aggregated) for s in scores]
    truth = [s.true_label for s in scores]
    out = {"f1": f1_for(preds, truth, n_classes), "accuracy": accuracy(preds, truth), "auc": None}
    if n_classes == 2 and len(set(truth)) == 2:
        out["auc"] = auc(roc_curve([s.aggregated[1] for s in scores], truth))
    return out


def _subset(examples, patients):
    keep = set(patients)
    return [fm for fm in examples if fm.patient_id in keep]


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def run_outer_fold(i: int, plan: FoldPlan, source: FeatureSource, feature_grid, classifier_grid,
                   st: CVSettings, seed: int):
    candidates = [(fc, clf) for fc in feature_grid for clf in classifier_grid]
    n = len(st.classes)
    inner_means = []
    if len(candidates) > 1:
        for c, (fc, clf) in enumerate(candidates):
            data = source(fc)
            scores = []
            for j in range(plan.inner_k):
                try:
                    train_ex = _subset(data, plan.inner_train(i, j))
                    test_ex = _subset(data, plan.inner_test[i][j])
                    res = _fit(train_ex, clf, st, _seed(seed, i, j, c))
                    evald = _evaluate(_score(res.checkpoint, test_ex, st.classes), n)
                except Exception as exc:
                    raise FoldFailure(f"{i}.{j} candidate {c}", exc) from exc
                scores.append(evald["f1"])
            inner_means.append(float(np.mean(scores)))
            log.info("outer %d candidate %d inner F1 %.4f", i, c, inner_means[-1])
        best = int(np.argmax(inner_means))
    else:
        best = 0
    fc, clf = candidates[best]
    data = source(fc)
    try:
        res = _fit(_subset(data, plan.outer_train(i)), clf, st, _seed(seed, i, 999_983))
        test = _subset(data, plan.outer_test[i])
        scores = _score(res.checkpoint, test, st.classes)
    except Exception as exc:
        raise FoldFailure(str(i), exc) from exc
    record = {
        "fold": i,
        "test_patients": len(plan.outer_test[i]),
        "test_events": len(test),
        **_evaluate(scores, n),
        "best_feature": {"M": fc.M, "F": fc.F, "S": fc.S},
        "best_classifier": clf.to_dict(),
        "inner_mean_f1": inner_means,
        "epochs_run": res.epochs_run,
        "best_epoch": res.best_epoch,
    }
    return record, res.checkpoint, scores


def nested_cv(source: FeatureSource | Sequence[Recording], feature_grid: Sequence[FeatureConfig],
              classifier_grid: Sequence[ClassifierConfig], architecture: str, seed: int = 0,
              classes: Sequence[Label] | None = None, train_cfg: TrainConfig | None = None,
              pretrained: Checkpoint | None = None, workers: int = 1, **settings) -> NestedCVResult:
    """Patient-disjoint nested cross-validation.

    For each outer fold the inner folds choose the (feature config,
    classifier config) pair with the highest mean inner F1; that pair is
    retrained on the whole outer-training set (SMOTE applied to the training
    side only) and scored on the untouched outer test patients. A grid with
    a single candidate skips the inner loop.
    """
    if not callable(source):
        source = RecordingFeatures(source)
    if not feature_grid or not classifier_grid:
        raise ValueError("empty hyperparameter grid")
    first = source(feature_grid[0])
    if classes is None:
        present = {fm.label for fm in first}
        classes = CLASS_ORDER[3] if Label.HEALTHY in present else CLASS_ORDER[2]
    classes = tuple(classes)
    unknown = {fm.label for fm in first} - set(classes)
    if unknown:
        raise ValueError(f"labels {sorted(l.value for l in unknown)} outside task classes")
    st = CVSettings(classes, architecture, train_cfg or TrainConfig(), pretrained=pretrained,
                    **settings)
    plan = make_folds(patient_labels((fm.patient_id, fm.label) for fm in first),
                      st.outer_k, st.inner_k, seed)
    args = (plan, source, list(feature_grid), list(classifier_grid), st, seed)
    if workers > 1:
        for fc in feature_grid[1:]:
            source(fc)  # extract up front so workers share one copy
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_outer_fold, i, *args) for i in range(plan.outer_k)]
            results = [f.result() for f in futures]
    else:
        results = [run_outer_fold(i, *args) for i in range(plan.outer_k)]

    records = [r[0] for r in results]
    checkpoints = [r[1] for r in results]
    scores = [s for r in results for s in r[2]]
    f1s = np.array([r["f1"] for r in records])
    n = len(classes)
    head = None
    if pretrained is not None:
        head = checkpoints[0].spec.dense_units()[-2:]
    arch_name = architecture + ("+transfer" if pretrained is not None else "")
    report = MetricsReport(
        task="two_class" if n == 2 else "three_class",
        architecture=arch_name,
        classes=[c.value for c in classes],
        seed=seed,
        folds=records,
        mean_f1=float(f1s.mean()),
        sigma_f1=float(f1s.std()),
        mean_accuracy=float(np.mean([r["accuracy"] for r in records])),
        head=head,
        settings={
            "feature_grid": [{"M": f.M, "F": f.F, "S": f.S} for f in feature_grid],
            "classifier_grid_size": len(classifier_grid),
            "outer_k": st.outer_k,
            "inner_k": st.inner_k,
            "max_epochs": st.train.max_epochs,
            "patience": st.train.patience,
            "smote_k": st.smote_k,
        },
    )
    if n == 2:
        roc = roc_curve([s.aggregated[1] for s in scores], [s.true_label for s in scores])
        triage = who_triage_check(roc)
        report.auc = auc(roc)
        report.roc = {"fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist(),
                      "threshold": [float(t) if np.isfinite(t) else "inf" for t in roc.thresholds]}
        report.sensitivity_at_70_specificity = triage.sensitivity
        report.sensitivity_at_80_specificity = sensitivity_at_specificity(roc, 0.80)
        report.triage_pass = triage.passed
    return NestedCVResult(report, checkpoints, scores, plan)
