import json
from dataclasses import replace

import numpy as np
import pytest

from coughpipe.audio import Label
from coughpipe.evalcv.nested import FoldFailure, MetricsReport, RecordingFeatures, _score, nested_cv
from coughpipe.features import FeatureConfig
from coughpipe.models import ClassifierConfig, TrainConfig, build
from coughpipe.nn import Network
from coughpipe.synth import synth_recordings

FAST = TrainConfig(max_epochs=3, patience=2, dtype="float32")
CLF = [ClassifierConfig(conv_filters=24, kernel_size=2, dropout=0.1, dense_units=16,
                        learning_rate=1e-4, batch_size=64)]
TINY = [FeatureConfig(13, 512, 20)]


@pytest.fixture(scope="module")
def recs2():
    return synth_recordings([Label.TB, Label.COVID19], 8, 2, seed=41)


@pytest.fixture(scope="module")
def recs3():
    return synth_recordings([Label.TB, Label.COVID19, Label.HEALTHY], 6, 1, seed=42)


def run(recs, grid=TINY, **kw):
    opts = dict(seed=3, train_cfg=FAST, outer_k=2, inner_k=2)
    opts.update(kw)
    return nested_cv(recs, grid, CLF, "cnn", **opts)


class TestFolds:
    def test_every_event_scored_once_and_patients_disjoint(self, recs2):
        res = run(recs2)
        ids = sorted(s.event_id for s in res.scores)
        assert ids == sorted(r.event_id for r in recs2)
        tests = [set(t) for t in res.plan.outer_test]
        assert not tests[0] & tests[1]
        assert tests[0] | tests[1] == {r.patient_id for r in recs2}
        for s in res.scores:
            fold = next(i for i, t in enumerate(tests) if s.patient_id in t)
            assert s.patient_id not in res.plan.outer_train(fold)

    def test_synthetic_examples_never_scored(self, recs2):
        res = run(recs2)
        real = RecordingFeatures(recs2)(TINY[0])
        fake = [replace(real[0], synthetic=True)]
        with pytest.raises(AssertionError, match="synthetic"):
            _score(res.checkpoints[0], fake, (Label.TB, Label.COVID19))


class TestReport:
    def test_two_class_fields(self, recs2):
        rep = run(recs2).report
        assert rep.task == "two_class" and rep.architecture == "cnn"
        assert len(rep.folds) == 2
        assert rep.auc is not None and 0.0 <= rep.auc <= 1.0
        assert rep.roc["fpr"][0] == 0.0 and rep.roc["tpr"][-1] == 1.0
        assert rep.triage_pass in (True, False)
        f1s = [f["f1"] for f in rep.folds]
        assert rep.mean_f1 == pytest.approx(np.mean(f1s))
        assert rep.sigma_f1 == pytest.approx(np.std(f1s))
        for f in rep.folds:
            assert f["epochs_run"] <= FAST.max_epochs
            assert 1 <= f["best_epoch"] <= f["epochs_run"]

    def test_three_class_reports_accuracy_not_auc(self, recs3):
        rep = run(recs3).report
        assert rep.task == "three_class"
        assert rep.classes == ["TB", "COVID19", "HEALTHY"]
        assert rep.auc is None and rep.roc is None and rep.triage_pass is None
        assert 0.0 <= rep.mean_accuracy <= 1.0

    def test_json_round_trip(self, recs2):
        rep = run(recs2).report
        back = MetricsReport.from_dict(json.loads(rep.to_json()))
        assert back.to_json() == rep.to_json()

    def test_inner_loop_runs_for_every_candidate(self, recs2):
        grid = [FeatureConfig(13, 512, 20), FeatureConfig(13, 512, 30)]
        rep = run(recs2, grid=grid).report
        for f in rep.folds:
            assert len(f["inner_mean_f1"]) == 2
            best = grid[int(np.argmax(f["inner_mean_f1"]))]
            assert f["best_feature"] == {"M": best.M, "F": best.F, "S": best.S}


class TestDeterminism:
    def test_same_seed_same_report(self, recs2):
        assert run(recs2).report.to_json() == run(recs2).report.to_json()

    def test_workers_do_not_change_results(self, recs2):
        assert run(recs2, workers=2).report.to_json() == run(recs2).report.to_json()

    def test_seed_changes_folds(self, recs2):
        a, b = run(recs2, seed=1), run(recs2, seed=2)
        assert a.plan.outer_test != b.plan.outer_test


class TestFailures:
    def test_fold_failure_names_the_fold(self, recs2):
        wrong = Network(build("cnn", CLF[0], (26, 20), 3)).checkpoint()
        with pytest.raises(FoldFailure, match="fold 0"):
            run(recs2, pretrained=wrong)

    def test_labels_outside_task(self, recs3):
        with pytest.raises(ValueError, match="outside task classes"):
            run(recs3, classes=(Label.TB, Label.COVID19))

    def test_empty_grid(self, recs2):
        with pytest.raises(ValueError, match="empty"):
            nested_cv(recs2, [], CLF, "cnn")
