"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""

import dataclasses
import json
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from coughpipe.audio import PRETRAIN_LABELS, Label, Recording, preprocess
from coughpipe.balance import SmoteConfig, class_counts, smote
from coughpipe.cli import main
from coughpipe.evalcv import (
    aggregate,
    auc,
    f1_score,
    make_folds,
    roc_curve,
    sensitivity_at_specificity,
    who_triage_check,
)
from coughpipe.evalcv.nested import nested_cv
from coughpipe.features import (
    FeatureConfig,
    FeatureMatrix,
    delta,
    extract_features,
    feature_grid,
    kurtosis_frame,
    mfcc_frame,
    zcr_frame,
)
from coughpipe.models import (
    CLASS_ORDER,
    ClassifierConfig,
    TrainConfig,
    backbone_checksum,
    backbone_keys,
    build_cnn,
    finetune,
    head_swap,
    pretrain,
    pretrained_standardizer,
    train,
)
from coughpipe.nn import Network, gradient_check
from coughpipe.synth import synth_recordings, write_dataset
from oracles import (
    brute_auc,
    brute_f1,
    brute_sensitivity,
    convex_residual,
    reference_delta,
    reference_kurtosis,
    reference_mfcc,
    reference_zcr,
)
from toynets import TOY_NETS

DATA = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture
def verdict(request, capsys):
    """Call with (passed, detail); prints the criterion line and fails the test on FAIL."""

    def report(passed: bool, detail: str):
        name = request.node.name.removeprefix("test_")
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        assert passed, detail

    return report


def recording(x, label=Label.TB):
    return Recording(np.asarray(x, dtype=np.float64), 16000, "e", "p", label)


def test_01_feature_shapes(verdict):
    rng = np.random.default_rng(1)
    lengths = [int(0.3 * 16000), int(1.7 * 16000), int(4.2 * 16000)]
    signals = [rng.uniform(-0.5, 0.5, n) for n in lengths]
    grid = feature_grid()
    start = time.perf_counter()
    bad = []
    for cfg in grid:
        for x in signals:
            v = extract_features(recording(x), cfg).values
            if v.shape != (3 * cfg.M + 2, cfg.S) or not np.all(np.isfinite(v)):
                bad.append((cfg.M, cfg.F, cfg.S, len(x)))
    elapsed = time.perf_counter() - start
    verdict(len(grid) == 100 and not bad and elapsed < 120,
            f"{len(grid)} configs x 3 lengths, {len(bad)} bad, {elapsed:.1f} s (< 120 s)")


def test_02_mfcc_gain_invariance(verdict):
    rng = np.random.default_rng(2)
    cfg = FeatureConfig(M=39, F=1024, S=150)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-0.45, 0.45, cfg.F) * rng.uniform(0.05, 1.0)
        a, b = mfcc_frame(x, cfg), mfcc_frame(2 * x, cfg)
        worst = max(worst, float(np.max(np.abs(a[1:] - b[1:]))))
    verdict(worst <= 1e-6, f"max |c_k(2x) - c_k(x)|, k >= 1, over 100 signals = {worst:.2e} (<= 1e-6)")


def test_03_dsp_oracles(verdict):
    rng = np.random.default_rng(3)
    cfg = FeatureConfig(M=13, F=512, S=70)
    t = np.arange(cfg.F) / 16000
    mfcc_rel = 0.0
    for freq in (125.0, 440.0, 1000.0, 2500.0, 6000.0):
        got = mfcc_frame(0.3 * np.sin(2 * np.pi * freq * t), cfg)
        want = reference_mfcc(0.3 * np.sin(2 * np.pi * freq * t), 16000, 13)
        mfcc_rel = max(mfcc_rel, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12))))
    rows = rng.normal(size=(6, 40))
    d_err = float(np.max(np.abs(delta(rows) - reference_delta(rows))))
    z_err = k_err = 0.0
    for _ in range(50):
        x = rng.normal(size=int(rng.integers(8, 300)))
        z_err = max(z_err, abs(zcr_frame(x) - reference_zcr(x)))
        k_err = max(k_err, abs(kurtosis_frame(x) - reference_kurtosis(x)))
    ok = mfcc_rel <= 1e-6 and max(d_err, z_err, k_err) <= 1e-9
    verdict(ok, f"MFCC rel err {mfcc_rel:.1e} (<= 1e-6); delta {d_err:.1e}, ZCR {z_err:.1e}, "
                f"kurtosis {k_err:.1e} (<= 1e-9)")


def test_04_smote_geometry(verdict):
    rng = np.random.default_rng(4)
    cfg = FeatureConfig(M=1, F=16, S=2)
    counts = {Label.TB: 520, Label.COVID19: 20, Label.HEALTHY: 20}
    data = [FeatureMatrix(rng.normal(size=(5, 2)), cfg, f"{lab.token}{i}", f"{lab.token}-p{i}", lab,
                          fold="train")
            for lab, n in counts.items() for i in range(n)]
    out = smote(data, SmoteConfig(k_neighbors=5, seed=9))
    synth = [fm for fm in out if fm.synthetic]
    originals = {lab: np.array([fm.values.ravel() for fm in data if fm.label is lab]) for lab in counts}
    worst = max(convex_residual(fm.values.ravel(), originals[fm.label])[0] for fm in synth)
    exact = class_counts(out) == {lab: 520 for lab in counts}
    again = smote(data, SmoteConfig(k_neighbors=5, seed=9))
    same = all(a.values.tobytes() == b.values.tobytes() for a, b in zip(out, again))
    ok = len(synth) == 1000 and worst < 1e-9 and exact and same
    verdict(ok, f"{len(synth)} synthetics, worst residual {worst:.1e} (< 1e-9), "
                f"equalised counts {exact}, byte-identical rerun {same}")


def test_05_gradient_checks(verdict):
    worst = {}
    for name, make in TOY_NETS.items():
        spec = make()
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4,) + spec.input_shape)
        y = rng.integers(spec.classes, size=4)
        report = gradient_check(Network(spec, seed=1), x, y)
        worst[name] = max(report.max_rel_error.values())
    ok = all(v < 1e-4 for v in worst.values())
    verdict(ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (< 1e-4)")


def test_06_fold_integrity(verdict):
    rng = np.random.default_rng(6)
    violations = strat_errors = 0
    for trial in range(1000):
        labels = list(CLASS_ORDER[3] if rng.random() < 0.5 else CLASS_ORDER[2])
        pats = {f"{lab.token}-{i}": lab for lab in labels for i in range(int(rng.integers(5, 41)))}
        plan = make_folds(pats, 5, 4, seed=trial)
        violations += len(plan.violations())
        totals = Counter(pats.values())
        for fold in plan.outer_test:
            per = Counter(pats[p] for p in fold)
            strat_errors += sum(per[lab] not in (n // 5, -(-n // 5)) for lab, n in totals.items())
    # end to end: only original events are ever scored
    recs = synth_recordings([Label.TB, Label.COVID19], 6, 1, seed=60)
    res = nested_cv(recs, [FeatureConfig(13, 512, 20)],
                    [ClassifierConfig(dropout=0.1, learning_rate=1e-4, batch_size=64)], "cnn", seed=0,
                    train_cfg=TrainConfig(max_epochs=2, patience=2, dtype="float32"), outer_k=2, inner_k=2)
    scored = sorted(s.event_id for s in res.scores)
    clean = scored == sorted(r.event_id for r in recs)
    ok = violations == 0 and strat_errors == 0 and clean
    verdict(ok, f"1000 plans: {violations} overlap/coverage violations, {strat_errors} stratification "
                f"errors; test folds hold only original events: {clean}")


def test_07_metric_oracles(verdict):
    rng = np.random.default_rng(7)
    auc_err = f1_err = sens_err = 0.0
    triage_mismatch = 0
    for _ in range(200):
        n = int(rng.integers(4, 40))
        truth = rng.integers(0, 2, n)
        truth[:2] = [0, 1]
        scores = np.round(rng.random(n) * rng.choice([5, 20, 1000]), 0) / 1000
        roc = roc_curve(scores, truth)
        auc_err = max(auc_err, abs(auc(roc) - brute_auc(scores, truth)))
        for spec_ in (0.7, 0.8, 0.5):
            sens_err = max(sens_err, abs(sensitivity_at_specificity(roc, spec_)
                                         - brute_sensitivity(scores, truth, spec_)))
        triage_mismatch += who_triage_check(roc).passed != (brute_sensitivity(scores, truth, 0.7) >= 0.9)
        pred = rng.integers(0, 3, n)
        true3 = rng.integers(0, 3, n)
        f1_err = max(f1_err,
                     abs(f1_score(pred, true3, "macro", n_classes=3) - brute_f1(pred, true3, 3)),
                     abs(f1_score(pred, true3, positive=1) - brute_f1(pred, true3, 3, positive=1)))
    ok = auc_err <= 1e-9 and f1_err <= 1e-12 and sens_err <= 1e-12 and triage_mismatch == 0
    verdict(ok, f"AUC err {auc_err:.1e} (<= 1e-9), F1 err {f1_err:.1e}, sensitivity err {sens_err:.1e}, "
                f"triage mismatches {triage_mismatch}")


def test_08_event_aggregation(verdict):
    rng = np.random.default_rng(8)
    err = 0.0
    for _ in range(200):
        p = rng.dirichlet(np.ones(int(rng.integers(2, 4))), int(rng.integers(1, 300)))
        want = [sum(p[:, c]) / len(p) for c in range(p.shape[1])]
        err = max(err, float(np.max(np.abs(aggregate(p) - want))))
    const = all(aggregate(np.tile([q, 1 - q], (n, 1)))[0] == q
                for q in (0.1, 0.3, 0.7, 1 / 3, 0.123456789) for n in (1, 7, 150))
    verdict(err <= 1e-12 and const, f"max deviation from frame means {err:.1e} (<= 1e-12); "
                                    f"constant events exact: {const}")


@pytest.mark.slow
def test_09_end_to_end_separable(verdict, tmp_path, capsys):
    out = tmp_path / "cv"
    start = time.perf_counter()
    code = main(["cv", "--config", str(DATA / "smoke_cv.json"), "--manifest",
                 str(DATA / "smoke3" / "manifest.csv"), "--task", "three_class", "--seed", "0",
                 "--out", str(out), "--cache", str(tmp_path / "cache"),
                 "--workers", str(min(4, os.cpu_count() or 1))])
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    rep = json.loads((out / "report.json").read_text()) if code == 0 else {}
    f1, sigma = rep.get("mean_f1", 0.0), rep.get("sigma_f1", 1.0)
    ok = code == 0 and f1 >= 0.90 and sigma <= 0.10 and elapsed < 600
    verdict(ok, f"3-class, 90 patients: mean macro F1 {f1:.4f} (>= 0.90), sigma {sigma:.4f} (<= 0.10), "
                f"{elapsed:.0f} s (< 600 s)")


@pytest.mark.slow
def test_10_transfer_protocol(verdict):
    cfg = FeatureConfig(13, 512, 70)

    def feats(labels, n, seed):
        return [extract_features(preprocess(r), cfg) for r in synth_recordings(labels, n, 1, seed=seed)]

    aux = feats(PRETRAIN_LABELS, 60, 5)
    pre = pretrain("cnn", aux, TrainConfig(max_epochs=60, patience=15, dtype="float32",
                                           learning_rate=1e-3, batch_size=32),
                   conv_filters=(8, 8, 8), dense_units=(64, 32)).checkpoint
    swapped = head_swap(pre, 2, seed=0)
    keys = backbone_keys(pre)
    same_backbone = backbone_checksum(swapped, keys) == backbone_checksum(pre, keys)
    head = tuple(swapped.spec.dense_units()[-2:])

    classes = CLASS_ORDER[2]
    tr, va = feats(classes, 8, 6), feats(classes, 20, 7)
    budget = 40

    def first_hit(history):
        return next((h["epoch"] for h in history if h["val_f1"] >= 0.95), budget + 1)

    tuned, scratch, final = [], [], []
    for seed in range(3):
        tc = TrainConfig(max_epochs=budget, patience=budget, seed=seed, dtype="float32",
                         learning_rate=1e-3, batch_size=8)
        net = head_swap(pre, 2, seed, dtype="float32")
        ft = finetune(net, tr, tc, validation=va, standardizer=pretrained_standardizer(pre))
        sc = train(Network(net.spec, seed + 100, np.float32), tr, tc, classes, validation=va)
        tuned.append(first_hit(ft.history))
        scratch.append(first_hit(sc.history))
        final.append(ft.checkpoint.metadata["best_val_f1"])
    ok = (same_backbone and head == (16, 2) and min(final) >= 0.95
          and np.mean(tuned) < np.mean(scratch))
    verdict(ok, f"backbone checksum preserved {same_backbone}, head {head}; epochs to val F1 >= 0.95: "
                f"fine-tuned {tuned} vs scratch {scratch}; fine-tuned best F1 {min(final):.3f}")


def test_11_early_stopping(verdict, cough2):
    tr, va = cough2
    spec = build_cnn(None, tr[0].shape, 2)
    patience = 4
    cfg = TrainConfig(max_epochs=30, patience=patience, learning_rate=0.0, dtype="float32", batch_size=32)
    res = train(spec, tr, cfg, CLASS_ORDER[2], validation=va)
    initial = Network(spec, cfg.seed, np.float32).checkpoint()
    snapshot = all(v.tobytes() == initial.params[k].tobytes() for k, v in res.checkpoint.params.items())

    # a moving run: the returned weights replay to the recorded best epoch
    moving = dataclasses.replace(cfg, learning_rate=1e-4, max_epochs=10, patience=3)
    run = train(spec, tr, moving, CLASS_ORDER[2], validation=va)
    replay = train(spec, tr, dataclasses.replace(moving, max_epochs=run.best_epoch, patience=10**6),
                   CLASS_ORDER[2], validation=va)
    best = all(v.tobytes() == replay.checkpoint.params[k].tobytes() for k, v in run.checkpoint.params.items())
    ok = res.epochs_run == patience + 1 and res.best_epoch == 1 and snapshot and best
    verdict(ok, f"constant F1: stopped after {res.epochs_run} epochs (patience {patience}), best epoch "
                f"{res.best_epoch}, initial weights returned {snapshot}; best-epoch snapshot replays {best}")


def test_12_cv_determinism(verdict, tmp_path, capsys):
    manifest = write_dataset(tmp_path / "data", [Label.TB, Label.COVID19], 8, seed=12)
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps({
        "features": {"M": [13], "F": [512], "S": [20, 30]},
        "classifier": {"conv_filters": [24], "dropout": [0.1], "batch_size": [64]},
        "train": {"max_epochs": 3, "patience": 2, "dtype": "float32"},
        "outer_k": 2, "inner_k": 2, "seed": 12,
    }))
    blobs = []
    for name in ("a", "b"):
        assert main(["cv", "--config", str(config), "--manifest", str(manifest), "--out",
                     str(tmp_path / name), "--cache", str(tmp_path / f"cache-{name}"), "--workers", "1"]) == 0
        blobs.append((tmp_path / name / "report.json").read_bytes())
    capsys.readouterr()
    verdict(blobs[0] == blobs[1], f"two cv runs, separate caches: report.json byte-identical "
                                  f"{blobs[0] == blobs[1]} ({len(blobs[0])} bytes)")
