import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coughpipe.audio import Label
from coughpipe.balance import (
    LeakageError,
    SmoteConfig,
    class_counts,
    nearest_neighbors,
    smote,
    target_counts,
)
from coughpipe.features import FeatureConfig, FeatureMatrix
from oracles import convex_residual

CFG = FeatureConfig(M=1, F=16, S=2)  # 5 x 2 matrices


def examples(counts, seed=0, fold="train"):
    rng = np.random.default_rng(seed)
    out = []
    for lab, n in counts.items():
        for i in range(n):
            out.append(FeatureMatrix(rng.standard_normal((5, 2)), CFG, f"{lab.token}{i}",
                                     f"{lab.token}-p{i}", lab, fold=fold))
    return out


def test_equalises_to_majority():
    data = examples({Label.TB: 10, Label.COVID19: 4, Label.HEALTHY: 7})
    out = smote(data, SmoteConfig(k_neighbors=3, seed=1))
    assert class_counts(out) == {Label.TB: 10, Label.COVID19: 10, Label.HEALTHY: 10}
    assert out[: len(data)] == data
    synth = out[len(data):]
    assert all(fm.synthetic and fm.patient_id == "synthetic" and fm.fold == "train" for fm in synth)
    assert [fm.event_id for fm in synth if fm.label is Label.COVID19][:2] == ["smote-covid19-0",
                                                                              "smote-covid19-1"]


def test_balanced_input_unchanged():
    data = examples({Label.TB: 4, Label.COVID19: 4})
    assert smote(data) == data


def test_explicit_targets():
    counts = {Label.TB: 5, Label.COVID19: 2}
    assert target_counts(counts, SmoteConfig(target_counts={Label.COVID19: 9})) == {
        Label.TB: 5, Label.COVID19: 9}
    with pytest.raises(ValueError, match="below"):
        target_counts(counts, SmoteConfig(target_counts={Label.TB: 1}))


def test_rejects_untagged_or_test_examples():
    with pytest.raises(LeakageError):
        smote(examples({Label.TB: 3, Label.COVID19: 2}, fold=None))
    data = examples({Label.TB: 3, Label.COVID19: 2})
    data[0] = data[0].with_fold("test")
    with pytest.raises(LeakageError):
        smote(data)


def test_single_minority_example_fails():
    with pytest.raises(ValueError, match="needs >= 2"):
        smote(examples({Label.TB: 3, Label.COVID19: 1}))


def test_k_clamped(caplog):
    out = smote(examples({Label.TB: 6, Label.COVID19: 3}), SmoteConfig(k_neighbors=5))
    assert class_counts(out)[Label.COVID19] == 6
    assert "clamped" in caplog.text


def test_nearest_neighbors_small():
    pts = np.array([[0.0], [1.0], [3.0], [10.0]])
    assert nearest_neighbors(pts, 2).tolist() == [[1, 2], [0, 2], [1, 0], [2, 1]]


def test_seeded_determinism():
    data = examples({Label.TB: 9, Label.COVID19: 3, Label.HEALTHY: 5}, seed=4)
    a = smote(data, SmoteConfig(seed=11))
    b = smote(data, SmoteConfig(seed=11))
    assert b"".join(fm.values.tobytes() for fm in a) == b"".join(fm.values.tobytes() for fm in b)
    c = smote(data, SmoteConfig(seed=12))
    assert any(x.values.tobytes() != y.values.tobytes() for x, y in zip(a, c))


@given(st.integers(2, 6), st.integers(7, 12), st.integers(1, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_synthetics_lie_on_same_class_segments(n_min, n_maj, k, seed):
    data = examples({Label.TB: n_maj, Label.COVID19: n_min}, seed=seed % 1000)
    out = smote(data, SmoteConfig(k_neighbors=k, seed=seed))
    originals = np.stack([fm.values.ravel() for fm in data if fm.label is Label.COVID19])
    for fm in out[len(data):]:
        assert fm.label is Label.COVID19
        res, lam = convex_residual(fm.values.ravel(), originals)
        assert res < 1e-9 and 0.0 <= lam <= 1.0
