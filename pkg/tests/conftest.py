import numpy as np
import pytest

from coughpipe.audio import Label, preprocess
from coughpipe.features import FeatureConfig, extract_features
from coughpipe.synth import synth_recordings

SMALL = FeatureConfig(M=13, F=512, S=70)


def synth_features(labels, patients, seed, cfg=SMALL, events=1):
    recs = synth_recordings(labels, patients, events, seed=seed)
    return [extract_features(preprocess(r), cfg) for r in recs]


@pytest.fixture(scope="session")
def cough2():
    """Separable TB/COVID feature matrices: train and validation sets."""
    labels = [Label.TB, Label.COVID19]
    return synth_features(labels, 12, 21), synth_features(labels, 8, 22)


@pytest.fixture(scope="session")
def cough3():
    labels = [Label.TB, Label.COVID19, Label.HEALTHY]
    return synth_features(labels, 8, 31)
