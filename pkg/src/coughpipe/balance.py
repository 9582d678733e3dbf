"""SMOTE oversampling of minority classes inside a training fold."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .audio import Label
from .features import FeatureMatrix

log = logging.getLogger(__name__)

SYNTHETIC_PATIENT = "synthetic"


class LeakageError(ValueError):
    """Raised when held-out (test) examples reach a training-only operation."""


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    # None equalises every class to the majority count
    target_counts: Mapping[Label, int] | None = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


def target_counts(counts: Mapping[Label, int], cfg: SmoteConfig) -> dict[Label, int]:
    if cfg.target_counts is None:
        top = max(counts.values())
        return {lab: top for lab in counts}
    out = dict(counts)
    for lab, want in cfg.target_counts.items():
        have = counts.get(lab, 0)
        if want < have:
            raise ValueError(f"target count {want} for {lab.value} is below the {have} originals")
        out[lab] = want
    return out


def nearest_neighbors(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points for every row (Euclidean, stable ties)."""
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smote(examples: list[FeatureMatrix], cfg: SmoteConfig = SmoteConfig()) -> list[FeatureMatrix]:
    """Oversample minority classes with synthetic interpolants.

    Each synthetic matrix is ``x + lam * (x_nn - x)`` with ``lam ~ U[0, 1]``,
    where ``x`` is a minority example drawn uniformly and ``x_nn`` one of its
    ``k`` nearest same-class neighbours on the flattened matrices. Synthetics
    have ``synthetic=True`` and patient id ``"synthetic"``.

    Every input must carry ``fold="train"``; anything else raises LeakageError.
    Returns the originals (unchanged, same order) followed by the synthetics.
    """
    if not examples:
        return []
    bad = [fm.event_id for fm in examples if fm.fold != "train"]
    if bad:
        raise LeakageError(f"SMOTE only runs on train-tagged examples; got {bad[:3]}")
    shape = examples[0].shape
    if any(fm.shape != shape for fm in examples):
        raise ValueError("all feature matrices must share one shape")

    by_label: dict[Label, list[int]] = {}
    for i, fm in enumerate(examples):
        by_label.setdefault(fm.label, []).append(i)
    counts = {lab: len(idx) for lab, idx in by_label.items()}
    targets = target_counts(counts, cfg)
    rng = np.random.default_rng(cfg.seed)
    out = list(examples)

    for lab in sorted(by_label, key=lambda l: l.value):
        need = targets[lab] - counts[lab]
        if need <= 0:
            continue
        idx = by_label[lab]
        if len(idx) < 2:
            raise ValueError(f"class {lab.value} has {len(idx)} example(s); SMOTE needs >= 2")
        k = cfg.k_neighbors
        if k >= len(idx):
            log.warning("k_neighbors=%d clamped to %d for class %s", k, len(idx) - 1, lab.value)
            k = len(idx) - 1
        points = np.stack([examples[i].values.ravel() for i in idx])
        neighbors = nearest_neighbors(points, k)
        template = examples[idx[0]]
        for j in range(need):
            parent = int(rng.integers(len(idx)))
            nn = int(neighbors[parent, rng.integers(k)])
            lam = rng.random()
            x = points[parent]
            values = (x + lam * (points[nn] - x)).reshape(shape)
            out.append(FeatureMatrix(values, template.config, f"smote-{lab.token}-{j}",
                                     SYNTHETIC_PATIENT, lab, synthetic=True, fold="train"))
    return out


def class_counts(examples: list[FeatureMatrix]) -> dict[Label, int]:
    return dict(Counter(fm.label for fm in examples))
