"""Patient-disjoint, label-stratified outer/inner fold plans."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np


class FoldError(ValueError):
    pass


def patient_labels(pairs: Iterable[tuple[str, object]]) -> dict[str, object]:
    """Map each patient to its most frequent label (ties go to the smallest label value)."""
    seen: dict[str, Counter] = {}
    for pid, lab in pairs:
        seen.setdefault(pid, Counter())[lab] += 1
    out = {}
    for pid, counts in seen.items():
        top = max(counts.values())
        out[pid] = min((lab for lab, c in counts.items() if c == top), key=_label_key)
    return out


def _label_key(lab) -> str:
    return getattr(lab, "value", str(lab))


def deal(patients: Mapping[str, object], k: int, rng: np.random.Generator) -> list[list[str]]:
    """Shuffle each label's patients and deal them round-robin into ``k`` folds.

    Labels are taken in sorted order and the dealing position carries over
    from one label to the next, so fold sizes differ by at most one overall
    and per label.
    """
    by_label: dict[object, list[str]] = {}
    for pid in sorted(patients):
        by_label.setdefault(patients[pid], []).append(pid)
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for lab in sorted(by_label, key=_label_key):
        pids = by_label[lab]
        if len(pids) < k:
            raise FoldError(f"label {_label_key(lab)} has {len(pids)} patients; need >= {k}")
        for j in rng.permutation(len(pids)):
            folds[pos % k].append(pids[j])
            pos += 1
    return [sorted(f) for f in folds]


@dataclass(frozen=True)
class FoldPlan:
    patients: tuple[str, ...]
    outer_test: tuple[tuple[str, ...], ...]
    # inner_test[i][j]: inner test patients for inner fold j of outer fold i
    inner_test: tuple[tuple[tuple[str, ...], ...], ...]

    @property
    def outer_k(self) -> int:
        return len(self.outer_test)

    @property
    def inner_k(self) -> int:
        return len(self.inner_test[0]) if self.inner_test else 0

    def outer_train(self, i: int) -> tuple[str, ...]:
        test = set(self.outer_test[i])
        return tuple(p for p in self.patients if p not in test)

    def inner_train(self, i: int, j: int) -> tuple[str, ...]:
        test = set(self.inner_test[i][j])
        return tuple(p for p in self.outer_train(i) if p not in test)

    def violations(self) -> list[str]:
        """Human-readable list of broken invariants (empty when the plan is sound)."""
        problems = []
        everyone = set(self.patients)
        union = [p for fold in self.outer_test for p in fold]
        if len(union) != len(set(union)):
            problems.append("a patient appears in more than one outer test fold")
        if set(union) != everyone:
            problems.append("outer test folds do not cover every patient")
        for i in range(self.outer_k):
            train, test = set(self.outer_train(i)), set(self.outer_test[i])
            if train & test:
                problems.append(f"outer fold {i}: patient overlap")
            inner_union = [p for fold in self.inner_test[i] for p in fold]
            if len(inner_union) != len(set(inner_union)) or set(inner_union) != train:
                problems.append(f"outer fold {i}: inner folds do not partition the training patients")
            for j in range(len(self.inner_test[i])):
                if set(self.inner_train(i, j)) & set(self.inner_test[i][j]):
                    problems.append(f"fold {i}.{j}: patient overlap")
                if set(self.inner_test[i][j]) & test:
                    problems.append(f"fold {i}.{j}: outer test patient inside inner loop")
        return problems

    def to_dict(self) -> dict:
        return {"outer_test": [list(f) for f in self.outer_test],
                "inner_test": [[list(f) for f in inner] for inner in self.inner_test]}


def make_folds(patients: Mapping[str, object], outer_k: int = 5, inner_k: int = 4,
               seed: int = 0) -> FoldPlan:
    """Stratified patient folds: ``outer_k`` test folds, each outer-training set split ``inner_k`` ways."""
    if outer_k < 2 or inner_k < 2:
        raise FoldError("need at least two outer and two inner folds")
    rng = np.random.default_rng([seed, 11])
    outer = deal(patients, outer_k, rng)
    inner = []
    for i in range(outer_k):
        test = set(outer[i])
        remaining = {p: lab for p, lab in patients.items() if p not in test}
        inner.append(tuple(tuple(f) for f in deal(remaining, inner_k, rng)))
    return FoldPlan(tuple(sorted(patients)), tuple(tuple(f) for f in outer), tuple(inner))
