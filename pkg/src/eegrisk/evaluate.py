"""Stratified splitting, cross-validation, learning curves, confusion
matrices, and derived metrics.

Per-class test counts use round-half-up so the published pool sizes
(158+79, 158+31, 158+15) reproduce test totals of 48, 38, and 35.
Metrics on confusion counts are exact rational arithmetic; undefined
ratios are reported as None, never as 0. Table-level helpers sort rows
by subject_id before seeding so fold assignment is invariant to input
row order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .classify import TreeParams, train_tree
from .datamodel import FeatureTable
from .errors import (
    LabelError,
    ParameterError,
    SplitError,
    UndefinedAucError,
)
from .rng import SplitMix64, derive_seed

DEFAULT_POSITIVE_CLASS = "HC"
DEFAULT_CURVE_SIZES = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    positive_class: str = DEFAULT_POSITIVE_CLASS

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")

    @property
    def n_test(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class Metrics:
    """Exact-rational metrics; None marks an undefined ratio."""

    accuracy: Fraction
    precision: Fraction | None
    recall: Fraction | None
    f1: Fraction | None

    def as_floats(self) -> dict:
        return {k: (float(v) if v is not None else None)
                for k, v in (("accuracy", self.accuracy),
                             ("precision", self.precision),
                             ("recall", self.recall), ("f1", self.f1))}


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _class_indices(labels) -> dict[str, list[int]]:
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    return by_class


def stratified_split(table: FeatureTable, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[FeatureTable, FeatureTable]:
    """Seeded 80-20 style split preserving class proportions.

    Per class, the test count is round-half-up(n_class * test_fraction);
    members are chosen by a seeded uniform shuffle applied after a
    canonical sort by subject_id, so the split depends only on (cohort,
    seed), not input row order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(
            f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = sorted(range(table.n_records),
                   key=lambda i: table.meta[i].subject_id)
    labels = [table.meta[i].group for i in order]
    by_class = _class_indices(labels)
    test_pos: list[int] = []
    for lab in sorted(by_class):
        members = list(by_class[lab])
        if len(members) < 2:
            raise SplitError(
                f"class {lab!r} has {len(members)} record(s); cannot split")
        n_test = round_half_up(len(members) * test_fraction)
        rng = SplitMix64(derive_seed(seed, f"split:{lab}"))
        rng.shuffle(members)
        test_pos.extend(members[:n_test])
    test_set = {order[p] for p in test_pos}
    train_idx = [i for i in range(table.n_records) if i not in test_set]
    test_idx = [i for i in range(table.n_records) if i in test_set]
    return table.select_rows(train_idx), table.select_rows(test_idx)


def stratified_fold_assignment(labels, k: int, seed: int) -> np.ndarray:
    """Fold id per record: per class, seeded shuffle then round-robin deal,
    so per-class fold sizes differ by at most 1."""
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    labels = list(labels)
    folds = np.zeros(len(labels), dtype=int)
    by_class = _class_indices(labels)
    for lab in sorted(by_class):
        members = list(by_class[lab])
        rng = SplitMix64(derive_seed(seed, f"fold:{lab}"))
        rng.shuffle(members)
        for pos, idx in enumerate(members):
            folds[idx] = pos % k
    return folds


def cross_validate(values: np.ndarray, labels, params: TreeParams,
                   k: int = 10, seed: int = 0,
                   with_train_scores: bool = False):
    """Per-fold held-out accuracy of a tree under stratified k-fold CV."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    labels = list(labels)
    folds = stratified_fold_assignment(labels, k, seed)
    val_scores = []
    train_scores = []
    y = np.asarray(labels)
    for fold in range(k):
        held = folds == fold
        if not held.any() or held.all():
            continue
        model = train_tree(values[~held], y[~held], params)
        val_scores.append(model.accuracy(values[held], y[held]))
        if with_train_scores:
            train_scores.append(model.accuracy(values[~held], y[~held]))
    if with_train_scores:
        return train_scores, val_scores
    return val_scores


def cross_validate_table(table: FeatureTable, params: TreeParams,
                         k: int = 10, seed: int = 0):
    """cross_validate on a table, canonically sorted by subject_id."""
    order = sorted(range(table.n_records),
                   key=lambda i: table.meta[i].subject_id)
    sorted_table = table.select_rows(order)
    return cross_validate(sorted_table.values,
                          sorted_table.group_labels(), params, k, seed)


def learning_curve(values: np.ndarray, labels, params: TreeParams,
                   sizes=DEFAULT_CURVE_SIZES, k: int = 10, seed: int = 0
                   ) -> list[dict]:
    """Stratified-subsample learning curve.

    For each fraction, subsamples round-half-up(size * n_class) per
    class, cross-validates, and records the mean train and validation
    scores. Sizes too small to populate k folds are skipped with a
    warning.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes) or not all(0.0 < s <= 1.0 for s in sizes):
        raise ParameterError("sizes must be ascending fractions in (0, 1]")
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    labels = list(labels)
    by_class = _class_indices(labels)
    points = []
    for size in sizes:
        chosen: list[int] = []
        for lab in sorted(by_class):
            members = list(by_class[lab])
            n_sub = round_half_up(size * len(members))
            rng = SplitMix64(derive_seed(seed, f"curve:{size!r}:{lab}"))
            rng.shuffle(members)
            chosen.extend(members[:n_sub])
        if len(chosen) < k or len({labels[i] for i in chosen}) < 2:
            warnings.warn(f"size {size} yields {len(chosen)} records; skipped")
            continue
        chosen.sort()
        sub_values = values[chosen]
        sub_labels = [labels[i] for i in chosen]
        train_scores, val_scores = cross_validate(
            sub_values, sub_labels, params, k,
            derive_seed(seed, f"curve-cv:{size!r}"), with_train_scores=True)
        points.append({
            "size": size,
            "n_records": len(chosen),
            "train_score": float(np.mean(train_scores)),
            "validation_score": float(np.mean(val_scores)),
        })
    return points


def confusion(predictions, labels, positive_class: str = DEFAULT_POSITIVE_CLASS
              ) -> ConfusionMatrix:
    """Standard 2x2 contingency counts of predictions against labels."""
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ParameterError("predictions and labels must have equal length")
    label_set = set(labels)
    if len(label_set) != 2:
        raise LabelError(f"labels must be binary, got {sorted(label_set)}")
    unseen = set(predictions) - label_set
    if unseen:
        raise LabelError(f"predictions contain unseen classes: {sorted(unseen)}")
    tp = fp = fn = tn = 0
    for p, t in zip(predictions, labels):
        if t == positive_class:
            if p == positive_class:
                tp += 1
            else:
                fn += 1
        else:
            if p == positive_class:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn,
                           positive_class=positive_class)


def metrics_from_confusion(c: ConfusionMatrix) -> Metrics:
    """Accuracy, precision, recall, F1 from counts, exact and safe."""
    n = c.n_test
    if n == 0:
        raise ParameterError("empty confusion matrix")
    accuracy = Fraction(c.tp + c.tn, n)
    precision = Fraction(c.tp, c.tp + c.fp) if c.tp + c.fp > 0 else None
    recall = Fraction(c.tp, c.tp + c.fn) if c.tp + c.fn > 0 else None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = None
    return Metrics(accuracy=accuracy, precision=precision, recall=recall,
                   f1=f1)


def roc_auc(scores, labels, positive_class: str = DEFAULT_POSITIVE_CLASS
            ) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) statistic,
    with tied scores resolved by midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = list(labels)
    pos = np.array([lab == positive_class for lab in labels])
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[pos].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
