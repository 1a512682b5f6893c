"""Metrics, the stratified k-fold protocol and the feature-family ablation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from ..core import Family

METRIC_NAMES = ("sensitivity", "specificity", "f1", "auc")


class Metrics(NamedTuple):
    sensitivity: float
    specificity: float
    f1: float
    auc: float


class UndefinedMetricError(ValueError):
    """AUC is undefined with a single class; ``partial`` keeps the confusion metrics."""

    def __init__(self, message, partial: Metrics):
        super().__init__(message)
        self.partial = partial


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    r = rankdata(s)
    return float((r[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def compute_metrics(scores, labels, threshold=0.5) -> Metrics:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if np.any((s < 0) | (s > 1)) or not np.all(np.isfinite(s)):
        raise ValueError("scores must lie in [0, 1]")
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    if tp + fn == 0 or tn + fp == 0:
        partial = Metrics(sens, spec, f1, float("nan"))
        raise UndefinedMetricError("AUC undefined: labels contain a single class", partial)
    return Metrics(sens, spec, f1, auc_score(s, y))


# ---------------------------------------------------------------------------


def stratified_folds(y, k=10, seed=0) -> list[np.ndarray]:
    """Deterministic stratified split: each class shuffled, then dealt round-robin."""
    y = np.asarray(y).astype(np.int64)
    if k < 2:
        raise ValueError("k must be at least 2")
    for cls, name in ((1, "Event"), (0, "Control")):
        n = int(np.sum(y == cls))
        if n < k:
            raise ValueError(f"class {name} has {n} subjects, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in (1, 0):
        idx = rng.permutation(np.flatnonzero(y == cls))
        assign[idx] = (offset + np.arange(len(idx))) % k
        offset += len(idx)
    return [np.flatnonzero(assign == f) for f in range(k)]


@dataclass
class MetricsReport:
    folds: list[Metrics]
    name: str = ""

    @property
    def mean(self) -> dict[str, float]:
        a = np.array(self.folds, dtype=float)
        return dict(zip(METRIC_NAMES, a.mean(axis=0).tolist()))

    @property
    def std(self) -> dict[str, float]:
        a = np.array(self.folds, dtype=float)
        ddof = 1 if len(a) > 1 else 0
        return dict(zip(METRIC_NAMES, a.std(axis=0, ddof=ddof).tolist()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mean": self.mean,
            "std": self.std,
            "folds": [m._asdict() for m in self.folds],
        }


Trainer = Callable[[np.ndarray, np.ndarray, int], object]


def kfold_evaluate(trainer: Trainer, X, y, k=10, seed=0, n_jobs=1, name="") -> MetricsReport:
    """Stratified k-fold evaluation.

    ``trainer(X_train, y_train, fold_seed)`` returns an object with
    ``predict_proba``. Fold seeds derive from ``(seed, fold)`` and results
    are gathered in fold order, so threading does not change the report.
    """
    X = np.asarray(X)
    y = np.asarray(y).astype(np.int64)
    folds = stratified_folds(y, k, seed)

    def run(f):
        test = folds[f]
        train = np.setdiff1d(np.arange(len(y)), test)
        fold_seed = int(np.random.default_rng([seed, f]).integers(2**31))
        model = trainer(X[train], y[train], fold_seed)
        return compute_metrics(model.predict_proba(X[test]), y[test])

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(f) for f in range(k)]
    return MetricsReport(results, name)


# ---------------------------------------------------------------------------

_D, _H, _P, _HI = Family.DEMOGRAPHIC, Family.HOSPITALISATION, Family.PRESCRIPTION, Family.HISTORY

ABLATION_SUBSETS: tuple[tuple[str, frozenset], ...] = (
    ("Demographics", frozenset({_D})),
    ("Hospitalisation", frozenset({_H})),
    ("Prescriptions", frozenset({_P})),
    ("History", frozenset({_HI})),
    ("BloodTestMarker", frozenset({Family.BLOOD_TEST_MARKER})),
    ("BloodTestValue", frozenset({Family.BLOOD_TEST_VALUE})),
    ("Demographics + Hospitalisation", frozenset({_D, _H})),
    ("Demographics + Hospitalisation + History", frozenset({_D, _H, _HI})),
    ("Demographics + Hospitalisation + History + Prescriptions", frozenset({_D, _H, _HI, _P})),
    ("All features", frozenset(Family)),
)


def ablation_run(X, y, families: Sequence[Family], trainer: Trainer, k=10, seed=0,
                 subsets=ABLATION_SUBSETS, n_jobs=1) -> list[MetricsReport]:
    """One k-fold report per family subset; features sit on the last axis of ``X``."""
    X = np.asarray(X)
    fam = np.array([Family(f) for f in families], dtype=object)
    if len(fam) != X.shape[-1]:
        raise ValueError("one family tag per feature column required")
    reports = []
    for name, keep in subsets:
        cols = np.flatnonzero([f in keep for f in fam])
        if cols.size == 0:
            raise ValueError(f"subset {name!r} selects no features")
        reports.append(kfold_evaluate(trainer, X[..., cols], y, k, seed, n_jobs, name))
    return reports
