"""Global feature importance: permutation importance and aggregated local surrogates."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .models.evaluate import auc_score

PFI = "PFI"
LIME = "LIME-aggregated"


@dataclass
class ImportanceVector:
    scores: np.ndarray
    tokens: tuple[str, ...] | None = None
    method: str = PFI
    normalized: bool = False
    # per-feature spread over permutation repeats, when available
    std: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.ndim != 1:
            raise ValueError("importance scores must be one-dimensional")
        if self.tokens is not None:
            self.tokens = tuple(self.tokens)
            if len(self.tokens) != len(self.scores):
                raise ValueError("tokens and scores differ in length")

    def __len__(self):
        return len(self.scores)

    def save(self, path) -> None:
        if self.tokens is None:
            raise ValueError("tokens are required to write an importance file")
        Path(path).write_text("".join(f"{t} {float(s)!r}\n" for t, s in zip(self.tokens, self.scores)))

    @classmethod
    def load(cls, path, method=PFI, vocab_tokens: Sequence[str] | None = None) -> "ImportanceVector":
        tokens, scores = [], []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            tok, val = line.rsplit(" ", 1)
            tokens.append(tok)
            scores.append(float(val))
        if vocab_tokens is not None and list(vocab_tokens) != tokens:
            missing = [t for t in vocab_tokens if t not in set(tokens)]
            extra = [t for t in tokens if t not in set(vocab_tokens)]
            raise ValueError(
                f"importance file not aligned to vocabulary; missing {missing[:10]}, unexpected {extra[:10]}"
            )
        return cls(np.array(scores), tuple(tokens), method)


@dataclass(frozen=True)
class RankedList:
    order: np.ndarray
    tokens: tuple[str, ...] | None = None

    def __len__(self):
        return len(self.order)

    def __iter__(self):
        return iter(self.items())

    def items(self) -> list:
        """Ranked tokens when known, otherwise ranked feature indices."""
        if self.tokens is None:
            return self.order.tolist()
        return [self.tokens[j] for j in self.order]


# ---------------------------------------------------------------------------


def error_auc(y, scores) -> float:
    return 1.0 - auc_score(scores, y)


def _predict(predictor):
    return predictor.predict_proba if hasattr(predictor, "predict_proba") else predictor


def pfi(predictor, X, y, error_fn: Callable = error_auc, n_repeats=5, seed=0,
        tokens: Sequence[str] | None = None) -> ImportanceVector:
    """Permutation importance ``FI_j = mean_r(e_perm - e_orig)``; positive means important.

    Features sit on the last axis of ``X``; for a (subjects, bins, features)
    input a feature's whole bin block moves with one subject permutation.
    Feature ``j`` uses the generator ``default_rng([seed, j])``.
    """
    y = np.asarray(y).astype(np.int64)
    if np.unique(y).size < 2:
        raise ValueError("permutation importance needs both classes in y")
    if n_repeats < 1:
        raise ValueError("n_repeats must be at least 1")
    predict = _predict(predictor)
    Xp = np.array(X, dtype=float, copy=True)
    n, F = Xp.shape[0], Xp.shape[-1]
    e_orig = error_fn(y, predict(Xp))
    mean = np.zeros(F)
    std = np.zeros(F)
    for j in range(F):
        col = Xp[..., j].copy()
        if np.all(col == col[:1]):
            # every permutation leaves a constant column unchanged
            continue
        rng = np.random.default_rng([seed, j])
        errs = np.empty(n_repeats)
        for r in range(n_repeats):
            Xp[..., j] = col[rng.permutation(n)]
            errs[r] = error_fn(y, predict(Xp)) - e_orig
        Xp[..., j] = col
        mean[j] = errs.mean()
        std[j] = errs.std(ddof=1) if n_repeats > 1 else 0.0
    return ImportanceVector(mean, tokens, PFI, std=std)


# ---------------------------------------------------------------------------


@dataclass
class LimeExplanation:
    weights: np.ndarray  # one per feature, zero outside the selected set
    intercept: float
    score: float  # black-box output at the unperturbed input
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _weighted_ridge(Z, t, w, alpha):
    """Ridge with an unpenalised intercept, solved on weight-centred data."""
    sw = w.sum()
    zm = (w @ Z) / sw
    tm = (w @ t) / sw
    Zc, tc = Z - zm, t - tm
    A = (Zc * w[:, None]).T @ Zc + alpha * np.eye(Z.shape[1])
    coef = np.linalg.solve(A, (Zc * w[:, None]).T @ tc)
    return coef, float(tm - zm @ coef)


def lime_local(predictor, x, n_samples=1000, kernel_width=0.25, n_features=10, seed=0,
               alpha=1.0) -> LimeExplanation:
    """Local surrogate around ``x`` by masking present features.

    Interpretable units are the features on the last axis of ``x``; a unit is
    present when any of its cells is nonzero and masking zeroes all of them.
    Each perturbed sample masks a uniformly drawn number of present units,
    is weighted by ``exp(-D^2 / kernel_width^2)`` with D the fraction masked,
    and a weighted ridge is refitted on the ``n_features`` largest weights.
    """
    predict = _predict(predictor)
    x = np.asarray(x, dtype=float)
    F = x.shape[-1]
    present = x.reshape(-1, F) != 0
    active = np.flatnonzero(present.any(axis=0))
    base = np.asarray(predict(x[None]), dtype=float)
    if base.size != 1 or not np.all(np.isfinite(base)):
        raise ValueError("predictor returned a non-finite score")
    score = float(base[0])
    weights = np.zeros(F)
    d = active.size
    if d == 0:
        return LimeExplanation(weights, score, score, active)

    rng = np.random.default_rng(seed)
    Zb = np.ones((n_samples, d), dtype=bool)
    n_off = rng.integers(1, d + 1, size=n_samples - 1)
    # a uniformly random subset of size n_off: the n_off smallest random keys
    ranks = np.argsort(np.argsort(rng.random((n_samples - 1, d)), axis=1), axis=1)
    Zb[1:] = ranks >= n_off[:, None]
    Xs = np.repeat(x[None], n_samples, axis=0)
    for a in range(d):
        rows = ~Zb[:, a]
        if rows.any():
            Xs[rows, ..., active[a]] = 0.0
    t = np.asarray(predict(Xs), dtype=float)
    if t.shape != (n_samples,) or not np.all(np.isfinite(t)):
        raise ValueError("predictor returned non-finite scores")
    if np.all(t == t[0]):
        return LimeExplanation(weights, float(t[0]), score, active)

    Z = Zb.astype(float)
    dist = 1.0 - Z.mean(axis=1)
    kw = np.exp(-(dist ** 2) / kernel_width ** 2)
    coef, _ = _weighted_ridge(Z, t, kw, alpha)
    keep = np.sort(np.argsort(-np.abs(coef), kind="stable")[: min(n_features, d)])
    coef_k, intercept = _weighted_ridge(Z[:, keep], t, kw, alpha)
    weights[active[keep]] = coef_k
    return LimeExplanation(weights, intercept, score, active)


def lime_global(predictor, X, n_samples=1000, kernel_width=0.25, n_features=10, seed=0,
                tokens: Sequence[str] | None = None) -> ImportanceVector:
    """Mean absolute local weight per feature over the samples in which it occurs.

    Sample ``i`` is explained with seed ``(seed, i)``.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    F = X.shape[-1]
    total = np.zeros(F)
    count = np.zeros(F)
    for i in range(X.shape[0]):
        exp = lime_local(predictor, X[i], n_samples, kernel_width, n_features, seed=(seed, i))
        total[exp.active] += np.abs(exp.weights[exp.active])
        count[exp.active] += 1
    scores = np.divide(total, count, out=np.zeros(F), where=count > 0)
    return ImportanceVector(scores, tokens, LIME)


# ---------------------------------------------------------------------------


def normalize_importance(v: ImportanceVector | np.ndarray) -> ImportanceVector:
    iv = v if isinstance(v, ImportanceVector) else ImportanceVector(v)
    a = np.abs(iv.scores)
    total = a.sum()
    if total == 0:
        raise ValueError("cannot normalize an all-zero importance vector")
    return ImportanceVector(a / total, iv.tokens, iv.method, True, iv.std)


def rank_features(v: ImportanceVector | np.ndarray) -> RankedList:
    """Descending by score, ties by ascending feature index."""
    iv = v if isinstance(v, ImportanceVector) else ImportanceVector(v)
    s = iv.scores
    if np.isnan(s).any():
        raise ValueError("importance scores contain NaN")
    order = np.lexsort((np.arange(len(s)), -s))
    return RankedList(order, iv.tokens)


def cumulative_distribution(v: ImportanceVector | np.ndarray, level=0.9) -> tuple[np.ndarray, int]:
    """Descending cumulative importance and the number of features needed to reach ``level``."""
    s = v.scores if isinstance(v, ImportanceVector) else np.asarray(v, dtype=float)
    curve = np.cumsum(np.sort(s)[::-1])
    # tolerance absorbs rounding in sums such as 90 x 0.01
    n = int(np.searchsorted(curve, level - 1e-12, side="left")) + 1
    return curve, min(n, len(curve))
