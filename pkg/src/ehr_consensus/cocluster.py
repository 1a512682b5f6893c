"""Spectral co-clustering of subjects and features, with diagnostics.

Rows of ``A`` are subjects and columns are features. Each feature and
subject lands in exactly one of ``k`` joint clusters; all-zero rows and
columns cannot be scaled and go to the sink label ``-1``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .consensus import RboParams, rbo

SINK = -1


@dataclass
class CoClusterModel:
    k: int
    feature_labels: np.ndarray
    patient_labels: np.ndarray
    converged: bool = True
    sweeps: int = 0
    kmeans_converged: bool = True

    @property
    def n_nonempty_features(self) -> int:
        return int(np.unique(self.feature_labels[self.feature_labels >= 0]).size)

    @property
    def n_nonempty_patients(self) -> int:
        return int(np.unique(self.patient_labels[self.patient_labels >= 0]).size)

    def feature_sizes(self) -> np.ndarray:
        lab = self.feature_labels
        return np.bincount(lab[lab >= 0], minlength=self.k)


def _check(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError("co-clustering needs a 2-D matrix")
    if not np.all(np.isfinite(A)) or (A < 0).any():
        raise ValueError("matrix must be finite and non-negative")
    return A


def spectral_embedding(A, n_vectors):
    """Joint row/column embedding from singular vectors 2..n_vectors+1 of the scaled matrix."""
    d1 = A.sum(axis=1)
    d2 = A.sum(axis=0)
    r1, r2 = 1.0 / np.sqrt(d1), 1.0 / np.sqrt(d2)
    An = A * r1[:, None] * r2[None, :]
    U, _, Vt = np.linalg.svd(An, full_matrices=False)
    U = U[:, 1: 1 + n_vectors]
    V = Vt[1: 1 + n_vectors].T
    # fix signs so the embedding is reproducible across LAPACK builds
    flip = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])])
    flip[flip == 0] = 1.0
    return U * r1[:, None] * flip, V * r2[:, None] * flip


def _repair(A, rows, cols, k, max_sweeps):
    """Reassign until each feature sits with its heaviest subject cluster and vice versa.

    Ties keep the current label. Returns (rows, cols, converged, sweeps).
    """
    for sweep in range(1, max_sweeps + 1):
        changed = False
        R = np.zeros((k, A.shape[0]))
        R[rows, np.arange(A.shape[0])] = 1.0
        col_w = R @ A  # k x features: weight of each feature to each subject cluster
        best = col_w.argmax(axis=0)
        keep = col_w[cols, np.arange(A.shape[1])] >= col_w[best, np.arange(A.shape[1])]
        new_cols = np.where(keep, cols, best)
        changed |= bool((new_cols != cols).any())
        cols = new_cols
        C = np.zeros((A.shape[1], k))
        C[np.arange(A.shape[1]), cols] = 1.0
        row_w = A @ C  # subjects x k
        best = row_w.argmax(axis=1)
        keep = row_w[np.arange(A.shape[0]), rows] >= row_w[np.arange(A.shape[0]), best]
        new_rows = np.where(keep, rows, best)
        changed |= bool((new_rows != rows).any())
        rows = new_rows
        if not changed:
            return rows, cols, True, sweep
    return rows, cols, False, max_sweeps


def fixed_point_violations(A, model: CoClusterModel) -> tuple[int, int]:
    """Count features and subjects not at their heaviest cluster (sinks ignored)."""
    A = _check(A)
    k = model.k
    rmask = model.patient_labels >= 0
    cmask = model.feature_labels >= 0
    sub = A[np.ix_(rmask, cmask)]
    rows, cols = model.patient_labels[rmask], model.feature_labels[cmask]
    col_w = np.zeros((k, sub.shape[1]))
    np.add.at(col_w, rows, sub)
    row_w = np.zeros((sub.shape[0], k))
    np.add.at(row_w.T, cols, sub.T)
    bad_f = int(np.sum(col_w[cols, np.arange(len(cols))] < col_w.max(axis=0)))
    bad_p = int(np.sum(row_w[np.arange(len(rows)), rows] < row_w.max(axis=1)))
    return bad_f, bad_p


def spectral_cocluster(A, k, seed=0, max_sweeps=100, n_init=10) -> CoClusterModel:
    A = _check(A)
    n, m = A.shape
    if not 1 <= k <= min(n, m):
        raise ValueError(f"k must lie in [1, {min(n, m)}]")
    rmask = A.sum(axis=1) > 0
    cmask = A.sum(axis=0) > 0
    rows_out = np.full(n, SINK, dtype=np.int64)
    cols_out = np.full(m, SINK, dtype=np.int64)
    sub = A[np.ix_(rmask, cmask)]
    if k == 1 or min(sub.shape) < 2:
        rows_out[rmask] = 0
        cols_out[cmask] = 0
        return CoClusterModel(k, cols_out, rows_out)
    k_eff = min(k, min(sub.shape))
    n_vec = min(max(1, math.ceil(math.log2(k))), min(sub.shape) - 1)
    U, V = spectral_embedding(sub, n_vec)
    Z = np.vstack([U, V])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        km = KMeans(n_clusters=k_eff, n_init=n_init, random_state=seed).fit(Z)
    km_ok = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    labels = km.labels_.astype(np.int64)
    rows, cols = labels[: sub.shape[0]], labels[sub.shape[0]:]
    rows, cols, ok, sweeps = _repair(sub, rows, cols, k, max_sweeps)
    rows_out[rmask] = rows
    cols_out[cmask] = cols
    return CoClusterModel(k, cols_out, rows_out, ok, sweeps, km_ok)


# ---------------------------------------------------------------------------


def _knee(x, y) -> int:
    """Index of maximum discrete curvature of the min-max normalised curve."""
    if len(x) < 3:
        return 0
    xs = (x - x.min()) / (np.ptp(x) or 1.0)
    ys = (y - y.min()) / (np.ptp(y) or 1.0)
    # three-point differences at interior points (non-uniform spacing allowed)
    h0 = xs[1:-1] - xs[:-2]
    h1 = xs[2:] - xs[1:-1]
    d1 = (ys[2:] - ys[:-2]) / (h0 + h1)
    d2 = 2.0 * (h0 * ys[2:] - (h0 + h1) * ys[1:-1] + h1 * ys[:-2]) / (h0 * h1 * (h0 + h1))
    kappa = np.abs(d2) / (1.0 + d1 ** 2) ** 1.5
    return 1 + int(np.argmax(kappa))


def choose_k(A, k_range: Sequence[int], seed=0) -> tuple[int, list[dict]]:
    """Pick k from an elbow on feature dispersion and singleton-cluster counts.

    For each candidate the features are embedded once (dimension fixed by the
    largest candidate) and the within-cluster sum of squared distances of the
    co-clustered features is recorded. The chosen k is the smallest candidate
    at or after the curvature knee whose singleton count is within 10% of the
    observed range above its minimum.
    """
    ks = sorted(int(k) for k in k_range)
    if not ks:
        raise ValueError("empty k range")
    A = _check(A)
    rmask = A.sum(axis=1) > 0
    cmask = A.sum(axis=0) > 0
    sub = A[np.ix_(rmask, cmask)]
    n_vec = min(max(1, math.ceil(math.log2(max(ks)))), min(sub.shape) - 1)
    _, V = spectral_embedding(sub, n_vec) if n_vec >= 1 else (None, np.zeros((sub.shape[1], 1)))
    table = []
    for k in ks:
        model = spectral_cocluster(A, k, seed=seed)
        lab = model.feature_labels[cmask]
        ssd = 0.0
        for c in np.unique(lab):
            pts = V[lab == c]
            ssd += float(((pts - pts.mean(axis=0)) ** 2).sum())
        sizes = model.feature_sizes()
        table.append({
            "k": k,
            "ssd": ssd,
            "singletons": int(np.sum(sizes == 1)),
            "nonempty_features": model.n_nonempty_features,
            "nonempty_patients": model.n_nonempty_patients,
        })
    x = np.array(ks, dtype=float)
    y = np.array([r["ssd"] for r in table])
    knee = _knee(x, y)
    single = np.array([r["singletons"] for r in table], dtype=float)
    limit = single.min() + 0.1 * (single.max() - single.min())
    chosen = next(ks[i] for i in range(knee, len(ks)) if single[i] <= limit) \
        if any(single[knee:] <= limit) else ks[knee]
    for i, r in enumerate(table):
        r["knee"] = i == knee
        r["chosen"] = ks[i] == chosen
    return chosen, table


# ---------------------------------------------------------------------------


def align_labels(labels, reference, k) -> np.ndarray:
    """Rename clusters in ``labels`` greedily by largest overlap with ``reference``."""
    labels = np.asarray(labels)
    reference = np.asarray(reference)
    ok = (labels >= 0) & (reference >= 0)
    C = np.zeros((k, k), dtype=np.int64)
    np.add.at(C, (labels[ok], reference[ok]), 1)
    mapping = {}
    free = set(range(k))
    Cw = C.astype(float)
    for _ in range(k):
        a, b = np.unravel_index(np.argmax(Cw), Cw.shape)
        if Cw[a, b] < 0:
            break
        mapping[int(a)] = int(b)
        free.discard(int(b))
        Cw[a, :] = -1
        Cw[:, b] = -1
    out = labels.copy()
    for a, b in mapping.items():
        out[labels == a] = b
    return out


@dataclass
class StabilityResult:
    mean: float
    pairwise: list[float] = field(default_factory=list)
    n_skipped: int = 0
    n_used: int = 0


def bootstrap_stability(A, k, B=20, seed=0, params: RboParams = RboParams()) -> StabilityResult:
    """Mean pairwise RBO of aligned feature labelings over subject bootstrap replicates.

    Each replicate's labels are turned into the list of (feature, label)
    pairs in feature-index order before comparison. Replicates with fewer
    than ``k`` nonempty feature clusters are skipped.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    A = _check(A)
    n = A.shape[0]
    reps = []
    skipped = 0
    for b in range(B):
        idx = np.random.default_rng([seed, b]).integers(0, n, size=n)
        try:
            model = spectral_cocluster(A[idx], k, seed=seed)
        except ValueError:
            skipped += 1
            continue
        if model.n_nonempty_features < k:
            skipped += 1
            continue
        reps.append(model.feature_labels)
    scores = []
    for a in range(len(reps)):
        for b in range(a + 1, len(reps)):
            la = reps[a]
            lb = align_labels(reps[b], la, k)
            S = list(enumerate(la.tolist()))
            T = list(enumerate(lb.tolist()))
            scores.append(rbo(S, T, params))
    mean = float(np.mean(scores)) if scores else float("nan")
    return StabilityResult(mean, scores, skipped, len(reps))


# ---------------------------------------------------------------------------


def pearson_corr_matrix(A) -> tuple[np.ndarray, np.ndarray]:
    """Feature-by-feature Pearson correlation; zero-variance features get 0 off the diagonal.

    Returns the matrix and a mask flagging zero-variance features.
    """
    A = np.asarray(A, dtype=float)
    Xc = A - A.mean(axis=0)
    ss = np.sqrt((Xc ** 2).sum(axis=0))
    flat = ss == 0
    safe = np.where(flat, 1.0, ss)
    Z = Xc / safe
    corr = Z.T @ Z
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0), flat


def cluster_connectivity(corr, feature_labels, threshold=0.5) -> list[tuple[int, int, int]]:
    """Edges (a, b, n_pairs) between distinct clusters with a feature pair above ``threshold``."""
    corr = np.asarray(corr)
    lab = np.asarray(feature_labels)
    iu, ju = np.triu_indices(len(lab), 1)
    hit = (corr[iu, ju] > threshold) & (lab[iu] != lab[ju]) & (lab[iu] >= 0) & (lab[ju] >= 0)
    a = np.minimum(lab[iu[hit]], lab[ju[hit]])
    b = np.maximum(lab[iu[hit]], lab[ju[hit]])
    edges: dict[tuple[int, int], int] = {}
    for x, y in zip(a.tolist(), b.tolist()):
        edges[(x, y)] = edges.get((x, y), 0) + 1
    return [(x, y, c) for (x, y), c in sorted(edges.items())]


def patient_cluster_event_distribution(patient_labels, sub_labels, categories=None) -> dict[int, dict]:
    """Per patient cluster: size, count and proportion of each outcome sub-label."""
    lab = np.asarray(patient_labels)
    sub = np.asarray(sub_labels, dtype=object)
    if lab.shape != sub.shape:
        raise ValueError("labels and sub-labels differ in length")
    cats = list(categories) if categories is not None else sorted(set(sub.tolist()), key=str)
    out = {}
    for c in sorted(set(lab.tolist())):
        members = sub[lab == c]
        counts = {cat: int(np.sum(members == cat)) for cat in cats}
        n = int(members.size)
        out[int(c)] = {
            "n": n,
            "counts": counts,
            "proportions": {cat: counts[cat] / n for cat in cats},
        }
    return out
