"""Rank Biased Overlap, cluster-level rankings and agreement matrices."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import family_of_token


@dataclass(frozen=True)
class RboParams:
    p: float = 0.9
    k: int | None = None  # None means the full (shorter) list

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be at least 1")


def _as_list(ranked) -> list:
    return list(ranked.items()) if hasattr(ranked, "items") and not isinstance(ranked, Mapping) else list(ranked)


def rbo(S, T, params: RboParams = RboParams()) -> float:
    """Truncated RBO with the residual term at depth ``k``.

    RBO = (X_k / k) p^k + ((1 - p) / p) * sum_{d<=k} (X_d / d) p^d,
    where X_d counts items shared by the two depth-d prefixes.
    """
    S, T = _as_list(S), _as_list(T)
    if not S or not T:
        raise ValueError("rbo needs two non-empty lists")
    if len(set(S)) != len(S) or len(set(T)) != len(T):
        raise ValueError("ranked lists must not repeat items")
    k = min(len(S), len(T)) if params.k is None else params.k
    if k > min(len(S), len(T)):
        raise ValueError(f"depth {k} exceeds the shorter list length {min(len(S), len(T))}")
    p = params.p
    if S[:k] == T[:k]:
        # X_d = d at every depth and the sum telescopes to exactly 1
        return 1.0
    seen_s, seen_t = set(), set()
    x = 0
    total = 0.0
    pd = 1.0
    for d in range(1, k + 1):
        s, t = S[d - 1], T[d - 1]
        if s == t:
            x += 1
        else:
            x += (s in seen_t) + (t in seen_s)
        seen_s.add(s)
        seen_t.add(t)
        pd *= p
        total += x / d * pd
    return float(min(1.0, x / k * pd + (1.0 - p) / p * total))


def cluster_rank(ranked, feature_labels: Mapping | Sequence) -> list:
    """Replace features by cluster ids and keep each cluster's first appearance."""
    out, seen = [], set()
    for f in _as_list(ranked):
        try:
            c = feature_labels[f]
        except (KeyError, IndexError, TypeError):
            raise ValueError(f"feature {f!r} has no cluster label") from None
        c = c.item() if hasattr(c, "item") else c
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def clustered_rbo(S, T, feature_labels, params: RboParams = RboParams()) -> float:
    cs, ct = cluster_rank(S, feature_labels), cluster_rank(T, feature_labels)
    depth = min(len(cs), len(ct))
    if params.k is not None:
        depth = min(depth, params.k)
    return rbo(cs, ct, RboParams(params.p, depth))


# ---------------------------------------------------------------------------


@dataclass
class AgreementMatrix:
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = np.asarray(self.values, dtype=float)

    def to_csv(self) -> str:
        lines = ["model," + ",".join(self.names)]
        for name, row in zip(self.names, self.values):
            lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"

    def mean_offdiagonal(self) -> float:
        n = len(self.names)
        if n < 2:
            return float("nan")
        iu = np.triu_indices(n, 1)
        return float(self.values[iu].mean())


def _pairwise(names, lists, score: Callable) -> AgreementMatrix:
    n = len(names)
    m = np.eye(n)
    for a, b in itertools.combinations(range(n), 2):
        m[a, b] = m[b, a] = score(lists[a], lists[b])
    return AgreementMatrix(names, m)


def agreement_matrix(rankings: Mapping[str, Sequence], feature_labels=None,
                     params: RboParams = RboParams()) -> tuple[AgreementMatrix, AgreementMatrix | None]:
    """Pairwise raw RBO and, with labels, clustered RBO between model rankings."""
    if len(rankings) < 2:
        raise ValueError("agreement needs at least two models")
    names = list(rankings)
    lists = [_as_list(rankings[n]) for n in names]
    ref = set(lists[0])
    for name, lst in zip(names[1:], lists[1:]):
        if set(lst) != ref:
            diff = sorted(map(str, ref.symmetric_difference(lst)))
            raise ValueError(f"ranking {name!r} covers a different vocabulary; differing tokens {diff[:10]}")
    raw = _pairwise(names, lists, lambda s, t: rbo(s, t, params))
    clustered = None
    if feature_labels is not None:
        clustered = _pairwise(names, lists, lambda s, t: clustered_rbo(s, t, feature_labels, params))
    return raw, clustered


@dataclass
class CrossOutcomeResult:
    scores: dict[str, float]
    shared: tuple
    only_first: tuple
    only_second: tuple


def cross_outcome_agreement(rankings_a: Mapping[str, Sequence], rankings_b: Mapping[str, Sequence],
                            feature_labels, params: RboParams = RboParams()) -> CrossOutcomeResult:
    """Clustered RBO between each model's rankings for two outcomes, over shared features."""
    models = [m for m in rankings_a if m in rankings_b]
    if not models:
        raise ValueError("no model is ranked for both outcomes")
    scores = {}
    shared = only_a = only_b = ()
    for m in models:
        la, lb = _as_list(rankings_a[m]), _as_list(rankings_b[m])
        sa, sb = set(la), set(lb)
        common = sa & sb
        if not common:
            raise ValueError("the two outcomes share no features")
        ra = [t for t in la if t in common]
        rb = [t for t in lb if t in common]
        scores[m] = clustered_rbo(ra, rb, feature_labels, params)
        shared = tuple(sorted(common, key=str))
        only_a = tuple(sorted(sa - common, key=str))
        only_b = tuple(sorted(sb - common, key=str))
    return CrossOutcomeResult(scores, shared, only_a, only_b)


def top_k_table(rankings: Mapping[str, Sequence], k: int, family_of: Callable[[str], object] = family_of_token) -> list[dict]:
    """Rows of (model, rank, token, family) for each model's top ``k`` features."""
    if k < 1:
        raise ValueError("k must be at least 1")
    rows = []
    for model, ranked in rankings.items():
        for r, tok in enumerate(_as_list(ranked)[:k], start=1):
            fam = family_of(tok)
            rows.append({"model": model, "rank": r, "token": tok, "family": getattr(fam, "value", fam)})
    return rows
