"""Vocabularies and the two data representations: sparse temporal tensor and sentences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    LOOKBACK,
    Cohort,
    EventRecord,
    Family,
    OutcomeKind,
    OutcomeLabel,
    family_of_token,
)

log = logging.getLogger(__name__)

UNK = "[UNK]"
N_TIME = 7
BIN_DAYS = 60
DEFAULT_MAX_LEN = 209
SEGMENT = "segment_"


def _family_sort_key(token: str) -> tuple[str, str]:
    return (family_of_token(token).value, token)


@dataclass(frozen=True)
class FeatureVocabulary:
    """Ordered feature tokens; ``[UNK]`` is appended for language use."""

    features: tuple[str, ...]
    for_language: bool = False
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        feats = tuple(self.features)
        if UNK in feats:
            raise ValueError("[UNK] is reserved and appended automatically")
        if len(set(feats)) != len(feats):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "features", feats)
        idx = {tok: i for i, tok in enumerate(feats)}
        if self.for_language:
            idx[UNK] = len(feats)
        object.__setattr__(self, "index", idx)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.features + ((UNK,) if self.for_language else ())

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def unk_index(self) -> int:
        if not self.for_language:
            raise ValueError("vocabulary was not built for language use")
        return len(self.features)

    def segment_index(self, x: int) -> int:
        """Integer-encoding index of ``segment_x``; segments follow [UNK]."""
        return self.unk_index + 1 + x

    @property
    def pad_index(self) -> int:
        return self.unk_index + 1 + N_TIME

    @cached_property
    def families(self) -> tuple[Family, ...]:
        return tuple(family_of_token(t) for t in self.features)

    @cached_property
    def static_mask(self) -> np.ndarray:
        return np.array([f.is_static for f in self.families], dtype=bool)

    def lookup(self, token: str) -> int:
        if token in self.index:
            return self.index[token]
        return self.unk_index

    def with_language(self) -> "FeatureVocabulary":
        return FeatureVocabulary(self.features, for_language=True)

    def subset(self, families: Iterable[Family]) -> np.ndarray:
        """Feature indices belonging to any of ``families``."""
        wanted = set(families)
        return np.array([i for i, f in enumerate(self.families) if f in wanted], dtype=int)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureVocabulary":
        tokens = Path(path).read_text().splitlines()
        if tokens and tokens[-1] == UNK:
            return cls(tuple(tokens[:-1]), for_language=True)
        return cls(tuple(tokens))


def bin_index(index_day: int, event_day: int) -> int | None:
    """60-day bin counted back from index; None outside the one-year window."""
    delta = index_day - event_day
    if delta < 0 or delta >= LOOKBACK:
        return None
    return min(delta // BIN_DAYS, N_TIME - 1)


def _in_scope(ev: EventRecord, index_day: int) -> bool:
    if ev.family.is_static:
        return ev.event_day <= index_day
    return bin_index(index_day, ev.event_day) is not None


def build_vocabulary(
    cohort: Cohort,
    outcome_kind: OutcomeKind,
    for_language: bool = False,
    subjects: Iterable[str] | None = None,
) -> FeatureVocabulary:
    """All feature tokens seen in the (training) subjects' encodable history.

    Order is lexicographic by family name, then token.
    """
    labels = cohort.labels_for(outcome_kind)
    if subjects is not None:
        keep = set(subjects)
        labels = [lab for lab in labels if lab.subject_id in keep]
    if not labels:
        raise ValueError("empty training split: no labelled subjects")
    seen = set()
    for lab in labels:
        for ev in cohort.events_for(lab.subject_id):
            if _in_scope(ev, lab.index_day):
                seen.add(ev.token)
    return FeatureVocabulary(tuple(sorted(seen, key=_family_sort_key)), for_language)


# ---------------------------------------------------------------------------
# Sparse temporal tensor


@dataclass(frozen=True)
class SparseTemporalTensor:
    n_subjects: int
    n_features: int
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    v: np.ndarray
    n_time: int = N_TIME

    def __post_init__(self):
        i, j, k = (np.asarray(a, dtype=np.int64) for a in (self.i, self.j, self.k))
        v = np.asarray(self.v, dtype=np.float64)
        if not (i.shape == j.shape == k.shape == v.shape):
            raise ValueError("entry arrays must have equal length")
        if i.size:
            if i.min() < 0 or i.max() >= self.n_subjects:
                raise ValueError("subject index out of range")
            if j.min() < 0 or j.max() >= self.n_features:
                raise ValueError("feature index out of range")
            if k.min() < 0 or k.max() >= self.n_time:
                raise ValueError("time index out of range")
            if (v < 0).any():
                raise ValueError("tensor values must be non-negative")
        order = np.lexsort((k, j, i))
        i, j, k, v = i[order], j[order], k[order], v[order]
        if i.size > 1:
            same = (np.diff(i) == 0) & (np.diff(j) == 0) & (np.diff(k) == 0)
            if same.any():
                raise ValueError("duplicate (i, j, k) entries")
        for name, arr in zip("ijkv", (i, j, k, v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def nnz(self) -> int:
        return int(self.v.size)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_subjects, self.n_features, self.n_time)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.i, self.j, self.k] = self.v
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseTemporalTensor":
        i, j, k = np.nonzero(dense)
        n, f, t = dense.shape
        return cls(n, f, i, j, k, dense[i, j, k], n_time=t)

    def sparsity(self) -> float:
        return 1.0 - self.nnz / float(np.prod(self.shape))

    def save(self, path: str | Path) -> None:
        lines = [f"{self.n_subjects} {self.n_features} {self.n_time}\n"]
        lines.extend(
            f"{a} {b} {c} {float(d)!r}\n"
            for a, b, c, d in zip(self.i.tolist(), self.j.tolist(), self.k.tolist(), self.v.tolist())
        )
        Path(path).write_text("".join(lines))

    @classmethod
    def load(cls, path: str | Path) -> "SparseTemporalTensor":
        with open(path) as fh:
            n, f, t = (int(x) for x in fh.readline().split())
            i, j, k, v = [], [], [], []
            for line in fh:
                if not line.strip():
                    continue
                a, b, c, d = line.split()
                i.append(int(a))
                j.append(int(b))
                k.append(int(c))
                v.append(float(d))
        return cls(n, f, np.array(i, dtype=np.int64), np.array(j, dtype=np.int64),
                   np.array(k, dtype=np.int64), np.array(v), n_time=t)


def _static_value(ev: EventRecord) -> float:
    return float(ev.value) if ev.value is not None else 1.0


def encode_sparse(
    cohort: Cohort,
    vocab: FeatureVocabulary,
    labels: Sequence[OutcomeLabel],
) -> tuple[SparseTemporalTensor, int]:
    """Encode subjects (rows in ``labels`` order) into a sparse temporal tensor.

    Dynamic events are counted per 60-day bin; blood-test values are averaged
    within a bin. Static features (demographics, history) take the latest
    value recorded on or before index and are written to all bins. Tokens
    missing from ``vocab`` are dropped; their count is returned.
    """
    entries: dict[tuple[int, int, int], list[float]] = {}
    dropped = 0
    for row, lab in enumerate(labels):
        static_latest: dict[int, tuple[int, float]] = {}
        for ev in cohort.events_for(lab.subject_id):
            if not _in_scope(ev, lab.index_day):
                continue
            col = vocab.index.get(ev.token)
            if col is None or col >= vocab.n_features:
                dropped += 1
                continue
            if ev.family.is_static:
                prev = static_latest.get(col)
                if prev is None or ev.event_day >= prev[0]:
                    static_latest[col] = (ev.event_day, _static_value(ev))
                continue
            b = bin_index(lab.index_day, ev.event_day)
            cell = entries.setdefault((row, col, b), [0.0, 0])
            if ev.family is Family.BLOOD_TEST_VALUE:
                cell[0] += float(ev.value)
                cell[1] += 1
            else:
                cell[0] += 1.0
        for col, (_, val) in static_latest.items():
            for b in range(N_TIME):
                entries[(row, col, b)] = [val, 0]
    if dropped:
        log.warning("encode_sparse dropped %d out-of-vocabulary events", dropped)

    keys = sorted(entries)
    i = np.array([key[0] for key in keys], dtype=np.int64)
    j = np.array([key[1] for key in keys], dtype=np.int64)
    k = np.array([key[2] for key in keys], dtype=np.int64)
    v = np.array([entries[key][0] / entries[key][1] if entries[key][1] else entries[key][0] for key in keys])
    nz = v != 0
    tensor = SparseTemporalTensor(len(labels), vocab.n_features, i[nz], j[nz], k[nz], v[nz])
    return tensor, dropped


def collapse_time(tensor: SparseTemporalTensor, static_mask: np.ndarray) -> np.ndarray:
    """Subjects x features matrix: dynamic features summed over bins, static
    features taken from the most recent bin."""
    static_mask = np.asarray(static_mask, dtype=bool)
    if static_mask.shape != (tensor.n_features,):
        raise ValueError("static_mask must have one flag per feature")
    out = np.zeros((tensor.n_subjects, tensor.n_features))
    dyn = ~static_mask[tensor.j]
    np.add.at(out, (tensor.i[dyn], tensor.j[dyn]), tensor.v[dyn])
    latest = static_mask[tensor.j] & (tensor.k == 0)
    out[tensor.i[latest], tensor.j[latest]] = tensor.v[latest]
    return out


# ---------------------------------------------------------------------------
# Sentences


@dataclass(frozen=True)
class SentenceDoc:
    tokens: tuple[str, ...]
    n_suffix: int

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def body(self) -> tuple[str, ...]:
        return self.tokens[: len(self.tokens) - self.n_suffix]

    @property
    def suffix(self) -> tuple[str, ...]:
        return self.tokens[len(self.tokens) - self.n_suffix:]

    @property
    def event_tokens(self) -> tuple[str, ...]:
        return tuple(t for t in self.body if not t.startswith(SEGMENT))


SENTENCE_FAMILIES = (Family.HOSPITALISATION, Family.PRESCRIPTION, Family.BLOOD_TEST_MARKER)


def _fmt_value(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def demographic_token(code: str, value: float) -> str:
    return f"{Family.DEMOGRAPHIC.prefix}{code}_{_fmt_value(value)}"


def encode_sentence(events: Iterable[EventRecord], index_day: int) -> SentenceDoc:
    """One subject's year before index as a token sequence.

    Bins run from most recent (``segment_0``) backwards; a marker precedes
    every non-empty bin. Events within a bin are sorted by family then token.
    The suffix carries sex, age and other demographics, then ``hist_`` flags.
    Blood-test values have no word form and are left out.
    """
    bins: dict[int, list[str]] = {}
    demo: dict[str, tuple[int, float]] = {}
    hist: set[str] = set()
    for ev in events:
        if ev.family in SENTENCE_FAMILIES:
            b = bin_index(index_day, ev.event_day)
            if b is not None:
                bins.setdefault(b, []).append(ev.token)
        elif ev.family is Family.DEMOGRAPHIC and ev.event_day <= index_day:
            prev = demo.get(ev.code)
            if prev is None or ev.event_day >= prev[0]:
                demo[ev.code] = (ev.event_day, float(ev.value))
        elif ev.family is Family.HISTORY and ev.event_day <= index_day:
            hist.add(ev.token)

    body: list[str] = []
    for b in sorted(bins):
        body.append(f"{SEGMENT}{b}")
        body.extend(sorted(bins[b], key=_family_sort_key))

    order = {"sex": 0, "age": 1}
    suffix = [
        demographic_token(code, demo[code][1])
        for code in sorted(demo, key=lambda c: (order.get(c, 2), c))
    ]
    suffix.extend(sorted(hist))
    return SentenceDoc(tuple(body + suffix), len(suffix))


def _demographic_feature(token: str, vocab: FeatureVocabulary) -> tuple[int, float] | None:
    if not token.startswith(Family.DEMOGRAPHIC.prefix):
        return None
    base, _, raw = token.rpartition("_")
    col = vocab.index.get(base)
    if col is None or col >= vocab.n_features:
        return None
    try:
        return col, float(raw)
    except ValueError:
        return None


def bow_vectorize(
    doc: SentenceDoc, vocab: FeatureVocabulary, include_segments: bool = False
) -> np.ndarray:
    """Per-token counts over ``vocab`` (length includes ``[UNK]``).

    Demographic tokens carry their value (``d_age_78`` sets ``d_age`` to 78).
    Segment markers are skipped unless ``include_segments``, in which case
    they count as unknown words.
    """
    out = np.zeros(len(vocab))
    unk = vocab.unk_index
    for tok in doc.tokens:
        if tok.startswith(SEGMENT) and not include_segments:
            continue
        col = vocab.index.get(tok)
        if col is not None:
            out[col] += 1.0
            continue
        demo = _demographic_feature(tok, vocab)
        if demo is not None:
            out[demo[0]] = demo[1]
        else:
            out[unk] += 1.0
    return out


def int_vectorize(doc: SentenceDoc, vocab: FeatureVocabulary, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    """Token indices, right-padded; long documents keep their most recent head.

    Segment markers map to reserved indices after ``[UNK]``; demographic
    value tokens map to their feature index.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    out = np.full(max_len, vocab.pad_index, dtype=np.int64)
    for pos, tok in enumerate(doc.tokens[:max_len]):
        if tok.startswith(SEGMENT) and tok[len(SEGMENT):].isdigit():
            x = int(tok[len(SEGMENT):])
            out[pos] = vocab.segment_index(x) if x < N_TIME else vocab.unk_index
            continue
        col = vocab.index.get(tok)
        if col is None:
            demo = _demographic_feature(tok, vocab)
            col = demo[0] if demo is not None else vocab.unk_index
        out[pos] = col
    return out


def decode_ints(seq: Sequence[int], vocab: FeatureVocabulary) -> list[str]:
    """Inverse of :func:`int_vectorize` up to padding and demographic values."""
    segs = {vocab.segment_index(x): f"{SEGMENT}{x}" for x in range(N_TIME)}
    out = []
    for idx in seq:
        idx = int(idx)
        if idx == vocab.pad_index:
            break
        out.append(segs.get(idx) or vocab.tokens[idx])
    return out


# ---------------------------------------------------------------------------
# Whole-cohort encoding


@dataclass
class EncodedCohort:
    """All representations of one outcome's labelled subjects, row-aligned."""

    outcome_kind: OutcomeKind
    labels: list[OutcomeLabel]
    vocab: FeatureVocabulary
    tensor: SparseTemporalTensor
    docs: list[SentenceDoc]
    dropped: int = 0

    @property
    def subject_ids(self) -> list[str]:
        return [lab.subject_id for lab in self.labels]

    @cached_property
    def y(self) -> np.ndarray:
        return np.array([lab.y for lab in self.labels], dtype=np.int64)

    @cached_property
    def dense(self) -> np.ndarray:
        return self.tensor.to_dense()

    @cached_property
    def sequence(self) -> np.ndarray:
        """(subjects, bins, features) layout used by the recurrent models."""
        return np.ascontiguousarray(self.dense.transpose(0, 2, 1))

    @cached_property
    def matrix(self) -> np.ndarray:
        return collapse_time(self.tensor, self.vocab.static_mask)

    @cached_property
    def bow(self) -> np.ndarray:
        """BOW over feature columns only ([UNK] column dropped)."""
        lang = self.vocab if self.vocab.for_language else self.vocab.with_language()
        if not self.docs:
            return np.zeros((0, self.vocab.n_features))
        return np.stack([bow_vectorize(d, lang)[: self.vocab.n_features] for d in self.docs])

    def ints(self, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
        lang = self.vocab if self.vocab.for_language else self.vocab.with_language()
        return np.stack([int_vectorize(d, lang, max_len) for d in self.docs])

    def __len__(self) -> int:
        return len(self.labels)


def encode_cohort(
    cohort: Cohort,
    outcome_kind: OutcomeKind,
    vocab: FeatureVocabulary | None = None,
) -> EncodedCohort:
    kind = OutcomeKind(outcome_kind)
    labels = cohort.labels_for(kind)
    if not labels:
        raise ValueError(f"no labelled subjects for {kind.value}")
    if vocab is None:
        vocab = build_vocabulary(cohort, kind, for_language=True)
    tensor, dropped = encode_sparse(cohort, vocab, labels)
    docs = [encode_sentence(cohort.events_for(lab.subject_id), lab.index_day) for lab in labels]
    return EncodedCohort(kind, labels, vocab, tensor, docs, dropped)
