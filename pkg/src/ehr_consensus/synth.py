"""Synthetic cohorts with planted correlated feature groups and planted risk.

Generative model, per subject ``i``:

* each latent group ``g`` switches on with probability ``pi``;
* a feature of an active group joins in with probability ``q`` and then
  shares the group's event count (``1 + Poisson(lam)``) and event days;
* any feature may also fire on its own with a small background probability,
  with independent count and days;
* the label is Bernoulli with ``logit p = b0 + sum_g w_g * active_g``, with
  ``b0`` fitted so the mean risk equals ``event_rate``.

``pi``, ``q`` and ``lam`` are solved from the targets (cell sparsity, mean
sentence length, within-group Pearson correlation) in closed form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .core import (
    LOOKBACK,
    MAJOR_DISEASES,
    PREDICTION_HORIZON,
    Cohort,
    ConfigError,
    EventRecord,
    Exclusion,
    Family,
    Label,
    OutcomeKind,
    RawOutcome,
    assign_index_dates,
)
from .encode import BIN_DAYS, N_TIME, encode_cohort

EVENT_TYPES = ("sudden_death", "mi", "stroke", "arrhythmia")
EVENT_TYPE_P = (0.4, 0.3, 0.2, 0.1)

# fraction of the year's days falling in each bin (last bin is 5 days long)
_BIN_W = np.array([min(BIN_DAYS, LOOKBACK - b * BIN_DAYS) for b in range(N_TIME)]) / LOOKBACK


@dataclass
class SynthConfig:
    n_subjects: int = 1000
    n_hospitalisation: int = 318
    n_prescription: int = 196
    n_blood_test: int = 103
    n_history: int = 10
    n_demographic: int = 2
    n_latent_groups: int = 60
    within_group_corr: float = 0.8
    event_rate: float = 0.3
    sparsity_target: float = 0.989
    target_sentence_length: float = 90.0
    # overrides the sentence-length target when set
    events_per_activation: float | None = None
    noise_fraction: float = 0.02
    risk_weights: Sequence[float] | None = None
    # used only when risk_weights is None
    signal_strength: float = 1.5
    n_signal_groups: int = 3
    signal_families: Sequence[str] | None = None
    family_aligned: bool = True
    outcome_kind: str = OutcomeKind.SUDDEN_DEATH.value
    seed: int = 0

    def validate(self) -> None:
        ints = ("n_subjects", "n_hospitalisation", "n_prescription", "n_blood_test",
                "n_history", "n_demographic", "n_latent_groups")
        for name in ints:
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be at least 1")
        if self.n_history > len(MAJOR_DISEASES):
            raise ConfigError(f"n_history must be at most {len(MAJOR_DISEASES)}")
        if self.n_demographic > 2:
            raise ConfigError("n_demographic must be 0, 1 (age) or 2 (age, sex)")
        if not 0.0 < self.sparsity_target < 1.0:
            raise ConfigError("sparsity_target must lie in (0, 1)")
        if not 0.0 < self.event_rate < 1.0:
            raise ConfigError("event_rate must lie in (0, 1)")
        if not 0.0 <= self.within_group_corr < 1.0:
            raise ConfigError("within_group_corr must lie in [0, 1)")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ConfigError("noise_fraction must lie in [0, 1)")
        if self.n_latent_groups < 1:
            raise ConfigError("n_latent_groups must be at least 1")
        if self.n_latent_groups > self.n_units:
            raise ConfigError("n_latent_groups exceeds the number of groupable features")
        if self.risk_weights is not None and len(self.risk_weights) != self.n_latent_groups:
            raise ConfigError("risk_weights needs one weight per latent group")
        if self.events_per_activation is not None and self.events_per_activation < 1:
            raise ConfigError("events_per_activation must be at least 1")
        OutcomeKind(self.outcome_kind)
        if self.signal_families is not None:
            for fam in self.signal_families:
                Family(fam)

    @property
    def n_markers(self) -> int:
        return (self.n_blood_test + 1) // 2

    @property
    def n_values(self) -> int:
        return self.n_blood_test // 2

    @property
    def n_event_units(self) -> int:
        return self.n_hospitalisation + self.n_prescription + self.n_markers

    @property
    def n_units(self) -> int:
        """Features that belong to a latent group (values follow their marker)."""
        return self.n_event_units + self.n_history

    @property
    def n_features(self) -> int:
        return self.n_units + self.n_values + self.n_demographic

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("risk_weights", "signal_families"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


@dataclass(frozen=True)
class Rates:
    lam: float  # extra events per activation beyond the first
    p_active: float  # marginal probability a feature is active for a subject
    group_rate: float  # pi
    join_rate: float  # q
    background: float  # epsilon

    @property
    def max_corr(self) -> float:
        return _corr(self.p_active, self.group_rate * self.join_rate, self.background, self.lam, 1.0)


def _corr(p_active: float, a: float, eps: float, lam: float, q: float) -> float:
    mu = 1.0 + lam
    m2 = lam + mu * mu
    var = p_active * m2 - (p_active * mu) ** 2
    cov = (a * q * m2 + 2 * a * (1 - q) * eps * mu * mu
           + (1 - 2 * a + a * q) * eps * eps * mu * mu - (p_active * mu) ** 2)
    return cov / var


def _distinct_bins(lam: float) -> np.ndarray:
    """P(bin b receives >=1 of 1 + Poisson(lam) uniformly placed events)."""
    return 1.0 - (1.0 - _BIN_W) * np.exp(-lam * _BIN_W)


def _cells_per_subject(cfg: SynthConfig, p_active: float, lam: float) -> float:
    static = N_TIME * ((cfg.n_demographic >= 1) + 0.5 * (cfg.n_demographic >= 2))
    dyn = (cfg.n_event_units + cfg.n_values) * p_active * _distinct_bins(lam).sum()
    return dyn + N_TIME * cfg.n_history * p_active + static


def _solve_p_active(cfg: SynthConfig, lam: float) -> float:
    total = cfg.n_features * N_TIME
    static = N_TIME * ((cfg.n_demographic >= 1) + 0.5 * (cfg.n_demographic >= 2))
    per_unit = (cfg.n_event_units + cfg.n_values) * _distinct_bins(lam).sum() + N_TIME * cfg.n_history
    if per_unit == 0:
        raise ConfigError("no dynamic features to generate")
    return ((1.0 - cfg.sparsity_target) * total - static) / per_unit


def _rates_for_lam(cfg: SynthConfig, lam: float) -> Rates:
    p = _solve_p_active(cfg, lam)
    if not 0.0 < p < 1.0:
        static = N_TIME * ((cfg.n_demographic >= 1) + 0.5 * (cfg.n_demographic >= 2))
        lo = 1.0 - static / (cfg.n_features * N_TIME)
        raise ConfigError(
            f"sparsity_target {cfg.sparsity_target} infeasible; static features alone "
            f"bound sparsity above by {lo:.4f}"
        )
    eps = cfg.noise_fraction * p
    a = (p - eps) / (1.0 - eps)
    rho = cfg.within_group_corr
    c1 = _corr(p, a, eps, lam, 1.0) - _corr(p, a, eps, lam, 0.0)
    c0 = _corr(p, a, eps, lam, 0.0)
    q = (rho - c0) / c1
    rho_max = c0 + c1
    if q > 1.0 + 1e-12:
        raise ConfigError(
            f"within_group_corr {rho} unreachable at this sparsity; achievable bound {rho_max:.4f}"
        )
    q = min(q, 1.0)
    if q < a:
        raise ConfigError(
            f"within_group_corr {rho} too low for this sparsity; minimum {c0 + c1 * a:.4f}"
        )
    return Rates(lam=lam, p_active=p, group_rate=a / q, join_rate=q, background=eps)


def _expected_length(cfg: SynthConfig, r: Rates) -> float:
    h = _distinct_bins(r.lam)
    group_sources = cfg.n_latent_groups * r.group_rate
    noise_sources = cfg.n_event_units * (1.0 - r.group_rate * r.join_rate) * r.background
    segments = (1.0 - np.exp(-(group_sources + noise_sources) * h)).sum()
    events = cfg.n_event_units * r.p_active * (1.0 + r.lam)
    return events + segments + cfg.n_demographic + cfg.n_history * r.p_active


def solve_rates(cfg: SynthConfig) -> Rates:
    cfg.validate()
    if cfg.events_per_activation is not None:
        return _rates_for_lam(cfg, cfg.events_per_activation - 1.0)
    target = cfg.target_sentence_length

    def gap(lam):
        return _expected_length(cfg, _rates_for_lam(cfg, lam)) - target

    lo, hi = 0.0, 400.0
    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo > 0 or g_hi < 0:
        bound = g_lo + target if g_lo > 0 else g_hi + target
        raise ConfigError(
            f"target_sentence_length {target} unreachable at sparsity "
            f"{cfg.sparsity_target}; nearest achievable {bound:.1f}"
        )
    return _rates_for_lam(cfg, brentq(gap, lo, hi, xtol=1e-10))


# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    feature_groups: dict[str, int]
    risk: dict[str, float]
    event_types: dict[str, str]
    group_active: dict[str, list[int]]
    risk_weights: list[float]
    group_families: list[str]
    rates: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(**d)


def _feature_codes(cfg: SynthConfig) -> dict[Family, list[str]]:
    hosp = [f"{chr(65 + j % 26)}{j // 26:03d}" for j in range(cfg.n_hospitalisation)]
    rx = [f"{1 + j // 40:02d}{1 + j % 40:02d}" for j in range(cfg.n_prescription)]
    labs = [f"lab{j:03d}" for j in range(cfg.n_markers)]
    return {
        Family.HOSPITALISATION: hosp,
        Family.PRESCRIPTION: rx,
        Family.BLOOD_TEST_MARKER: labs,
        Family.BLOOD_TEST_VALUE: labs[: cfg.n_values],
        Family.HISTORY: list(MAJOR_DISEASES[: cfg.n_history]),
        Family.DEMOGRAPHIC: ["age", "sex"][: cfg.n_demographic],
    }


_UNIT_FAMILIES = (Family.HOSPITALISATION, Family.PRESCRIPTION, Family.BLOOD_TEST_MARKER, Family.HISTORY)


def _assign_groups(cfg: SynthConfig) -> tuple[list[tuple[Family, str]], np.ndarray, list[Family | None]]:
    """Units (groupable features) in a fixed order and their latent group."""
    codes = _feature_codes(cfg)
    units = [(fam, c) for fam in _UNIT_FAMILIES for c in codes[fam]]
    G = cfg.n_latent_groups
    sizes = {fam: len(codes[fam]) for fam in _UNIT_FAMILIES if codes[fam]}
    groups = np.empty(len(units), dtype=np.int64)
    group_family: list[Family | None] = [None] * G
    if cfg.family_aligned and G >= len(sizes):
        # largest-remainder allocation, one group minimum per family
        total = sum(sizes.values())
        alloc = {f: 1 for f in sizes}
        spare = G - len(sizes)
        quota = {f: spare * n / total for f, n in sizes.items()}
        for f in sizes:
            alloc[f] += int(math.floor(quota[f]))
        left = G - sum(alloc.values())
        for f in sorted(sizes, key=lambda f: -(quota[f] - math.floor(quota[f])))[:left]:
            alloc[f] += 1
        for f in sizes:
            alloc[f] = min(alloc[f], sizes[f])
        # groups trimmed by small families go to the largest family
        short = G - sum(alloc.values())
        if short:
            big = max(sizes, key=lambda f: sizes[f] - alloc[f])
            alloc[big] += short
        start = 0
        pos = 0
        for fam in _UNIT_FAMILIES:
            n = sizes.get(fam, 0)
            if not n:
                continue
            g_f = alloc[fam]
            groups[pos: pos + n] = start + np.arange(n) % g_f
            for g in range(start, start + g_f):
                group_family[g] = fam
            start += g_f
            pos += n
    else:
        groups[:] = np.arange(len(units)) % G
    return units, groups, group_family


def _risk_weights(cfg: SynthConfig, group_family: list[Family | None]) -> np.ndarray:
    if cfg.risk_weights is not None:
        return np.asarray(cfg.risk_weights, dtype=float)
    w = np.zeros(cfg.n_latent_groups)
    eligible = list(range(cfg.n_latent_groups))
    if cfg.signal_families is not None:
        fams = {Family(f) for f in cfg.signal_families}
        eligible = [g for g in eligible if group_family[g] in fams]
    for g in eligible[: cfg.n_signal_groups]:
        w[g] = cfg.signal_strength
    return w


def _event_days(rng: np.random.Generator, count: int) -> np.ndarray:
    return np.sort(rng.integers(0, LOOKBACK, size=count))


def generate_cohort(cfg: SynthConfig) -> tuple[Cohort, GroundTruth]:
    """Draw a cohort and its ground truth; identical configs give identical output."""
    rates = solve_rates(cfg)
    units, unit_group, group_family = _assign_groups(cfg)
    codes = _feature_codes(cfg)
    weights = _risk_weights(cfg, group_family)
    kind = OutcomeKind(cfg.outcome_kind)
    G, U, N = cfg.n_latent_groups, len(units), cfg.n_subjects

    feat_rng = np.random.default_rng([cfg.seed, 0x5EED])
    lab_mean = 10.0 ** feat_rng.uniform(0.0, 2.0, size=cfg.n_markers)

    n_values = cfg.n_values
    is_marker = np.array([fam is Family.BLOOD_TEST_MARKER for fam, _ in units])
    marker_pos = np.cumsum(is_marker) - 1

    active_groups = np.zeros((N, G), dtype=bool)
    per_subject = []
    for i in range(N):
        rng = np.random.default_rng([cfg.seed, i])
        s = rng.random(G) < rates.group_rate
        join = rng.random(U) < rates.join_rate
        noise = rng.random(U) < rates.background
        group_counts = 1 + rng.poisson(rates.lam, size=G)
        group_days = [_event_days(rng, c) for c in group_counts]
        u_label = rng.random()
        age = int(np.clip(np.round(rng.normal(72.0, 9.0)), 50, 100))
        sex = int(rng.random() < 0.5)
        event_type = EVENT_TYPES[int(rng.choice(len(EVENT_TYPES), p=EVENT_TYPE_P))]
        event_day = int(rng.integers(LOOKBACK + PREDICTION_HORIZON, LOOKBACK + PREDICTION_HORIZON + 730))
        via_group = s[unit_group] & join
        via_noise = noise & ~via_group
        dynamic = []  # (delta_days, family, code, value)
        for u in np.flatnonzero(via_group | via_noise):
            fam, code = units[u]
            if via_group[u]:
                days = group_days[unit_group[u]]
            else:
                days = _event_days(rng, 1 + rng.poisson(rates.lam))
            if fam is Family.HISTORY:
                dynamic.append((None, fam, code, None))
                continue
            for d in days:
                dynamic.append((int(d), fam, code, None))
                if fam is Family.BLOOD_TEST_MARKER and marker_pos[u] < n_values:
                    val = lab_mean[marker_pos[u]] * math.exp(0.25 * rng.standard_normal())
                    dynamic.append((int(d), Family.BLOOD_TEST_VALUE, code, round(val, 3)))
        active_groups[i] = s
        per_subject.append((u_label, age, sex, event_type, event_day, dynamic))

    logits = active_groups.astype(float) @ weights
    if np.all(logits == logits[0]):
        b0 = math.log(cfg.event_rate / (1 - cfg.event_rate)) - logits[0]
    else:
        b0 = brentq(lambda b: np.mean(1 / (1 + np.exp(-(b + logits)))) - cfg.event_rate, -60, 60)
    risk = 1.0 / (1.0 + np.exp(-(b0 + logits)))

    sids = [f"S{i:06d}" for i in range(N)]
    raw = []
    for i, (u_label, _, _, event_type, event_day, _) in enumerate(per_subject):
        if u_label < risk[i]:
            raw.append(RawOutcome(sids[i], Label.EVENT, 0, event_day + 1, event_day=event_day,
                                  qualifying_days=(event_day,), event_type=event_type))
        else:
            raw.append(RawOutcome(sids[i], Label.CONTROL, 0, event_day + PREDICTION_HORIZON,
                                  event_type="no_event"))
    labels, exclusions = assign_index_dates(raw, kind, cfg.seed)
    index_day = {lab.subject_id: lab.index_day for lab in labels}

    events: list[EventRecord] = []
    kept_labels = []
    for i, (_, age, sex, _, _, dynamic) in enumerate(per_subject):
        sid = sids[i]
        if sid not in index_day:
            continue
        idx = index_day[sid]
        rows = []
        for delta, fam, code, val in dynamic:
            day = idx if delta is None else idx - delta
            rows.append(EventRecord(sid, day, fam, code, value=val))
        if cfg.n_demographic >= 1:
            rows.append(EventRecord(sid, idx, Family.DEMOGRAPHIC, "age", value=float(age)))
        if cfg.n_demographic >= 2:
            rows.append(EventRecord(sid, idx, Family.DEMOGRAPHIC, "sex", value=float(sex)))
        if not rows:
            exclusions.append(Exclusion(sid, kind, "no events"))
            continue
        rows.sort(key=lambda e: (e.event_day, e.family.value, e.code, e.value or 0.0))
        events.extend(rows)
    kept = {e.subject_id for e in events}
    kept_labels = [lab for lab in labels if lab.subject_id in kept]
    cohort = Cohort(tuple(events), tuple(kept_labels), tuple(exclusions))

    feature_groups: dict[str, int] = {}
    for (fam, code), g in zip(units, unit_group):
        feature_groups[fam.prefix + code] = int(g)
    for code in codes[Family.BLOOD_TEST_VALUE]:
        feature_groups[Family.BLOOD_TEST_VALUE.prefix + code] = feature_groups[
            Family.BLOOD_TEST_MARKER.prefix + code
        ]
    for code in codes[Family.DEMOGRAPHIC]:
        feature_groups[Family.DEMOGRAPHIC.prefix + code] = -1

    truth = GroundTruth(
        feature_groups=feature_groups,
        risk={sid: float(r) for sid, r in zip(sids, risk)},
        event_types={lab.subject_id: lab.event_type for lab in kept_labels},
        group_active={sid: np.flatnonzero(active_groups[i]).tolist() for i, sid in enumerate(sids)},
        risk_weights=weights.tolist(),
        group_families=[f.value if f is not None else "" for f in group_family],
        rates=asdict(rates),
        config=cfg.to_dict(),
    )
    return cohort, truth


def cohort_stats(cohort: Cohort, outcome_kind: OutcomeKind | None = None) -> dict:
    """Sparsity of the tensor encoding, sentence-length summary and event rate."""
    if not cohort.labels:
        raise ValueError("empty cohort")
    kind = OutcomeKind(outcome_kind) if outcome_kind else cohort.outcome_kinds[0]
    enc = encode_cohort(cohort, kind)
    lengths = np.array([len(d) for d in enc.docs], dtype=float)
    return {
        "outcome_kind": kind.value,
        "n_subjects": len(enc),
        "n_features": enc.vocab.n_features,
        "sparsity": enc.tensor.sparsity(),
        "sentence_length_min": float(lengths.min()),
        "sentence_length_max": float(lengths.max()),
        "sentence_length_mean": float(lengths.mean()),
        "sentence_length_sd": float(lengths.std()),
        "event_rate": float(enc.y.mean()),
    }
