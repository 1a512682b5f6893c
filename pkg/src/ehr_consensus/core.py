"""Domain types, cohort assembly and outcome labelling."""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration supplied by the caller."""


class Family(str, enum.Enum):
    HOSPITALISATION = "Hospitalisation"
    PRESCRIPTION = "Prescription"
    BLOOD_TEST_MARKER = "BloodTestMarker"
    BLOOD_TEST_VALUE = "BloodTestValue"
    DEMOGRAPHIC = "Demographic"
    HISTORY = "HistoryOfDisease"

    @property
    def short(self) -> str:
        return FAMILY_SHORT[self]

    @property
    def prefix(self) -> str:
        return FAMILY_PREFIX[self]

    @property
    def is_static(self) -> bool:
        return self in (Family.DEMOGRAPHIC, Family.HISTORY)

    @classmethod
    def from_short(cls, code: str) -> "Family":
        try:
            return SHORT_FAMILY[code.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown family code {code!r}") from None


FAMILY_SHORT = {
    Family.HOSPITALISATION: "HOSP",
    Family.PRESCRIPTION: "RX",
    Family.BLOOD_TEST_MARKER: "LABM",
    Family.BLOOD_TEST_VALUE: "LABV",
    Family.DEMOGRAPHIC: "DEMO",
    Family.HISTORY: "HIST",
}
SHORT_FAMILY = {v: k for k, v in FAMILY_SHORT.items()}

# Token prefixes; the sentence encoding uses h_/m_/t_ for events.
FAMILY_PREFIX = {
    Family.HOSPITALISATION: "h_",
    Family.PRESCRIPTION: "m_",
    Family.BLOOD_TEST_MARKER: "t_",
    Family.BLOOD_TEST_VALUE: "v_",
    Family.DEMOGRAPHIC: "d_",
    Family.HISTORY: "hist_",
}


def family_of_token(token: str) -> Family:
    """Family tag of a feature token, from its prefix."""
    # "hist_" must be tested before "h_"
    for fam in sorted(FAMILY_PREFIX, key=lambda f: -len(FAMILY_PREFIX[f])):
        if token.startswith(FAMILY_PREFIX[fam]):
            return fam
    raise ValueError(f"token {token!r} carries no family prefix")


class OutcomeKind(str, enum.Enum):
    SUDDEN_DEATH = "SuddenDeathComposite"
    ALL_CAUSE = "AllCauseMortality"


class Label(str, enum.Enum):
    EVENT = "Event"
    CONTROL = "Control"


# Days before the event day within which the index date is drawn.
PREDICTION_HORIZON = 180
# Days of history encoded before the index date.
LOOKBACK = 365


@dataclass(frozen=True)
class EventRecord:
    subject_id: str
    event_day: int
    family: Family
    code: str
    value: float | None = None
    unit: str | None = None

    def __post_init__(self):
        if not isinstance(self.event_day, (int, np.integer)):
            raise ValueError(f"event_day must be an integer, got {self.event_day!r}")
        if not self.code:
            raise ValueError("event code must be non-empty")
        if self.value is not None and not math.isfinite(self.value):
            raise ValueError(f"non-finite value for {self.code!r}")
        needs_value = self.family in (Family.BLOOD_TEST_VALUE, Family.DEMOGRAPHIC)
        if needs_value and self.value is None:
            raise ValueError(f"{self.family.value} event {self.code!r} requires a value")
        if not needs_value and self.value is not None:
            raise ValueError(f"{self.family.value} event {self.code!r} must not carry a value")

    @property
    def token(self) -> str:
        return self.family.prefix + self.code


@dataclass(frozen=True)
class OutcomeLabel:
    subject_id: str
    outcome_kind: OutcomeKind
    label: Label
    index_day: int
    # Day of the qualifying event (Event labels only).
    event_day: int | None = None
    # Finer event category, e.g. "sudden_death", "mi"; "no_event" for controls.
    event_type: str | None = None

    def __post_init__(self):
        if self.label is Label.EVENT:
            if self.event_day is None:
                raise ValueError(f"Event label for {self.subject_id} needs event_day")
            gap = self.event_day - self.index_day
            if not 0 <= gap <= PREDICTION_HORIZON:
                raise ValueError(
                    f"index_day must precede event_day by 0-{PREDICTION_HORIZON} days "
                    f"(subject {self.subject_id}, gap {gap})"
                )

    @property
    def y(self) -> int:
        return int(self.label is Label.EVENT)


@dataclass(frozen=True)
class Exclusion:
    subject_id: str
    outcome_kind: OutcomeKind
    reason: str


@dataclass(frozen=True)
class Cohort:
    events: tuple[EventRecord, ...]
    labels: tuple[OutcomeLabel, ...]
    exclusions: tuple[Exclusion, ...] = ()
    _by_subject: Mapping[str, tuple[EventRecord, ...]] = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "exclusions", tuple(self.exclusions))
        grouped: dict[str, list[EventRecord]] = {}
        for ev in self.events:
            grouped.setdefault(ev.subject_id, []).append(ev)
        object.__setattr__(
            self, "_by_subject", {k: tuple(v) for k, v in grouped.items()}
        )
        seen = set()
        for lab in self.labels:
            key = (lab.subject_id, lab.outcome_kind)
            if key in seen:
                raise ValueError(f"duplicate label for {key}")
            seen.add(key)
            if lab.subject_id not in self._by_subject:
                raise ValueError(f"labelled subject {lab.subject_id} has no events")

    def events_for(self, subject_id: str) -> tuple[EventRecord, ...]:
        return self._by_subject.get(subject_id, ())

    def labels_for(self, outcome_kind: OutcomeKind) -> list[OutcomeLabel]:
        """Labels of one outcome, ordered by subject id."""
        kind = OutcomeKind(outcome_kind)
        return sorted(
            (lab for lab in self.labels if lab.outcome_kind is kind),
            key=lambda lab: lab.subject_id,
        )

    @property
    def outcome_kinds(self) -> list[OutcomeKind]:
        return sorted({lab.outcome_kind for lab in self.labels}, key=lambda k: k.value)


def subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    """Per-subject generator, independent of iteration order."""
    return np.random.default_rng([int(seed), zlib.crc32(subject_id.encode("utf-8"))])


# ---------------------------------------------------------------------------
# History of major disease

MAJOR_DISEASES = (
    "HeartFailure",
    "ChronicIschemicHeartDisease",
    "LiverDisease",
    "Seizures",
    "Stroke",
    "KidneyDisease",
    "PrimaryHypertension",
    "HypertensiveHeartDisease",
    "ChronicKidneyDisease",
    "Type1Diabetes",
    "Type2Diabetes",
)

DEFAULT_DISEASE_CODES: dict[str, tuple[str, ...]] = {
    "HeartFailure": ("I50",),
    "ChronicIschemicHeartDisease": ("I25",),
    "LiverDisease": ("K70", "K71", "K72", "K73", "K74", "K75", "K76", "K77"),
    "Seizures": ("G40", "G41", "R56"),
    "Stroke": ("I60", "I61", "I62", "I63", "I64"),
    "KidneyDisease": ("N00", "N01", "N03", "N04", "N05", "N17", "N19"),
    "PrimaryHypertension": ("I10",),
    "HypertensiveHeartDisease": ("I11",),
    "ChronicKidneyDisease": ("N18",),
    "Type1Diabetes": ("E10",),
    "Type2Diabetes": ("E11",),
}


def _check_disease_codes(disease_codes: Mapping[str, Sequence[str]]) -> None:
    unknown = sorted(set(disease_codes) - set(MAJOR_DISEASES))
    if unknown:
        raise ConfigError(f"unknown disease keys: {unknown}")
    missing = [d for d in MAJOR_DISEASES if not disease_codes.get(d)]
    if missing:
        raise ConfigError(f"no code prefixes configured for: {missing}")


def derive_history_flags(
    events: Iterable[EventRecord],
    index_days: Mapping[str, int],
    disease_codes: Mapping[str, Sequence[str]] = DEFAULT_DISEASE_CODES,
) -> dict[str, dict[str, bool]]:
    """Flag each major disease a subject was hospitalised for on or before index.

    Returns ``{subject_id: {disease: flag}}`` for every subject in
    ``index_days``.
    """
    _check_disease_codes(disease_codes)
    prefixes = {
        d: tuple(p.replace(".", "").upper() for p in disease_codes[d]) for d in MAJOR_DISEASES
    }
    flags = {sid: dict.fromkeys(MAJOR_DISEASES, False) for sid in index_days}
    for ev in events:
        if ev.family is not Family.HOSPITALISATION or ev.subject_id not in flags:
            continue
        if ev.event_day > index_days[ev.subject_id]:
            continue
        code = ev.code.replace(".", "").upper()
        for disease, pre in prefixes.items():
            if code.startswith(pre):
                flags[ev.subject_id][disease] = True
    return flags


def history_events(
    flags: Mapping[str, Mapping[str, bool]], index_days: Mapping[str, int]
) -> list[EventRecord]:
    """HistoryOfDisease records for the true flags, pinned to the index day."""
    out = []
    for sid in sorted(flags):
        for disease in MAJOR_DISEASES:
            if flags[sid].get(disease):
                out.append(EventRecord(sid, int(index_days[sid]), Family.HISTORY, disease))
    return out


# ---------------------------------------------------------------------------
# Index dates


@dataclass(frozen=True)
class RawOutcome:
    """Per-subject outcome facts before an index date is chosen.

    ``qualifying_days`` lists days of events that would count as an outcome;
    for Event subjects ``event_day`` is the first of them.
    """

    subject_id: str
    label: Label
    observation_start: int
    observation_end: int
    event_day: int | None = None
    qualifying_days: tuple[int, ...] = ()
    event_type: str | None = None


def assign_index_dates(
    raw: Iterable[RawOutcome], outcome_kind: OutcomeKind, seed: int
) -> tuple[list[OutcomeLabel], list[Exclusion]]:
    """Draw an index day for every subject.

    Event subjects get ``event_day - U`` with ``U`` uniform on 0..180.
    Controls get a day, uniformly chosen, leaving a full year of history
    behind it and no qualifying event in the 180 days after it.
    """
    kind = OutcomeKind(outcome_kind)
    labels: list[OutcomeLabel] = []
    excluded: list[Exclusion] = []
    for r in sorted(raw, key=lambda r: r.subject_id):
        rng = subject_rng(seed, r.subject_id)
        if r.label is Label.EVENT:
            if r.event_day is None:
                raise ValueError(f"event subject {r.subject_id} has no event day")
            offset = int(rng.integers(0, PREDICTION_HORIZON + 1))
            labels.append(
                OutcomeLabel(
                    r.subject_id, kind, Label.EVENT, r.event_day - offset,
                    event_day=r.event_day, event_type=r.event_type,
                )
            )
            continue
        lo = r.observation_start + LOOKBACK
        hi = r.observation_end - PREDICTION_HORIZON
        if hi < lo:
            excluded.append(Exclusion(r.subject_id, kind, "observation span too short"))
            continue
        days = np.arange(lo, hi + 1)
        ok = np.ones(days.size, dtype=bool)
        for q in r.qualifying_days:
            # index d is invalid when q falls in (d, d + 180]
            ok &= ~((q > days) & (q <= days + PREDICTION_HORIZON))
        if not ok.any():
            excluded.append(Exclusion(r.subject_id, kind, "no event-free window"))
            continue
        day = int(rng.choice(days[ok]))
        labels.append(
            OutcomeLabel(
                r.subject_id, kind, Label.CONTROL, day,
                event_type=r.event_type or "no_event",
            )
        )
    return labels, excluded


# ---------------------------------------------------------------------------
# Terminal illness exclusion


def filter_terminal_illness(
    cohort: Cohort,
    terminal_code_prefixes: Sequence[str],
    outcome_kind: OutcomeKind = OutcomeKind.SUDDEN_DEATH,
) -> Cohort:
    """Drop sudden-death Event subjects with a terminal-illness code in the year before the event.

    All-cause mortality cohorts are returned unchanged.
    """
    kind = OutcomeKind(outcome_kind)
    if kind is OutcomeKind.ALL_CAUSE:
        return cohort
    if not terminal_code_prefixes:
        raise ConfigError("terminal illness prefixes are required for sudden death cohorts")
    prefixes = tuple(p.replace(".", "").upper() for p in terminal_code_prefixes)

    drop = set()
    for lab in cohort.labels:
        if lab.outcome_kind is not kind or lab.label is not Label.EVENT:
            continue
        for ev in cohort.events_for(lab.subject_id):
            if ev.family is not Family.HOSPITALISATION:
                continue
            if not lab.event_day - LOOKBACK <= ev.event_day <= lab.event_day:
                continue
            if ev.code.replace(".", "").upper().startswith(prefixes):
                drop.add(lab.subject_id)
                break
    if not drop:
        return cohort
    labels = tuple(
        lab for lab in cohort.labels
        if not (lab.outcome_kind is kind and lab.subject_id in drop)
    )
    exclusions = cohort.exclusions + tuple(
        Exclusion(sid, kind, "terminal illness in year before event") for sid in sorted(drop)
    )
    return Cohort(cohort.events, labels, exclusions)
