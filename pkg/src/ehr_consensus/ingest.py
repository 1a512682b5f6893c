"""Cleaning of raw tabular extracts into normalised event records."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .core import ConfigError, EventRecord, Family

OTHER_TEST = "other"


@dataclass(frozen=True)
class LabCleaningRule:
    canonical_name: str
    aliases: frozenset[str]
    unit_conversions: Mapping[str, float]
    bio_min: float
    bio_max: float

    def __post_init__(self):
        if not self.bio_min < self.bio_max:
            raise ConfigError(f"{self.canonical_name}: bio_min must be below bio_max")
        if not self.aliases:
            raise ConfigError(f"{self.canonical_name}: at least one alias required")
        if 1.0 not in self.unit_conversions.values():
            raise ConfigError(f"{self.canonical_name}: canonical unit (factor 1) missing")
        # the canonical name always matches itself
        names = {*self.aliases, self.canonical_name}
        object.__setattr__(self, "aliases", frozenset(_norm(a) for a in names))
        object.__setattr__(
            self,
            "unit_conversions",
            {_norm(u): float(f) for u, f in self.unit_conversions.items()},
        )


def _norm(text: str) -> str:
    return " ".join(str(text).strip().lower().split())


def load_rules(path: str | Path | None = None) -> list[LabCleaningRule]:
    """Read rules from a YAML file; the bundled panel when ``path`` is None."""
    if path is None:
        text = resources.files("ehr_consensus").joinpath("data/lab_rules.yaml").read_text()
    else:
        text = Path(path).read_text()
    doc = yaml.safe_load(text) or {}
    rules = []
    for rec in doc.get("rules", []):
        try:
            rules.append(
                LabCleaningRule(
                    canonical_name=rec["name"],
                    aliases=frozenset([rec["name"], *rec.get("aliases", [])]),
                    unit_conversions=rec["units"],
                    bio_min=float(rec["bio_min"]),
                    bio_max=float(rec["bio_max"]),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"lab rule {rec!r} is missing field {exc}") from None
    names = [r.canonical_name for r in rules]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate canonical lab names in rule file")
    return rules


@dataclass
class CleaningReport:
    rows: int = 0
    unmatched: int = 0
    matched: Counter = field(default_factory=Counter)
    converted: Counter = field(default_factory=Counter)
    out_of_range: Counter = field(default_factory=Counter)
    unknown_unit: Counter = field(default_factory=Counter)
    missing_value: Counter = field(default_factory=Counter)
    # zeros are kept but may stand for missing results
    zero_values: Counter = field(default_factory=Counter)
    rejected_rows: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "rows": self.rows,
            "unmatched": self.unmatched,
            "matched": dict(sorted(self.matched.items())),
            "converted": dict(sorted(self.converted.items())),
            "out_of_range": dict(sorted(self.out_of_range.items())),
            "unknown_unit": dict(sorted(self.unknown_unit.items())),
            "missing_value": dict(sorted(self.missing_value.items())),
            "zero_values": dict(sorted(self.zero_values.items())),
            "rejected_rows": list(self.rejected_rows),
        }


@dataclass(frozen=True)
class LabRow:
    subject_id: str
    day: int
    name: str
    value: float | None
    unit: str | None


def clean_lab_rows(
    rows: Iterable[LabRow], rules: Sequence[LabCleaningRule]
) -> tuple[list[EventRecord], CleaningReport]:
    """Map raw blood-test rows to marker and value events.

    Every row yields a marker event. A value event is added only when the
    name resolves to a rule, the unit is convertible and the converted value
    lies inside the rule's biological range.
    """
    lookup: dict[str, LabCleaningRule] = {}
    for rule in rules:
        for alias in rule.aliases:
            if alias in lookup and lookup[alias] is not rule:
                raise ConfigError(f"alias {alias!r} claimed by two rules")
            lookup[alias] = rule

    report = CleaningReport()
    events: list[EventRecord] = []
    for row in rows:
        report.rows += 1
        rule = lookup.get(_norm(row.name))
        if rule is None:
            report.unmatched += 1
            events.append(EventRecord(row.subject_id, int(row.day), Family.BLOOD_TEST_MARKER, OTHER_TEST))
            continue
        name = rule.canonical_name
        report.matched[name] += 1
        events.append(EventRecord(row.subject_id, int(row.day), Family.BLOOD_TEST_MARKER, name))

        if row.value is None:
            report.missing_value[name] += 1
            continue
        factor = rule.unit_conversions.get(_norm(row.unit or ""))
        if factor is None:
            report.unknown_unit[name] += 1
            continue
        if factor != 1.0:
            report.converted[name] += 1
        value = float(row.value) * factor
        if value == 0.0:
            report.zero_values[name] += 1
        if not rule.bio_min <= value <= rule.bio_max:
            report.out_of_range[name] += 1
            continue
        events.append(
            EventRecord(row.subject_id, int(row.day), Family.BLOOD_TEST_VALUE, name, value=value)
        )
    return events, report


# ---------------------------------------------------------------------------
# Coding systems

_ICD10 = re.compile(r"^[A-Z][0-9][0-9A-Z]*$")


def truncate_icd10(code: str) -> str:
    """Letter plus the first three digits, dot removed ("I26.02" -> "I260")."""
    if code is None or not str(code).strip():
        raise ValueError("empty ICD-10 code")
    flat = str(code).strip().upper().replace(".", "")
    if not _ICD10.match(flat):
        raise ValueError(f"malformed ICD-10 code {code!r}")
    return flat[:4]


def truncate_bnf(code: str, length: int = 4) -> str:
    """First ``length`` characters of a BNF code (chapter and section)."""
    if code is None or not str(code).strip():
        raise ValueError("empty BNF code")
    flat = str(code).strip().upper()
    if not flat.isalnum():
        raise ValueError(f"malformed BNF code {code!r}")
    if length < 1:
        raise ValueError("length must be positive")
    return flat[:length]


# ---------------------------------------------------------------------------
# Hospital stays


@dataclass(frozen=True)
class AdmissionRow:
    subject_id: str
    admit_day: int
    discharge_day: int
    diagnoses: tuple[str, ...]


@dataclass(frozen=True)
class HospitalStay:
    subject_id: str
    admit_day: int
    discharge_day: int
    diagnoses: tuple[str, ...]


def length_of_stay(stay: HospitalStay) -> int:
    los = stay.discharge_day - stay.admit_day
    if los < 0:
        raise ValueError(f"discharge before admission for {stay.subject_id}")
    return los


def merge_transfers(
    rows: Iterable[AdmissionRow], n_diagnoses: int = 2
) -> tuple[list[HospitalStay], list[AdmissionRow]]:
    """Collapse chains of transfers into single stays.

    A row whose admission falls on or before the running discharge day is a
    transfer. The merged stay keeps the first admission, the latest
    discharge and the diagnoses of the last segment, truncated to the first
    ``n_diagnoses`` (primary and secondary). Rows discharged before they
    were admitted are returned separately as rejects.
    """
    rejected: list[AdmissionRow] = []
    per_subject: dict[str, list[AdmissionRow]] = {}
    for row in rows:
        if row.discharge_day < row.admit_day:
            rejected.append(row)
            continue
        per_subject.setdefault(row.subject_id, []).append(row)

    stays: list[HospitalStay] = []
    for sid in sorted(per_subject):
        chain = sorted(per_subject[sid], key=lambda r: (r.admit_day, r.discharge_day))
        admit, discharge, dx = chain[0].admit_day, chain[0].discharge_day, chain[0].diagnoses
        for row in chain[1:]:
            if row.admit_day <= discharge:
                discharge = max(discharge, row.discharge_day)
                dx = row.diagnoses
            else:
                stays.append(HospitalStay(sid, admit, discharge, tuple(dx[:n_diagnoses])))
                admit, discharge, dx = row.admit_day, row.discharge_day, row.diagnoses
        stays.append(HospitalStay(sid, admit, discharge, tuple(dx[:n_diagnoses])))
    return stays, rejected


def stay_events(stays: Iterable[HospitalStay]) -> list[EventRecord]:
    """One hospitalisation event per retained diagnosis, dated at admission."""
    out = []
    for stay in stays:
        for code in stay.diagnoses:
            out.append(
                EventRecord(stay.subject_id, stay.admit_day, Family.HOSPITALISATION, truncate_icd10(code))
            )
    return out


@dataclass(frozen=True)
class PrescriptionRow:
    subject_id: str
    day: int
    bnf_code: str


def prescription_events(rows: Iterable[PrescriptionRow], bnf_length: int = 4) -> list[EventRecord]:
    return [
        EventRecord(r.subject_id, int(r.day), Family.PRESCRIPTION, truncate_bnf(r.bnf_code, bnf_length))
        for r in rows
    ]
