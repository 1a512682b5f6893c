"""Readers and writers for the delimited text formats exchanged by the CLI."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import Cohort, EventRecord, Family, Label, OutcomeKind, OutcomeLabel

EVENT_HEADER = ("subject_id", "event_day", "family", "code", "value", "unit")
LABEL_HEADER = ("subject_id", "outcome_kind", "label", "index_day", "event_day", "event_type")


class FormatError(ValueError):
    pass


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def write_events(path, events: Iterable[EventRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for e in events:
            w.writerow([e.subject_id, e.event_day, e.family.short, e.code, _num(e.value), e.unit or ""])


def read_events(path) -> list[EventRecord]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if tuple(header or ()) != EVENT_HEADER:
            raise FormatError(f"{path}: event header must be {','.join(EVENT_HEADER)}")
        for n, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != len(EVENT_HEADER):
                raise FormatError(f"{path}:{n}: expected {len(EVENT_HEADER)} fields")
            sid, day, fam, code, value, unit = row
            try:
                out.append(EventRecord(
                    sid, int(day), Family.from_short(fam), code,
                    value=float(value) if value != "" else None, unit=unit or None,
                ))
            except (ValueError, KeyError) as exc:
                raise FormatError(f"{path}:{n}: {exc}") from None
    return out


def write_labels(path, labels: Iterable[OutcomeLabel]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for lab in labels:
            w.writerow([
                lab.subject_id, lab.outcome_kind.value, lab.label.value, lab.index_day,
                "" if lab.event_day is None else lab.event_day, lab.event_type or "",
            ])


def read_labels(path) -> list[OutcomeLabel]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if tuple(header or ()) != LABEL_HEADER:
            raise FormatError(f"{path}: label header must be {','.join(LABEL_HEADER)}")
        for n, row in enumerate(r, start=2):
            if not row:
                continue
            try:
                sid, kind, label, index_day, event_day, event_type = row
                out.append(OutcomeLabel(
                    sid, OutcomeKind(kind), Label(label), int(index_day),
                    event_day=int(event_day) if event_day else None, event_type=event_type or None,
                ))
            except ValueError as exc:
                raise FormatError(f"{path}:{n}: {exc}") from None
    return out


def read_cohort(events_path, labels_path) -> Cohort:
    return Cohort(tuple(read_events(events_path)), tuple(read_labels(labels_path)))


# ---------------------------------------------------------------------------
# "key value" line files


def write_pairs(path, pairs: Iterable[tuple[str, object]]) -> None:
    lines = []
    for k, v in pairs:
        v = repr(float(v)) if isinstance(v, float) else str(v)
        lines.append(f"{k} {v}\n")
    Path(path).write_text("".join(lines))


def read_pairs(path) -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rsplit(" ", 1)
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'key value'")
        out.append((parts[0], parts[1]))
    return out


def read_scores(path) -> dict[str, float]:
    out = {}
    for sid, val in read_pairs(path):
        try:
            out[sid] = float(val)
        except ValueError:
            raise FormatError(f"{path}: bad score for {sid!r}") from None
    return out


def read_clusters(path) -> dict[str, int]:
    return {tok: int(c) for tok, c in read_pairs(path)}


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> None:
    cols = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_cell(row.get(c, "")) for c in cols])


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"cannot serialise {type(o).__name__}")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
