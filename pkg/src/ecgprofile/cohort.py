"""ECG / discharge-diagnosis cohort construction."""

from __future__ import annotations

import csv
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

_CODE_RE = re.compile(r"^[A-Z][0-9A-Z]+$")
DEFAULT_MIN_COUNT = 50


class CohortError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ICDCode:
    canonical: str

    def __post_init__(self):
        if not _CODE_RE.match(self.canonical):
            raise CohortError(f"unrecognized code: {self.canonical!r}")

    @property
    def chapter(self) -> str:
        return self.canonical[0]

    def __str__(self):
        return self.canonical


def normalize_icd(raw: str, strip_zeros: bool = True) -> ICDCode:
    """Canonical form: trimmed, upper case, dot-free.

    Leading zeros are only removed from the category (the digits before the
    dot) and never below two characters, so ``I050.1`` becomes ``I501`` while
    ``E00``, ``I021`` and any dot-free code keep their digits.
    """
    if isinstance(raw, ICDCode):
        return raw
    text = str(raw).strip().upper()
    if not text:
        raise CohortError("unrecognized code: empty string")
    if not text[0].isalpha() or not text[0].isascii():
        raise CohortError(f"unrecognized code: {raw!r}")
    if strip_zeros and "." in text:
        head, _, tail = text.partition(".")
        letter, digits = head[0], head[1:]
        while len(digits) > 2 and digits[0] == "0":
            digits = digits[1:]
        text = letter + digits + tail
    text = text.replace(".", "")
    if not _CODE_RE.match(text):
        raise CohortError(f"unrecognized code: {raw!r}")
    return ICDCode(text)


@dataclass
class LabelSpace:
    codes: list[ICDCode]
    names: list[str]
    counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise CohortError("duplicate codes in label space")
        if len(self.names) != len(self.codes):
            raise CohortError("every code needs a name entry (empty allowed)")
        if not self.counts:
            self.counts = [0] * len(self.codes)
        self.index = {code: i for i, code in enumerate(self.codes)}

    def __len__(self):
        return len(self.codes)

    @property
    def unnamed(self) -> list[ICDCode]:
        return [c for c, n in zip(self.codes, self.names) if not n]

    def position(self, code) -> int:
        return self.index[normalize_icd(code)]

    def write_tsv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["index", "code", "name", "train_count"])
            for i, (c, n, k) in enumerate(zip(self.codes, self.names, self.counts)):
                w.writerow([i, c.canonical, n, k])

    @classmethod
    def read_tsv(cls, path) -> "LabelSpace":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        rows.sort(key=lambda r: int(r["index"]))
        return cls([ICDCode(r["code"]) for r in rows], [r["name"] or "" for r in rows],
                   [int(r["train_count"] or 0) for r in rows])


def build_label_space(observed: Iterable, names: Mapping | None = None,
                      min_count: int = DEFAULT_MIN_COUNT) -> LabelSpace:
    if min_count < 1:
        raise CohortError("min_count must be >= 1")
    names = {normalize_icd(k): v for k, v in (names or {}).items()}
    counts = Counter(normalize_icd(code) for code in observed)
    kept = sorted(code for code, n in counts.items() if n >= min_count)
    if not kept:
        raise CohortError("no labels survive threshold")
    return LabelSpace(kept, [names.get(c, "") for c in kept], [counts[c] for c in kept])


def encode_labels(codes: Iterable, space: LabelSpace) -> tuple[np.ndarray, int]:
    """Bit-vector over ``space`` plus the number of codes that fell outside it."""
    bits = np.zeros(len(space), dtype=np.uint8)
    ignored = 0
    for code in {normalize_icd(c) for c in codes}:
        pos = space.index.get(code)
        if pos is None:
            ignored += 1
        else:
            bits[pos] = 1
    return bits, ignored


def decode_labels(bits, space: LabelSpace) -> set[ICDCode]:
    return {space.codes[i] for i in np.flatnonzero(np.asarray(bits))}


def group_by_chapter(space: LabelSpace) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, code in enumerate(space.codes):
        groups[code.chapter].append(i)
    return dict(sorted(groups.items()))


@dataclass
class DischargeEvent:
    patient_id: str
    admit_at: float
    discharge_at: float
    codes: frozenset

    def __post_init__(self):
        if self.admit_at > self.discharge_at:
            raise CohortError(f"admission after discharge for patient {self.patient_id}")
        self.codes = frozenset(normalize_icd(c) for c in self.codes)
        if not self.codes:
            raise CohortError(f"discharge without codes for patient {self.patient_id}")


@dataclass
class CohortEntry:
    record_id: str
    patient_id: str
    labels: np.ndarray
    ecg_at: float
    discharge_at: float
    admit_at: float = float("nan")


def _matches(policy: str, window: float, ecg_at: float, ev: DischargeEvent) -> bool:
    if policy == "in-stay":
        return ev.admit_at <= ecg_at <= ev.discharge_at
    if policy == "window":
        return abs(ecg_at - ev.discharge_at) <= window
    raise CohortError(f"unknown alignment policy {policy!r}")


def align_ecg_to_discharges(ecgs, discharges, space: LabelSpace, policy: str = "in-stay",
                            window: float = 0.0, one_per_stay: bool = False,
                            keep_empty: bool = False) -> list[CohortEntry]:
    """Pair each ECG ``(record_id, patient_id, time)`` with one discharge.

    Among matching discharges the nearest ``discharge_at`` wins, ties going to
    the earlier admission. Unmatched ECGs are dropped, as are matched ECGs
    whose codes are all outside ``space`` unless ``keep_empty``.
    """
    ids = [rid for rid, _, _ in ecgs]
    dupes = [rid for rid, n in Counter(ids).items() if n > 1]
    if dupes:
        raise CohortError(f"duplicate record ids: {sorted(dupes)[:5]}")
    by_patient: dict[str, list[DischargeEvent]] = defaultdict(list)
    for ev in discharges:
        by_patient[ev.patient_id].append(ev)

    entries = []
    for rid, pid, t in ecgs:
        candidates = [ev for ev in by_patient.get(pid, ()) if _matches(policy, window, t, ev)]
        if not candidates:
            continue
        best = min(candidates, key=lambda ev: (abs(ev.discharge_at - t), ev.admit_at))
        bits, _ = encode_labels(best.codes, space)
        if not bits.any() and not keep_empty:
            continue
        entries.append(CohortEntry(rid, pid, bits, t, best.discharge_at, best.admit_at))

    if one_per_stay:
        closest: dict[tuple, CohortEntry] = {}
        for e in entries:
            key = (e.patient_id, e.admit_at, e.discharge_at)
            cur = closest.get(key)
            if cur is None or (abs(e.discharge_at - e.ecg_at), e.record_id) < (
                    abs(cur.discharge_at - cur.ecg_at), cur.record_id):
                closest[key] = e
        entries = [e for e in entries if closest[(e.patient_id, e.admit_at, e.discharge_at)] is e]
    return entries


def verify_alignment(entries, discharges, policy="in-stay", window=0.0) -> bool:
    """Re-check every emitted pair against the policy predicate."""
    index = defaultdict(list)
    for ev in discharges:
        index[(ev.patient_id, ev.discharge_at)].append(ev)
    for e in entries:
        evs = index.get((e.patient_id, e.discharge_at), [])
        if not any(_matches(policy, window, e.ecg_at, ev) for ev in evs):
            return False
    return True


# --- CSV interfaces -------------------------------------------------------

def _ts(text):
    from .records import from_iso
    text = str(text).strip()
    try:
        return float(text)
    except ValueError:
        return from_iso(text)


def read_discharges(path) -> list[DischargeEvent]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            raw = [c for c in row["codes"].split(";") if c.strip()]
            out.append(DischargeEvent(row["patient_id"], _ts(row["admit_at"]),
                                      _ts(row["discharge_at"]), raw))
    return out


def read_ecg_index(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["acquired_at"] = _ts(row["acquired_at"])
    return rows


def read_names(path) -> dict[str, str]:
    names = {}
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or not row[0].strip() or row[0].strip().lower() == "code":
                continue
            names[normalize_icd(row[0])] = row[1].strip() if len(row) > 1 else ""
    return names


def write_manifest(entries, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "patient_id", "ecg_at", "discharge_at", "labels"])
        for e in entries:
            w.writerow([e.record_id, e.patient_id, repr(float(e.ecg_at)), repr(float(e.discharge_at)),
                        ";".join(str(i) for i in np.flatnonzero(e.labels))])


def read_manifest(path, n_labels: int) -> list[CohortEntry]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            bits = np.zeros(n_labels, dtype=np.uint8)
            for i in filter(None, row["labels"].split(";")):
                bits[int(i)] = 1
            out.append(CohortEntry(row["record_id"], row["patient_id"], bits,
                                   float(row["ecg_at"]), float(row["discharge_at"])))
    return out
