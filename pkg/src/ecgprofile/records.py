"""Record interchange: a JSON header next to a raw int16 sample file.

Header keys: ``record_id``, ``patient_id``, ``acquired_at`` (ISO-8601 UTC),
``fs``, ``leads``, ``n_samples``, ``scale_mv`` (millivolts per integer unit)
and ``samples_file``. Samples are little-endian signed 16-bit, lead-major.
"""

from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .signal_pre import ECGRecord, Segment, SignalError

INT16_MAX = 32767
DEFAULT_SCALE_MV = 0.001


class RecordFormatError(SignalError):
    pass


def to_iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def from_iso(text: str) -> float:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def quantize(data: np.ndarray, scale_mv: float | None = None):
    """Integer samples and the scale used; picks a full-range scale when none given."""
    if scale_mv is None:
        peak = float(np.max(np.abs(data))) if data.size else 0.0
        scale_mv = peak / INT16_MAX if peak > 0 else DEFAULT_SCALE_MV
    ints = np.clip(np.rint(data / scale_mv), -INT16_MAX, INT16_MAX).astype("<i2")
    return ints, scale_mv


def _write(stem: Path, header: dict, data: np.ndarray, scale_mv):
    ints, scale = quantize(data, scale_mv)
    samples_path = stem.with_suffix(".dat")
    header = dict(header, n_samples=int(data.shape[1]), scale_mv=scale,
                  samples_file=samples_path.name)
    samples_path.write_bytes(ints.tobytes(order="C"))
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))
    return stem.with_suffix(".json")


def write_record(record: ECGRecord, directory, scale_mv: float | None = DEFAULT_SCALE_MV) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "record_id": record.record_id,
        "patient_id": record.patient_id,
        "acquired_at": to_iso(record.acquired_at),
        "fs": record.fs,
        "leads": record.lead_names,
    }
    return _write(directory / record.record_id, header, record.data, scale_mv)


def _load(header_path: Path):
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RecordFormatError(f"{header_path.name}: unreadable header ({exc})") from exc
    missing = {"fs", "leads", "n_samples", "scale_mv", "samples_file"} - header.keys()
    if missing:
        raise RecordFormatError(f"{header_path.name}: header missing {sorted(missing)}")
    raw_path = header_path.parent / header["samples_file"]
    try:
        raw = raw_path.read_bytes()
    except OSError as exc:
        raise RecordFormatError(f"{header_path.name}: samples file unreadable") from exc
    n_leads, n = len(header["leads"]), int(header["n_samples"])
    if len(raw) != 2 * n_leads * n:
        raise RecordFormatError(
            f"{header_path.name}: expected {2 * n_leads * n} sample bytes, found {len(raw)}")
    ints = np.frombuffer(raw, dtype="<i2").reshape(n_leads, n)
    return header, ints.astype(np.float64) * float(header["scale_mv"])


def read_record(header_path) -> ECGRecord:
    header, data = _load(header_path)
    for key in ("record_id", "patient_id", "acquired_at"):
        if key not in header:
            raise RecordFormatError(f"{Path(header_path).name}: header missing {key!r}")
    return ECGRecord(header["record_id"], str(header["patient_id"]),
                     from_iso(header["acquired_at"]), header["fs"], header["leads"], data)


def write_segment(seg: Segment, fs: float, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"record_id": seg.record_id, "segment_index": seg.index, "fs": fs,
              "leads": seg.lead_names, "n_real": seg.n_real}
    # z-scored data: pick a per-segment full-range scale to keep precision
    return _write(directory / f"{seg.record_id}__{seg.index:03d}", header, seg.data, None)


def read_segment(header_path) -> Segment:
    header, data = _load(header_path)
    return Segment(data, header["record_id"], int(header["segment_index"]),
                   header["leads"], int(header.get("n_real", data.shape[1])))


def read_csv_record(path, fs: float, record_id=None, patient_id="", acquired_at=0.0) -> ECGRecord:
    """One column per lead, header row of lead names, values in millivolts."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise RecordFormatError(f"{path.name}: no samples")
    names = [name.strip() for name in rows[0]]
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    except ValueError as exc:
        raise RecordFormatError(f"{path.name}: non-numeric sample ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != len(names):
        raise RecordFormatError(f"{path.name}: ragged rows")
    return ECGRecord(record_id or path.stem, patient_id, acquired_at, fs, names, data.T)
