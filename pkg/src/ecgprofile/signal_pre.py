"""Deterministic ECG preprocessing.

The pipeline applied by :func:`preprocess_record` is, in order::

    resample (linear) -> mains notch -> Butterworth bandpass
        -> median baseline subtraction -> segmentation -> z-scoring

All filters are causal and single pass, starting from a zero state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF",
              "V1", "V2", "V3", "V4", "V5", "V6")

NOTCH_Q = 30.0
STD_FLOOR = 1e-8


class SignalError(ValueError):
    pass


class PreprocessError(SignalError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class LeadSignal:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError("lead samples must be one-dimensional")
        if self.samples.size == 0:
            raise SignalError("empty signal")
        if not self.fs > 0:
            raise SignalError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs


@dataclass
class ECGRecord:
    """A multi-lead recording; ``data`` is leads x samples in millivolts."""

    record_id: str
    patient_id: str
    acquired_at: float
    fs: float
    lead_names: list[str]
    data: np.ndarray

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        self.lead_names = list(self.lead_names)
        n_leads = self.data.shape[0]
        if not 1 <= n_leads <= 12:
            raise SignalError(f"expected 1-12 leads, got {n_leads}")
        if len(self.lead_names) != n_leads:
            raise SignalError("lead name count does not match data")
        if len(set(self.lead_names)) != n_leads:
            raise SignalError("duplicate lead names")
        if self.data.shape[1] == 0:
            raise SignalError("empty signal")
        if not self.fs > 0:
            raise SignalError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise SignalError("non-finite samples")

    @property
    def leads(self) -> list[LeadSignal]:
        return [LeadSignal(row, self.fs) for row in self.data]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    @classmethod
    def from_leads(cls, record_id, patient_id, acquired_at, lead_names, leads):
        fss = {lead.fs for lead in leads}
        lengths = {len(lead) for lead in leads}
        if len(fss) != 1 or len(lengths) != 1:
            raise SignalError("leads must share length and sampling rate")
        return cls(record_id, patient_id, acquired_at, fss.pop(), lead_names,
                   np.stack([lead.samples for lead in leads]))


@dataclass
class PreprocessConfig:
    target_fs: int = 500
    mains_hz: float = 50.0
    band_lo: float = 0.67
    band_hi: float = 40.0
    butter_order: int = 4
    baseline_window_s: float = 0.4
    segment_s: float = 10.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.target_fs <= 0:
            raise SignalError("target_fs must be positive")
        if self.mains_hz not in (50, 60):
            raise SignalError(f"mains_hz must be 50 or 60, got {self.mains_hz}")
        if not 0 < self.band_lo < self.band_hi < self.target_fs / 2:
            raise SignalError("band edges must satisfy 0 < lo < hi < fs/2")
        if self.butter_order < 2 or self.butter_order % 2:
            raise SignalError("butter_order must be a positive even integer")
        if self.segment_s <= 0:
            raise SignalError("segment_s must be positive")

    @property
    def segment_len(self) -> int:
        return int(round(self.segment_s * self.target_fs))

    @property
    def baseline_window(self) -> int:
        return odd_window(self.baseline_window_s, self.target_fs)


@dataclass
class Segment:
    data: np.ndarray
    record_id: str
    index: int
    lead_names: list[str] = field(default_factory=list)
    n_real: int = 0  # samples before zero padding

    @property
    def length(self) -> int:
        return self.data.shape[1]


def odd_window(window_s: float, fs: float) -> int:
    """Window length in samples, rounded and then bumped up to odd."""
    n = int(round(window_s * fs))
    return n if n % 2 else n + 1


def resample_linear(sig: LeadSignal, dst_fs: float) -> LeadSignal:
    if not dst_fs > 0:
        raise SignalError(f"destination rate must be positive, got {dst_fs}")
    if dst_fs == sig.fs:
        return LeadSignal(sig.samples.copy(), sig.fs)
    n_out = int(round(len(sig) * dst_fs / sig.fs))
    if n_out < 1:
        raise SignalError("empty signal")
    t_src = np.arange(len(sig)) / sig.fs
    t_dst = np.arange(n_out) / dst_fs
    # np.interp holds the last value past the final source sample
    return LeadSignal(np.interp(t_dst, t_src, sig.samples), dst_fs)


def notch_coefficients(mains_hz: float, fs: float, q: float = NOTCH_Q):
    if not 0 < mains_hz < fs / 2:
        raise SignalError(f"notch frequency {mains_hz} Hz must lie below Nyquist ({fs / 2} Hz)")
    return signal.iirnotch(mains_hz, q, fs=fs)


def notch_filter(sig: LeadSignal, mains_hz: float, q: float = NOTCH_Q) -> LeadSignal:
    b, a = notch_coefficients(mains_hz, sig.fs, q)
    return LeadSignal(signal.lfilter(b, a, sig.samples), sig.fs)


def butterworth_sos(lo: float, hi: float, order: int, fs: float) -> np.ndarray:
    """Second-order sections of a bandpass with total order ``order``.

    A bandpass of order 2N comes from an order-N lowpass prototype, so the
    prototype handed to the designer is ``order // 2``.
    """
    if not 0 < lo < hi < fs / 2:
        raise SignalError(f"invalid band {lo}-{hi} Hz for fs={fs}")
    if order < 2 or order % 2:
        raise SignalError(f"bandpass order must be even and >= 2, got {order}")
    return signal.butter(order // 2, [lo, hi], btype="bandpass", fs=fs, output="sos")


def bandpass_butterworth(sig: LeadSignal, lo: float, hi: float, order: int = 4) -> LeadSignal:
    sos = butterworth_sos(lo, hi, order, sig.fs)
    return LeadSignal(signal.sosfilt(sos, sig.samples), sig.fs)


def running_median(x: np.ndarray, window: int) -> np.ndarray:
    return ndimage.median_filter(x, size=window, mode="nearest")


def median_baseline_correct(sig: LeadSignal, window_s: float) -> LeadSignal:
    window = odd_window(window_s, sig.fs)
    if window < 3:
        raise SignalError(f"median window of {window} samples is too short")
    if window > len(sig):
        raise SignalError(f"median window ({window} samples) longer than signal ({len(sig)})")
    return LeadSignal(sig.samples - running_median(sig.samples, window), sig.fs)


def segment_and_pad(record: ECGRecord, segment_s: float) -> list[Segment]:
    seg_len = int(round(segment_s * record.fs))
    n = record.n_samples
    if n < seg_len:
        padded = np.zeros((record.data.shape[0], seg_len))
        padded[:, :n] = record.data
        return [Segment(padded, record.record_id, 0, record.lead_names, n)]
    return [
        Segment(record.data[:, k * seg_len:(k + 1) * seg_len].copy(),
                record.record_id, k, record.lead_names, seg_len)
        for k in range(n // seg_len)
    ]


def normalize_segment(seg: Segment) -> Segment:
    x = seg.data
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    flat = std[:, 0] < STD_FLOOR
    out = (x - mean) / np.where(std < STD_FLOOR, 1.0, std)
    out[flat] = 0.0
    return Segment(out, seg.record_id, seg.index, seg.lead_names, seg.n_real)


def _apply(stage, fn, record: ECGRecord, fs=None) -> ECGRecord:
    try:
        leads = [fn(lead) for lead in record.leads]
    except SignalError as exc:
        raise PreprocessError(stage, str(exc)) from exc
    data = np.stack([lead.samples for lead in leads])
    return ECGRecord(record.record_id, record.patient_id, record.acquired_at,
                     fs if fs is not None else record.fs, record.lead_names, data)


def preprocess_record(record: ECGRecord, cfg: PreprocessConfig | None = None) -> list[Segment]:
    cfg = cfg or PreprocessConfig()
    rec = _apply("resample", lambda s: resample_linear(s, cfg.target_fs), record, cfg.target_fs)
    rec = _apply("notch", lambda s: notch_filter(s, cfg.mains_hz), rec)
    rec = _apply("bandpass", lambda s: bandpass_butterworth(
        s, cfg.band_lo, cfg.band_hi, cfg.butter_order), rec)
    rec = _apply("baseline", lambda s: median_baseline_correct(s, cfg.baseline_window_s), rec)
    return [normalize_segment(seg) for seg in segment_and_pad(rec, cfg.segment_s)]
