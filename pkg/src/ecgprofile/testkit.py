"""Synthetic ECGs and cohorts with planted, known ground truth.

Beats are a sum of three Gaussians (P, QRS, T) repeated at the heart rate and
projected onto 12 leads with fixed weights. Cohort labels come from a latent
standard-normal liability per label: the liability shifts ECG morphology
continuously, the label is the liability thresholded at the prevalence
quantile, and the incident-disease hazard is ``h0 * exp(beta * liability)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import ndtri

from .signal_pre import LEAD_NAMES, ECGRecord

# lead weights for the (P, QRS, T) waves
LEAD_WEIGHTS = np.array([
    [0.6, 0.8, 0.5],    # I
    [1.0, 1.0, 0.8],    # II
    [0.4, 0.3, 0.3],    # III
    [-0.8, -0.9, -0.6],  # aVR
    [0.1, 0.3, 0.1],    # aVL
    [0.7, 0.6, 0.5],    # aVF
    [0.3, -0.6, -0.2],  # V1
    [0.5, -0.2, 0.6],   # V2
    [0.5, 0.6, 0.9],    # V3
    [0.5, 1.1, 1.0],    # V4
    [0.5, 1.0, 0.8],    # V5
    [0.4, 0.8, 0.6],    # V6
])


@dataclass
class MorphParams:
    heart_rate: float = 70.0
    p_amp: float = 0.15
    p_width: float = 0.025
    p_offset: float = -0.18
    qrs_amp: float = 1.0
    qrs_width: float = 0.012
    qrs_offset: float = 0.0
    t_amp: float = 0.3
    t_width: float = 0.04
    t_offset: float = 0.28
    white_sigma: float = 0.02
    mains_amp: float = 0.0
    mains_hz: float = 50.0
    wander_amp: float = 0.0
    wander_hz: float = 0.2

    def __post_init__(self):
        if not 30 <= self.heart_rate <= 220:
            raise ValueError(f"heart rate {self.heart_rate} outside [30, 220] bpm")
        if min(self.p_width, self.qrs_width, self.t_width) <= 0:
            raise ValueError("wave widths must be positive")


MORPH_FIELDS = {f.name for f in fields(MorphParams)}


def _gauss_train(t, beat_times, amp, width, offset):
    out = np.zeros_like(t)
    centers = beat_times + offset
    reach = 5 * width
    for c in centers:
        lo, hi = np.searchsorted(t, [c - reach, c + reach])
        if hi > lo:
            seg = t[lo:hi]
            out[lo:hi] += amp * np.exp(-0.5 * ((seg - c) / width) ** 2)
    return out


def gen_ecg(params: MorphParams, duration_s: float = 10.0, fs: float = 500, seed: int = 0,
            record_id: str = "synthetic", patient_id: str = "P0",
            acquired_at: float = 0.0) -> ECGRecord:
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    rr = 60.0 / params.heart_rate
    phase = rng.uniform(0, rr)
    beats = np.arange(-1, math.ceil(duration_s / rr) + 2) * rr + phase
    waves = np.stack([
        _gauss_train(t, beats, params.p_amp, params.p_width, params.p_offset),
        _gauss_train(t, beats, params.qrs_amp, params.qrs_width, params.qrs_offset),
        _gauss_train(t, beats, params.t_amp, params.t_width, params.t_offset),
    ])
    data = LEAD_WEIGHTS @ waves
    data += params.white_sigma * rng.standard_normal(data.shape)
    if params.mains_amp:
        data += params.mains_amp * np.sin(2 * np.pi * params.mains_hz * t + rng.uniform(0, 2 * np.pi))
    if params.wander_amp:
        ph = rng.uniform(0, 2 * np.pi, size=(12, 1))
        data += params.wander_amp * np.sin(2 * np.pi * params.wander_hz * t + ph)
    return ECGRecord(record_id, patient_id, acquired_at, fs, list(LEAD_NAMES), data)


@dataclass
class SurvivalSpec:
    baseline_hazard: float = 0.02   # events per year at liability 0
    hr_per_sd: float = 2.0
    horizon_years: float = 10.0


@dataclass
class PlantedCohortSpec:
    n: int
    labels: list[str]
    effects: dict[str, dict[str, float]] = field(default_factory=dict)
    prevalence: dict[str, float] = field(default_factory=dict)
    survival: SurvivalSpec | None = field(default_factory=SurvivalSpec)
    forced_positives: dict[str, int] = field(default_factory=dict)
    duration_s: float = 10.0
    fs: float = 500
    mains_amp: float = 0.05
    wander_amp: float = 0.1
    seed: int = 0
    id_prefix: str = "S"

    def __post_init__(self):
        for code in self.labels:
            p = self.prevalence.get(code, 0.2)
            if not 0 < p < 1:
                raise ValueError(f"prevalence for {code} must lie in (0, 1)")
        unknown = {k for eff in self.effects.values() for k in eff} - MORPH_FIELDS
        if unknown:
            raise ValueError(f"unknown morphology fields in effects: {sorted(unknown)}")
        if self.survival is not None and self.survival.hr_per_sd <= 0:
            raise ValueError("hazard ratio must be positive")


@dataclass
class SyntheticCohort:
    records: list[ECGRecord]
    labels: np.ndarray          # n x K, uint8
    liability: np.ndarray       # n x K
    label_codes: list[str]
    outcomes: list[dict]        # subject_id, code, event_time_years, event_flag

    @property
    def subject_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]


def _liabilities(rng, spec: PlantedCohortSpec):
    k = len(spec.labels)
    thresholds = np.array([ndtri(1 - spec.prevalence.get(c, 0.2)) for c in spec.labels])
    u = rng.standard_normal((spec.n, k))
    for j, code in enumerate(spec.labels):
        m = spec.forced_positives.get(code)
        if m is None:
            continue
        if not 0 <= m <= spec.n:
            raise ValueError(f"forced positives for {code} out of range")
        # inverse-CDF draws conditioned on either side of the threshold
        cut = 0.5 * math.erfc(-thresholds[j] / math.sqrt(2))
        pos = ndtri(cut + (1 - cut) * rng.uniform(size=m))
        neg = ndtri(cut * rng.uniform(size=spec.n - m))
        col = np.concatenate([pos, neg])
        u[:, j] = col[rng.permutation(spec.n)]
    labels = (u > thresholds).astype(np.uint8)
    return u, labels


def subject_morph(rng, liab_row, spec: PlantedCohortSpec) -> MorphParams:
    base = MorphParams(
        heart_rate=float(np.clip(rng.normal(70, 6), 45, 110)),
        qrs_amp=float(rng.normal(1.0, 0.1)),
        t_amp=float(rng.normal(0.3, 0.04)),
        p_amp=float(rng.normal(0.15, 0.02)),
        mains_amp=spec.mains_amp,
        wander_amp=spec.wander_amp,
    )
    shifts = {}
    for j, code in enumerate(spec.labels):
        for name, per_sd in spec.effects.get(code, {}).items():
            shifts[name] = shifts.get(name, getattr(base, name)) + per_sd * liab_row[j]
    if "heart_rate" in shifts:
        shifts["heart_rate"] = float(np.clip(shifts["heart_rate"], 35, 200))
    for w in ("p_width", "qrs_width", "t_width"):
        if w in shifts:
            shifts[w] = max(shifts[w], 0.003)
    return replace(base, **shifts)


def gen_cohort(spec: PlantedCohortSpec) -> SyntheticCohort:
    """Pure function of ``spec`` (including its seed)."""
    root = np.random.SeedSequence(spec.seed)
    s_lab, s_morph, s_rec, s_surv = root.spawn(4)
    u, labels = _liabilities(np.random.default_rng(s_lab), spec)
    morph_rng = np.random.default_rng(s_morph)
    rec_seeds = s_rec.generate_state(spec.n)
    records = []
    for i in range(spec.n):
        sid = f"{spec.id_prefix}{i:06d}"
        mp = subject_morph(morph_rng, u[i], spec)
        records.append(gen_ecg(mp, spec.duration_s, spec.fs, int(rec_seeds[i]),
                               record_id=f"{sid}_ecg", patient_id=sid,
                               acquired_at=1.5e9 + 3600.0 * i))
    outcomes = []
    if spec.survival is not None:
        outcomes = gen_outcomes(u, labels, spec.labels, [r.patient_id for r in records],
                                spec.survival, np.random.default_rng(s_surv))
    return SyntheticCohort(records, labels, u, list(spec.labels), outcomes)


def gen_outcomes(u, labels, codes, subject_ids, surv: SurvivalSpec, rng) -> list[dict]:
    beta = math.log(surv.hr_per_sd)
    rows = []
    for i, sid in enumerate(subject_ids):
        for j, code in enumerate(codes):
            if labels[i, j]:
                # prevalent at the ECG: recorded at time 0 so analyses can exclude it
                rows.append({"subject_id": sid, "code": code, "event_time_years": 0.0,
                             "event_flag": 1})
                continue
            rate = surv.baseline_hazard * math.exp(beta * u[i, j])
            t = rng.exponential(1.0 / rate)
            event = t <= surv.horizon_years
            rows.append({"subject_id": sid, "code": code,
                         "event_time_years": float(min(t, surv.horizon_years)),
                         "event_flag": int(event)})
    return rows


def gen_binary_survival(n: int, hr: float, baseline_hazard: float = 0.1,
                        horizon: float = 10.0, exposed_frac: float = 0.5, seed: int = 0):
    """Exponential times with a planted binary-exposure hazard ratio.

    Returns ``(times, events, exposure)``; censoring is administrative at
    ``horizon``.
    """
    rng = np.random.default_rng(seed)
    x = (rng.uniform(size=n) < exposed_frac).astype(int)
    rate = baseline_hazard * np.where(x == 1, hr, 1.0)
    t = rng.exponential(1.0 / rate)
    events = t <= horizon
    return np.minimum(t, horizon), events, x


def gen_risk_matrix(n: int, n_diseases: int, correlated: dict[tuple[int, int], float] | None = None,
                    seed: int = 0) -> np.ndarray:
    """Post-sigmoid risk scores from a Gaussian copula with planted pair correlations."""
    cov = np.eye(n_diseases)
    for (i, j), rho in (correlated or {}).items():
        cov[i, j] = cov[j, i] = rho
    rng = np.random.default_rng(seed)
    z = rng.multivariate_normal(np.zeros(n_diseases), cov, size=n, method="cholesky")
    return 1.0 / (1.0 + np.exp(-(z - 1.0)))
