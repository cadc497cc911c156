"""Risk-tertile survival analysis: Kaplan-Meier, log-rank, binary Cox model."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TERTILES = ("low", "medium", "high")
P_FLOOR = 1e-300
Z95 = 1.96


class SurvivalError(ValueError):
    pass


@dataclass
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        """S(t), right-continuous step function."""
        k = np.searchsorted(self.times, t, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    observed: float = 0.0
    expected: float = 0.0
    variance: float = 0.0


@dataclass
class CoxFit:
    beta: float
    se: float
    iterations: int
    converged: bool

    @property
    def hr(self) -> float:
        return math.exp(self.beta)

    @property
    def ci(self) -> tuple[float, float]:
        return math.exp(self.beta - Z95 * self.se), math.exp(self.beta + Z95 * self.se)


def assign_tertiles(scores) -> np.ndarray:
    """Tags 'low'/'medium'/'high' cut at the empirical 1/3 and 2/3 quantiles.

    Cut points are order statistics, and a score equal to a cut point goes to
    the lower group.
    """
    s = np.asarray(scores, dtype=float)
    if s.size < 3:
        raise SurvivalError("need at least 3 subjects")
    if np.all(s == s[0]):
        raise SurvivalError("degenerate scores: all identical")
    srt = np.sort(s)
    n = s.size
    c1 = srt[math.ceil(n / 3) - 1]
    c2 = srt[math.ceil(2 * n / 3) - 1]
    out = np.full(n, "high", dtype=object)
    out[s <= c2] = "medium"
    out[s <= c1] = "low"
    return out


def _arrays(times, events):
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    if t.shape != e.shape or t.ndim != 1:
        raise SurvivalError("times and events must be equal-length vectors")
    if t.size and (not np.all(np.isfinite(t)) or t.min() < 0):
        raise SurvivalError("times must be finite and non-negative")
    return t, e


def _event_table(t, e):
    """Distinct event times with risk-set sizes and event counts."""
    ut = np.unique(t[e])
    srt = np.sort(t)
    at_risk = t.size - np.searchsorted(srt, ut, side="left")
    d = np.array([np.count_nonzero(e & (t == u)) for u in ut], dtype=float)
    return ut, at_risk.astype(float), d


def kaplan_meier(times, events) -> SurvivalCurve:
    t, e = _arrays(times, events)
    if t.size == 0:
        raise SurvivalError("no subjects")
    ut, n, d = _event_table(t, e)
    s = np.cumprod(1.0 - d / n)
    return SurvivalCurve(ut, s, n, d)


def chi2_sf_1df(x: float) -> float:
    """Upper tail of chi-square with one degree of freedom."""
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


def log_rank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta, ea = _arrays(times_a, events_a)
    tb, eb = _arrays(times_b, events_b)
    if ta.size == 0 or tb.size == 0:
        raise SurvivalError("both groups must be non-empty")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    if not e.any():
        raise SurvivalError("log-rank needs at least one event")
    ut, n, d = _event_table(t, e)
    sa = np.sort(ta)
    na = ta.size - np.searchsorted(sa, ut, side="left")
    da = np.array([np.count_nonzero(ea & (ta == u)) for u in ut], dtype=float)
    expected = d * na / n
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n > 1, d * (na / n) * (1 - na / n) * (n - d) / (n - 1), 0.0)
    o, ex, v = da.sum(), expected.sum(), var.sum()
    if v <= 0:
        log.warning("log-rank variance is zero; reporting p = 1")
        return LogRankResult(0.0, 1.0, o, ex, v)
    stat = (o - ex) ** 2 / v
    return LogRankResult(float(stat), max(chi2_sf_1df(stat), P_FLOOR), float(o), float(ex), float(v))


def _cox_table(t, e, x):
    ut = np.unique(t[e])
    n1 = np.array([np.count_nonzero((t >= u) & (x == 1)) for u in ut], dtype=float)
    n0 = np.array([np.count_nonzero((t >= u) & (x == 0)) for u in ut], dtype=float)
    d = np.array([np.count_nonzero(e & (t == u)) for u in ut], dtype=float)
    d1 = np.array([np.count_nonzero(e & (t == u) & (x == 1)) for u in ut], dtype=float)
    return n0, n1, d, d1


def cox_loglik(beta, n0, n1, d, d1):
    """Breslow partial log-likelihood for a binary covariate."""
    return float(np.sum(d1 * beta - d * np.log(n0 + n1 * math.exp(beta))))


def cox_binary(times, events, exposure, tol=1e-8, max_iter=100) -> CoxFit:
    """Newton-Raphson fit of a one-covariate (0/1) Cox model, Breslow ties."""
    t, e = _arrays(times, events)
    x = np.asarray(exposure).astype(int)
    if x.shape != t.shape or not np.isin(x, (0, 1)).all():
        raise SurvivalError("exposure must be a 0/1 vector aligned with times")
    if not (x == 1).any() or not (x == 0).any():
        raise SurvivalError("both exposure levels must be present")
    if not e.any():
        raise SurvivalError("no events")
    n0, n1, d, d1 = _cox_table(t, e, x)
    # limits of the score as beta -> +/- inf; same sign at both ends means no finite MLE
    u_hi = np.sum(d1 - d * (n1 > 0))
    u_lo = np.sum(d1 - d * (n0 == 0))
    if u_hi >= 0 or u_lo <= 0:
        raise SurvivalError("non-identifiable: monotone partial likelihood")
    beta, converged, it = 0.0, False, 0
    for it in range(1, max_iter + 1):
        r = n1 * math.exp(beta)
        pi = r / (n0 + r)
        score = np.sum(d1 - d * pi)
        info = np.sum(d * pi * (1 - pi))
        step = score / info
        # halve steps that would lower the likelihood
        base = cox_loglik(beta, n0, n1, d, d1)
        while cox_loglik(beta + step, n0, n1, d, d1) < base and abs(step) > 1e-12:
            step /= 2
        beta += step
        if abs(step) < tol:
            converged = True
            break
    r = n1 * math.exp(beta)
    pi = r / (n0 + r)
    info = np.sum(d * pi * (1 - pi))
    return CoxFit(float(beta), float(1.0 / math.sqrt(info)), it, converged)


def format_hr(fit: CoxFit) -> str:
    lo, hi = fit.ci
    return f"HR = {fit.hr:.2f} (95% CI {lo:.2f}–{hi:.2f})"


def format_p(p: float) -> str:
    return "<0.001" if p < 1e-3 else f"{p:.3f}"


@dataclass
class DiseaseSurvival:
    code: str
    group_sizes: dict[str, int]
    survival_10y: dict[str, float]
    curves: dict[str, SurvivalCurve]
    cox: CoxFit | None
    logrank: LogRankResult | None
    n_excluded: int = 0
    note: str = ""

    @property
    def summary(self) -> str:
        if self.cox is None or self.logrank is None:
            return f"{self.code}: {self.note or 'not estimable'}"
        return f"{self.code}: {format_hr(self.cox)}, log-rank p {format_p(self.logrank.p_value)}"


def survival_report(code: str, scores, times, events, prevalent=None,
                    horizon: float = 10.0) -> DiseaseSurvival:
    """Tertile KM curves, high-vs-low log-rank and Cox fit for one disease.

    Subjects flagged ``prevalent`` (disease at or before the ECG) are removed
    first. Times are measured from the ECG.
    """
    s = np.asarray(scores, dtype=float)
    t, e = _arrays(times, events)
    keep = np.ones(s.size, bool) if prevalent is None else ~np.asarray(prevalent, bool)
    n_excl = int((~keep).sum())
    s, t, e = s[keep], t[keep], e[keep]
    groups = assign_tertiles(s)
    sizes, curves, surv10 = {}, {}, {}
    for g in TERTILES:
        m = groups == g
        sizes[g] = int(m.sum())
        if m.any():
            curves[g] = kaplan_meier(t[m], e[m])
            surv10[g] = curves[g].at(horizon)
        else:
            surv10[g] = float("nan")
    hi_m, lo_m = groups == "high", groups == "low"
    cox = lr = None
    note = ""
    try:
        lr = log_rank(t[hi_m], e[hi_m], t[lo_m], e[lo_m])
        sub = hi_m | lo_m
        cox = cox_binary(t[sub], e[sub], hi_m[sub].astype(int))
    except SurvivalError as exc:
        note = str(exc)
        log.warning("%s: %s", code, exc)
    return DiseaseSurvival(code, sizes, surv10, curves, cox, lr, n_excl, note)


def _f(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def write_survival_csv(reports: list[DiseaseSurvival], path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["disease", "n_low", "n_medium", "n_high", "n_excluded", "surv10_low",
                    "surv10_medium", "surv10_high", "hr", "ci_lo", "ci_hi", "logrank_chi2",
                    "logrank_p", "summary"])
        for r in reports:
            hr = lo = hi = None
            if r.cox is not None:
                hr, (lo, hi) = r.cox.hr, r.cox.ci
            w.writerow([r.code, r.group_sizes["low"], r.group_sizes["medium"], r.group_sizes["high"],
                        r.n_excluded] + [_f(r.survival_10y[g]) for g in TERTILES] +
                       [_f(hr), _f(lo), _f(hi),
                        _f(r.logrank.statistic if r.logrank else None),
                        _f(r.logrank.p_value if r.logrank else None), r.summary])


def write_curve_csv(curve: SurvivalCurve, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk"])
        w.writerow(["0", "1", _f(float(curve.at_risk[0])) if curve.at_risk.size else ""])
        for t, s, n in zip(curve.times, curve.survival, curve.at_risk):
            w.writerow([_f(float(t)), _f(float(s)), _f(float(n))])


def read_outcomes(path) -> dict[str, dict[str, tuple[float, int]]]:
    """``{code: {subject_id: (event_time_years, event_flag)}}``."""
    out: dict[str, dict[str, tuple[float, int]]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["disease_code"] if "disease_code" in row else row["code"], {})[
                row["subject_id"]] = (float(row["event_time_years"]), int(row["event_flag"]))
    return out
