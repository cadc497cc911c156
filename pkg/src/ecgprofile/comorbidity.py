"""Cross-disease association analysis over model risk scores."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

N_BINS = 10
CONSTANT = float("nan")  # marker for rows/cols of constant columns


class ComorbidityError(ValueError):
    pass


@dataclass
class RiskMatrix:
    subject_ids: list[str]
    codes: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.shape != (len(self.subject_ids), len(self.codes)):
            raise ComorbidityError("score matrix shape does not match ids/codes")
        if not np.all(np.isfinite(self.scores)):
            raise ComorbidityError("risk scores must be finite")

    def column(self, code: str) -> np.ndarray:
        try:
            return self.scores[:, self.codes.index(code)]
        except ValueError:
            raise ComorbidityError(f"unknown disease code {code!r}") from None

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id"] + self.codes)
            for sid, row in zip(self.subject_ids, self.scores):
                w.writerow([sid] + [f"{v:.6g}" for v in row])

    @classmethod
    def read_csv(cls, path) -> "RiskMatrix":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "subject_id":
            raise ComorbidityError(f"{path}: expected a subject_id header column")
        body = [r for r in rows[1:] if r]
        return cls([r[0] for r in body], rows[0][1:],
                   np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), -1))


@dataclass
class AssociationNetwork:
    nodes: list[str]
    edges: list[tuple[int, int, float, int]]  # i < j, MI bits, sign of Spearman

    def weight_matrix(self) -> np.ndarray:
        w = np.zeros((len(self.nodes), len(self.nodes)))
        for i, j, mi, _ in self.edges:
            w[i, j] = w[j, i] = mi
        return w


def aggregate_per_subject(subject_ids, scores, how: str = "mean") -> tuple[list[str], np.ndarray]:
    """Collapse several ECGs per subject into one row (mean, max or latest = last seen)."""
    scores = np.asarray(scores, dtype=float)
    order: dict[str, list[int]] = {}
    for i, sid in enumerate(subject_ids):
        order.setdefault(sid, []).append(i)
    ids = list(order)
    if how == "mean":
        rows = [scores[order[s]].mean(axis=0) for s in ids]
    elif how == "max":
        rows = [scores[order[s]].max(axis=0) for s in ids]
    elif how == "latest":
        rows = [scores[order[s][-1]] for s in ids]
    else:
        raise ComorbidityError(f"unknown aggregation {how!r}")
    return ids, np.array(rows).reshape(len(ids), scores.shape[1])


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ComorbidityError("spearman needs two equal-length vectors of length >= 3")
    rx, ry = rankdata(x), rankdata(y)
    return _pearson(rx, ry)


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    da, db = math.sqrt(a @ a), math.sqrt(b @ b)
    if da == 0 or db == 0:
        raise ComorbidityError("constant input: rank variance is zero")
    return float(np.clip((a @ b) / (da * db), -1.0, 1.0))


def spearman_matrix(m: RiskMatrix) -> np.ndarray:
    """Pairwise Spearman; rows/cols of constant columns are NaN (diagonal too)."""
    x = m.scores
    if x.shape[0] < 3:
        raise ComorbidityError("need at least 3 subjects")
    ranks = np.column_stack([rankdata(x[:, j]) for j in range(x.shape[1])])
    centred = ranks - ranks.mean(axis=0)
    norms = np.sqrt((centred ** 2).sum(axis=0))
    k = x.shape[1]
    out = np.full((k, k), CONSTANT)
    ok = norms > 0
    for i in range(k):
        if not ok[i]:
            continue
        out[i, i] = 1.0
        for j in range(i + 1, k):
            if ok[j]:
                r = float(np.clip(centred[:, i] @ centred[:, j] / (norms[i] * norms[j]), -1, 1))
                out[i, j] = out[j, i] = r
    return out


def quantile_bins(x, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-frequency bin index from mid-ranks, so tied values share a bin."""
    x = np.asarray(x, dtype=float)
    r = rankdata(x)
    return np.minimum(((r - 1) * n_bins / x.size).astype(int), n_bins - 1)


def _mi_from_bins(bx, by, n_bins):
    joint = np.zeros((n_bins, n_bins))
    np.add.at(joint, (bx, by), 1.0)
    joint /= joint.sum()
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    return float(max(np.sum(joint[nz] * np.log2(joint[nz] / np.outer(px, py)[nz])), 0.0))


def mutual_information(x, y, n_bins: int = N_BINS) -> float:
    """Plug-in MI in bits after equal-frequency discretisation of both inputs."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.size < n_bins:
        raise ComorbidityError("mutual_information needs equal-length inputs with length >= n_bins")
    return _mi_from_bins(quantile_bins(x, n_bins), quantile_bins(y, n_bins), n_bins)


def mi_matrix(m: RiskMatrix, n_bins: int = N_BINS) -> np.ndarray:
    bins = [quantile_bins(m.scores[:, j], n_bins) for j in range(m.scores.shape[1])]
    k = len(bins)
    out = np.zeros((k, k))
    for i in range(k):
        out[i, i] = _mi_from_bins(bins[i], bins[i], n_bins)
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = _mi_from_bins(bins[i], bins[j], n_bins)
    return out


def default_mi_floor(mi: np.ndarray, q: float = 0.9) -> float:
    off = mi[np.triu_indices_from(mi, k=1)]
    return float(np.quantile(off, q)) if off.size else 0.0


def build_network(m: RiskMatrix, n_bins: int = N_BINS, mi_floor: float | None = None,
                  rho: np.ndarray | None = None, mi: np.ndarray | None = None) -> AssociationNetwork:
    mi = mi_matrix(m, n_bins) if mi is None else mi
    rho = spearman_matrix(m) if rho is None else rho
    floor = default_mi_floor(mi) if mi_floor is None else mi_floor
    edges = []
    k = len(m.codes)
    for i in range(k):
        for j in range(i + 1, k):
            if mi[i, j] >= floor:
                r = rho[i, j]
                sign = 0 if math.isnan(r) or r == 0 else (1 if r > 0 else -1)
                edges.append((i, j, float(mi[i, j]), sign))
    return AssociationNetwork(list(m.codes), edges)


def weighted_degree(net: AssociationNetwork) -> dict[str, float]:
    """Sum of incident edge weights per node, ordered from most to least central."""
    deg = dict.fromkeys(net.nodes, 0.0)
    for i, j, w, _ in net.edges:
        deg[net.nodes[i]] += w
        deg[net.nodes[j]] += w
    return dict(sorted(deg.items(), key=lambda kv: (-kv[1], kv[0])))


def _g(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.6g}"


def export_figures(m: RiskMatrix, matrix: np.ndarray, net: AssociationNetwork, out_dir,
                   pairs: list[tuple[str, str]] = (), names: dict | None = None) -> dict[str, Path]:
    """Heatmap CSV, chord-diagram JSON, degree CSV and scatter-pair CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for a, b in pairs:
        for c in (a, b):
            if c not in m.codes:
                raise ComorbidityError(f"unknown disease code {c!r}")
    files = {}
    heat = out_dir / "spearman_heatmap.csv"
    with heat.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + m.codes)
        for code, row in zip(m.codes, matrix):
            w.writerow([code] + [_g(v) for v in row])
    files["heatmap"] = heat

    chord = out_dir / "chord.json"
    doc = {
        "nodes": [{"id": c, "chapter": c[0], "name": (names or {}).get(c, "")} for c in net.nodes],
        "edges": [{"source": net.nodes[i], "target": net.nodes[j], "weight": float(f"{wt:.6g}"),
                   "sign": s} for i, j, wt, s in net.edges],
    }
    chord.write_text(json.dumps(doc, indent=1))
    files["chord"] = chord

    deg = out_dir / "weighted_degree.csv"
    with deg.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "code", "weighted_degree"])
        for r, (code, d) in enumerate(weighted_degree(net).items(), 1):
            w.writerow([r, code, _g(d)])
    files["degree"] = deg

    for a, b in pairs:
        path = out_dir / f"scatter_{a}_{b}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", a, b])
            for sid, x, y in zip(m.subject_ids, m.column(a), m.column(b)):
                w.writerow([sid, _g(x), _g(y)])
        files[f"scatter_{a}_{b}"] = path
    return files
