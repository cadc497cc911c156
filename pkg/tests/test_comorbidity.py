import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgprofile.comorbidity import (AssociationNetwork, ComorbidityError, RiskMatrix, aggregate_per_subject,
                                    build_network, export_figures, mi_matrix, mutual_information,
                                    quantile_bins, spearman, spearman_matrix, weighted_degree)
from ecgprofile.testkit import gen_risk_matrix

from oracles import midranks


def _pearson(a, b):
    a = np.asarray(a, float) - np.mean(a)
    b = np.asarray(b, float) - np.mean(b)
    return float(a @ b / math.sqrt((a @ a) * (b @ b)))


def test_spearman_examples():
    x = [0.3, 1.2, -4.0, 7.5, 2.2]
    assert spearman(x, x) == pytest.approx(1.0, abs=1e-12)
    assert spearman(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-12)
    assert spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]) == pytest.approx(0.8, abs=1e-12)


def test_spearman_rank_difference_formula():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(3, 40))
        x, y = rng.permutation(n), rng.permutation(n)
        d2 = float(np.sum((x - y) ** 2))
        assert spearman(x, y) == pytest.approx(1 - 6 * d2 / (n * (n * n - 1)), abs=1e-12)


def test_spearman_ties_match_midrank_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(4, 40))
        x, y = rng.integers(0, 4, n), rng.integers(0, 4, n)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert spearman(x, y) == pytest.approx(_pearson(midranks(x), midranks(y)), abs=1e-12)


def test_spearman_constant():
    with pytest.raises(ComorbidityError, match="constant input"):
        spearman([1, 1, 1, 1], [1, 2, 3, 4])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=30), st.integers(0, 2**31 - 1))
def test_spearman_monotone_invariance(xs, seed):
    x = np.array(xs, dtype=float)
    y = np.random.default_rng(seed).standard_normal(x.size)
    if np.ptp(x) == 0:
        return
    assert spearman(x, y) == pytest.approx(spearman(x ** 3 + 2 * x - 7, y), abs=1e-12)


def test_spearman_matrix():
    rng = np.random.default_rng(2)
    s = rng.uniform(size=(40, 4))
    s[:, 2] = s[:, 0]
    s[:, 3] = 0.5
    m = spearman_matrix(RiskMatrix([f"s{i}" for i in range(40)], ["A", "B", "C", "D"], s))
    assert m[0, 2] == 1.0
    assert np.array_equal(m[:3, :3], m[:3, :3].T)
    assert m[0, 1] == pytest.approx(spearman(s[:, 0], s[:, 1]), abs=1e-12)
    assert np.all(np.isnan(m[3])) and np.all(np.isnan(m[:, 3]))


def test_mi_self_is_log2_bins():
    x = np.random.default_rng(3).standard_normal(1000)
    assert abs(mutual_information(x, x) - math.log2(10)) <= 1e-9


def test_mi_independent_small():
    rng = np.random.default_rng(4)
    assert mutual_information(rng.uniform(size=100_000), rng.uniform(size=100_000)) < 0.01


def test_mi_hand_table():
    # two bins each; joint counts [[2, 1], [1, 2]] over 6 samples
    x = np.array([0, 0, 0, 1, 1, 1], float)
    y = np.array([0, 0, 1, 0, 1, 1], float)
    p = np.array([[2, 1], [1, 2]]) / 6
    expected = sum(p[i, j] * math.log2(p[i, j] / 0.25) for i in range(2) for j in range(2))
    assert mutual_information(x, y, n_bins=2) == pytest.approx(expected, abs=1e-12)


def test_mi_symmetric_non_negative():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.standard_normal(200)
        y = x * rng.uniform() + rng.standard_normal(200)
        a, b = mutual_information(x, y), mutual_information(y, x)
        assert a == pytest.approx(b, abs=1e-12) and a >= 0


def test_quantile_bins_equal_frequency_and_ties():
    b = quantile_bins(np.arange(100), 10)
    assert np.bincount(b).tolist() == [10] * 10
    tied = quantile_bins(np.array([1, 1, 1, 1, 2, 3]), 3)
    assert len(set(tied[:4])) == 1


def _matrix(n=3000, seed=6):
    s = gen_risk_matrix(n, 4, {(0, 1): 0.8}, seed=seed)
    return RiskMatrix([f"S{i:05d}" for i in range(n)], ["E11", "I10", "J44", "N18"], s)


def test_network_floor_extremes():
    m = _matrix(500)
    mi = mi_matrix(m)
    assert len(build_network(m, mi_floor=0).edges) == 6
    assert build_network(m, mi_floor=mi.max() + 1).edges == []


def test_network_matches_brute_force_filter():
    m = _matrix(800)
    mi = mi_matrix(m)
    floor = float(np.quantile(mi[np.triu_indices(4, 1)], 0.5))
    net = build_network(m, mi_floor=floor)
    expected = {(i, j) for i in range(4) for j in range(i + 1, 4) if mi[i, j] >= floor}
    assert {(i, j) for i, j, _, _ in net.edges} == expected
    assert all(s == 1 for i, j, _, s in net.edges if (i, j) == (0, 1))


def test_default_floor_keeps_strong_pair():
    net = build_network(_matrix())
    assert [(i, j) for i, j, _, _ in net.edges] == [(0, 1)]


def test_weighted_degree():
    net = AssociationNetwork(["a", "b", "c", "d"], [(0, 1, 0.5, 1), (0, 2, 0.3, -1)])
    deg = weighted_degree(net)
    assert deg["a"] == pytest.approx(0.8)
    assert deg["d"] == 0
    assert sum(deg.values()) == pytest.approx(2 * 0.8)
    assert list(deg)[0] == "a"


def test_selectivity():
    m = _matrix()
    r = spearman_matrix(m)
    assert r[0, 1] - abs(r[2, 3]) >= 0.3


def test_aggregate_per_subject():
    ids = ["a", "b", "a", "a"]
    s = np.array([[0.1], [0.5], [0.3], [0.8]])
    assert aggregate_per_subject(ids, s, "mean")[1][:, 0] == pytest.approx([0.4, 0.5])
    assert aggregate_per_subject(ids, s, "max")[1][:, 0].tolist() == [0.8, 0.5]
    assert aggregate_per_subject(ids, s, "latest")[1][:, 0].tolist() == [0.8, 0.5]
    with pytest.raises(ComorbidityError):
        aggregate_per_subject(ids, s, "median")


def test_risk_matrix_roundtrip(tmp_path):
    m = _matrix(20)
    m.write_csv(tmp_path / "r.csv")
    back = RiskMatrix.read_csv(tmp_path / "r.csv")
    assert back.codes == m.codes and back.subject_ids == m.subject_ids
    assert np.allclose(back.scores, m.scores, rtol=1e-5)


def test_export_figures(tmp_path):
    m = _matrix(300)
    net = build_network(m, mi_floor=0)
    files = export_figures(m, spearman_matrix(m), net, tmp_path, [("E11", "I10")], {"E11": "Diabetes"})
    heat = list(csv.reader(files["heatmap"].open()))
    assert len(heat) == 5 and all(len(r) == 5 for r in heat)
    chord = json.loads(files["chord"].read_text())
    assert len(chord["edges"]) == len(net.edges)
    assert chord["nodes"][0] == {"id": "E11", "chapter": "E", "name": "Diabetes"}
    scatter = list(csv.reader(files["scatter_E11_I10"].open()))
    assert len(scatter) == 1 + 300
    with pytest.raises(ComorbidityError, match="unknown disease code"):
        export_figures(m, spearman_matrix(m), net, tmp_path, [("E11", "Q99")])
