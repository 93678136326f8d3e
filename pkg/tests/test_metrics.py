import math

import numpy as np
import pytest

from manet.metrics import (
    MetricError,
    asd,
    binary_report,
    class_reports,
    hd95,
    overlap_scores,
    surface_points,
    write_metrics_csv,
)

from oracles import brute_distances, brute_overlap, brute_surface, percentile_linear


def test_overlap_basic():
    a = np.zeros((6, 6), bool)
    a[1:3, 0:4] = True
    assert overlap_scores(a, a) == (100.0, 100.0)
    b = np.zeros((6, 6), bool)
    b[4:6, 0:4] = True
    assert overlap_scores(a, b) == (0.0, 0.0)
    c = np.zeros((6, 6), bool)
    c[1:3, 2:6] = True  # 2x4 rectangles sharing a 2x2 block
    d, j = overlap_scores(a, c)
    assert d == 50.0 and abs(j - 100 / 3) < 1e-12
    assert overlap_scores(np.zeros((3, 3)), np.zeros((3, 3))) == (100.0, 100.0)
    with pytest.raises(MetricError):
        overlap_scores(a, np.zeros((5, 5)))


def test_surface_points():
    sq = np.zeros((5, 5), bool)
    sq[1:4, 1:4] = True
    assert len(surface_points(sq)) == 8
    one = np.zeros((4, 4), bool)
    one[2, 1] = True
    assert surface_points(one).tolist() == [[2, 1]]
    cube = np.ones((4, 4, 4), bool)
    assert len(surface_points(cube)) == 56


def test_distance_singletons():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[2, 1] = True
    b[2, 4] = True
    assert hd95(a, b) == 3.0 and asd(a, b) == 3.0
    assert hd95(a, a) == 0.0 and asd(a, a) == 0.0


def test_distance_empty():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    b[0, 0] = True
    with pytest.raises(MetricError):
        hd95(a, b)
    with pytest.raises(MetricError):
        asd(b, a)


def _random_mask(rng, shape):
    m = rng.random(shape) < rng.uniform(0.05, 0.6)
    if not m.any():
        m[tuple(rng.integers(0, n) for n in shape)] = True
    return m


def test_against_brute_force_2d(rng):
    for _ in range(30):
        shape = tuple(rng.integers(3, 16, 2))
        p, r = _random_mask(rng, shape), _random_mask(rng, shape)
        assert sorted(map(tuple, surface_points(p).tolist())) == sorted(brute_surface(p))
        d = brute_distances(p, r)
        assert abs(hd95(p, r) - percentile_linear(d, 95)) < 1e-6
        assert abs(asd(p, r) - sum(d) / len(d)) < 1e-6
        assert np.allclose(overlap_scores(p, r), brute_overlap(p, r), atol=1e-9)


def test_symmetry(rng):
    for _ in range(20):
        p, r = _random_mask(rng, (10, 12)), _random_mask(rng, (10, 12))
        assert hd95(p, r) == hd95(r, p)
        assert math.isclose(asd(p, r), asd(r, p))
        d, j = overlap_scores(p, r)
        assert j <= d


def test_binary_report_empty_conventions():
    e = np.zeros((3, 4), bool)
    f = e.copy()
    f[1, 1] = True
    assert binary_report(e, e).hd95 == 0.0
    rep = binary_report(e, f)
    assert rep.dice == 0.0 and rep.hd95 == 5.0 and rep.asd == 5.0


def test_class_reports_and_csv(tmp_path):
    ref = np.zeros((6, 6), int)
    ref[1:3, 1:3] = 1
    ref[4:, 4:] = 2
    reps = class_reports(ref, ref, 3)
    assert sorted(reps) == [1, 2]
    assert all(r.dice == 100 and r.hd95 == 0 for r in reps.values())
    path = tmp_path / "m.csv"
    write_metrics_csv([("a", k, r) for k, r in reps.items()], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,class,dice,jaccard,hd95,asd"
    assert lines[-1].startswith("mean,all,100.000000")
    assert len(lines) == 4
