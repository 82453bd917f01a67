import datetime as dt
import logging

import numpy as np
import pytest

from stmrf.synth import (
    BURNT,
    CLASS_MEANS,
    WATER,
    Polygon,
    Scenario,
    generate_scene,
    reference_polygons,
    render_features,
    sample_polygon,
    sample_polygons,
)


def small(**kw):
    base = dict(H=48, W=48, n_patches=20)
    base.update(kw)
    return Scenario(**base)


def test_default_gaps():
    assert Scenario().gaps == [22, 22, 33, 11]


def test_validation():
    with pytest.raises(ValueError):
        Scenario(H=1)
    with pytest.raises(ValueError):
        Scenario(dates=(dt.date(2014, 1, 2), dt.date(2014, 1, 1)))
    bad = np.eye(5)
    bad[0, 0] = 0.5
    with pytest.raises(ValueError):
        Scenario(base_step=bad)


def test_determinism():
    a, b = generate_scene(small(seed=7)), generate_scene(small(seed=7))
    assert np.array_equal(a.truth, b.truth) and np.array_equal(a.patches, b.patches)
    sc = small(seed=7)
    assert np.array_equal(render_features(a.truth, sc, a.patches), render_features(b.truth, sc, b.patches))
    c = generate_scene(small(seed=8))
    assert not np.array_equal(a.truth, c.truth)


def test_truth_is_piecewise_constant_per_patch():
    s = generate_scene(small(seed=3))
    for t in range(s.truth.shape[0]):
        assert np.array_equal(s.truth[t], s.patch_classes[s.patches, t])


def test_no_burning_without_burn_probability():
    P = np.eye(5)
    P[1] = [0, 0.9, 0.1, 0, 0]
    s = generate_scene(small(base_step=P, burn_step=P, seed=5))
    assert not (s.truth == BURNT).any()


def test_occupancy_matches_chain():
    sc = Scenario(H=100, W=100, n_patches=3000, n_water=0, seed=11)
    s = generate_scene(sc)
    n = s.patch_classes.shape[0]
    assert n > 2000
    pi = np.asarray(sc.initial) / np.sum(sc.initial)
    for t in range(sc.T):
        if t:
            pi = pi @ sc.gap_matrix(t - 1)
        counts = np.bincount(s.patch_classes[:, t], minlength=sc.K)
        sd = np.sqrt(n * pi * (1 - pi))
        assert (np.abs(counts - n * pi) <= 3 * sd + 1e-9).all(), (t, counts, n * pi)


def test_water_is_permanent():
    s = generate_scene(small(n_water=3, seed=2))
    water = s.patch_classes[:, 0] == WATER
    assert water.sum() >= 1
    assert (s.patch_classes[water] == WATER).all()


def test_speckle_off_gives_exact_means():
    sc = small(cov=np.zeros((5, 2, 2)), looks=np.inf, patch_jitter=0.0)
    s = generate_scene(sc)
    x = render_features(s.truth, sc, s.patches)
    np.testing.assert_array_equal(x, CLASS_MEANS[s.truth])


def test_speckle_sample_means_converge():
    sc = Scenario(H=100, W=100, patch_jitter=0.0, seed=4)
    truth = np.zeros((1, 100, 100), dtype=np.int64)
    for k in range(5):
        truth[0] = k
        x = render_features(truth, sc).reshape(-1, 2)
        se = x.std(axis=0) / np.sqrt(len(x))
        assert (np.abs(x.mean(axis=0) - CLASS_MEANS[k]) <= 3 * se).all(), k


def test_non_psd_covariance():
    cov = np.zeros((5, 2, 2))
    cov[2] = [[1.0, 2.0], [2.0, 1.0]]
    with pytest.raises(ValueError, match="positive semi-definite"):
        render_features(np.zeros((1, 4, 4), int), small(cov=cov))


def test_reference_polygons_inside_patches():
    s = generate_scene(small(seed=9))
    polys = reference_polygons(s, max_half=4)
    assert polys
    for p in polys:
        ids = s.patches[p.r0 : p.r1, p.c0 : p.c1]
        assert (ids == ids[0, 0]).all()
        assert p.r1 - p.r0 <= 9
        assert len(p.vertices()) == 4


def test_one_pixel_polygon_warns(caplog):
    poly = Polygon(0, 3, 4, 5, 6, (1,))
    with caplog.at_level(logging.WARNING):
        got = sample_polygon(poly, 15, 6.0, np.random.default_rng(0))
    assert got.tolist() == [[3, 5]]
    assert "only 1 of 15" in caplog.text


def test_samples_are_spaced_and_split_disjoint():
    s = generate_scene(Scenario(seed=1))
    polys = reference_polygons(s)
    ss = sample_polygons(polys, per_poly=15, min_dist=6.0, seed=2, min_train=3)
    for p in range(len(polys)):
        pts = np.stack([ss.rows, ss.cols], 1)[ss.polygon == p]
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        assert (d[np.triu_indices(len(pts), 1)] >= 6.0).all()
    tr = {(r, c) for r, c, m in zip(ss.rows, ss.cols, ss.is_train) if m}
    te = {(r, c) for r, c, m in zip(ss.rows, ss.cols, ss.is_train) if not m}
    assert not tr & te
    # coverage: every class seen in a polygon at date t has >= 3 training samples
    for t in range(s.truth.shape[0]):
        lab = ss.labels(polys, t)
        for k in {p.classes[t] for p in polys}:
            assert (ss.is_train & (lab == k)).sum() >= 3
    again = sample_polygons(polys, per_poly=15, min_dist=6.0, seed=2, min_train=3)
    assert np.array_equal(again.rows, ss.rows) and np.array_equal(again.train_polygon, ss.train_polygon)
