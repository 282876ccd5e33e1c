import numpy as np
import pytest

from gmykit.intervals import EPS_GEOM, IntervalError, IntervalSet, ball, segments_mod1


def rand_set(rng, max_comp=4, wrap=False):
    k = rng.integers(1, max_comp + 1)
    pts = np.sort(rng.random(2 * k))
    return IntervalSet.from_pairs(list(zip(pts[0::2], pts[1::2])), wrap)


def test_union_overlapping():
    a = IntervalSet.from_pairs([(0.0, 0.3)])
    b = IntervalSet.from_pairs([(0.2, 0.5)])
    u = a.union(b)
    assert u.pairs() == [(0.0, 0.5)]
    assert u.measure() == pytest.approx(0.5, abs=EPS_GEOM)


def test_union_identity():
    a = IntervalSet.from_pairs([(0.1, 0.2), (0.6, 0.9)])
    assert a.union(IntervalSet.empty()).pairs() == a.pairs()


def test_union_wrap_merge_single_arc():
    a = IntervalSet.from_pairs([(0.9, 1.0)], wrap=True)
    b = IntervalSet.from_pairs([(0.0, 0.1)], wrap=True)
    u = a.union(b)
    assert u.measure() == pytest.approx(0.2, abs=EPS_GEOM)
    arcs = u.arcs()
    assert len(arcs) == 1
    assert arcs[0] == pytest.approx((0.9, 1.1), abs=EPS_GEOM)


def test_mixed_wrap_modes_rejected():
    a = IntervalSet.from_pairs([(0.1, 0.2)], wrap=True)
    b = IntervalSet.from_pairs([(0.3, 0.4)], wrap=False)
    with pytest.raises(IntervalError):
        a.union(b)


def test_subtract_middle():
    a = IntervalSet.from_pairs([(0.0, 1.0)])
    d = a.subtract(IntervalSet.from_pairs([(0.4, 0.6)]))
    assert d.pairs() == [(0.0, 0.4), (0.6, 1.0)]
    assert d.measure() == pytest.approx(0.8, abs=EPS_GEOM)


def test_subtract_self_and_overhang():
    a = IntervalSet.from_pairs([(0.0, 0.5)])
    assert a.subtract(a).is_empty()
    r = a.subtract(IntervalSet.from_pairs([(0.25, 1.0)]))
    assert r.pairs() == [(0.0, 0.25)]


def test_measure_examples():
    assert IntervalSet.empty().measure() == 0.0
    assert IntervalSet.from_pairs([(0.2, 0.7)]).measure() == pytest.approx(0.5)
    two = IntervalSet.from_pairs([(0.0, 0.1), (0.5, 0.8)])
    assert two.measure() == pytest.approx(0.4)


def test_subtract_measure_identity_random():
    rng = np.random.default_rng(20260825)
    for _ in range(1000):
        a, b = rand_set(rng), rand_set(rng)
        lhs = a.subtract(b).measure()
        rhs = a.measure() - a.intersect(b).measure()
        assert abs(lhs - rhs) < 1e-10


def test_algebra_laws_random():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a, b, c = rand_set(rng), rand_set(rng), rand_set(rng)
        assert a.union(b).pairs() == b.union(a).pairs()
        lhs = a.union(b).union(c)
        rhs = a.union(b.union(c))
        assert lhs.pairs() == rhs.pairs()
        # A \ (B u C) == (A \ B) \ C
        d1 = a.subtract(b.union(c))
        d2 = a.subtract(b).subtract(c)
        assert np.allclose(d1.lo, d2.lo, atol=EPS_GEOM) and np.allclose(
            d1.hi, d2.hi, atol=EPS_GEOM
        )
        # monotonicity: subset has smaller measure
        assert a.intersect(b).measure() <= a.measure() + EPS_GEOM
        assert a.subtract(b).measure() <= a.measure() + EPS_GEOM


def test_normalization_idempotent():
    rng = np.random.default_rng(99)
    for _ in range(200):
        a = rand_set(rng, max_comp=6)
        again = IntervalSet(a.lo.copy(), a.hi.copy(), a.wrap)
        assert again.pairs() == a.pairs()


def test_tiny_components_survive():
    # far below the merge tolerance, but isolated: must not be dropped
    a = IntervalSet.from_pairs([(0.1, 0.1 + 1e-15), (0.5, 0.6)])
    assert a.n_components == 2


def test_adjacent_components_merge():
    a = IntervalSet.from_pairs([(0.0, 0.3), (0.3 + 0.5 * EPS_GEOM, 0.5)])
    assert a.n_components == 1


def test_contains_points():
    a = IntervalSet.from_pairs([(0.1, 0.2), (0.6, 0.9)])
    x = np.array([0.05, 0.1, 0.15, 0.2, 0.4, 0.75, 0.95])
    got = a.contains_points(x)
    assert got.tolist() == [False, True, True, True, False, True, False]


def test_covers_interval():
    a = IntervalSet.from_pairs([(0.1, 0.4), (0.6, 0.9)])
    assert a.covers_interval(0.15, 0.35)
    assert not a.covers_interval(0.35, 0.65)
    assert a.covers_interval(0.1 - 1e-13, 0.4, tol=1e-12)


def test_sample_uniform_mean():
    a = IntervalSet.from_pairs([(0.0, 1.0)])
    x = a.sample(10**4, np.random.default_rng(3))
    # uniform-sampling oracle: mean 1/2, sd of mean ~ 1/sqrt(12e4) ~ 0.003
    assert abs(float(np.mean(x)) - 0.5) < 0.02
    assert np.all((x >= 0) & (x <= 1))


def test_sample_zero_measure_errors():
    with pytest.raises(IntervalError):
        IntervalSet.from_pairs([(0.4, 0.4)]).sample(5, 0)


def test_sample_deterministic():
    a = IntervalSet.from_pairs([(0.2, 0.5), (0.7, 0.8)])
    x1 = a.sample(64, 42)
    x2 = a.sample(64, 42)
    assert np.array_equal(x1, x2)
    assert np.all(a.contains_points(x1))


def test_sample_weights_by_length():
    a = IntervalSet.from_pairs([(0.0, 0.3), (0.9, 1.0)])
    x = a.sample(20000, 11)
    frac = float(np.mean(x <= 0.3))
    assert abs(frac - 0.75) < 0.02


def test_ball_interval_clips():
    b = ball(0.05, 0.1, wrap=False)
    assert b.pairs() == [(0.0, 0.15000000000000002)] or b.pairs()[0][0] == 0.0
    assert b.measure() == pytest.approx(0.15, abs=EPS_GEOM)


def test_ball_circle_wraps():
    b = ball(0.05, 0.1, wrap=True)
    assert b.n_components == 2
    assert b.measure() == pytest.approx(0.2, abs=EPS_GEOM)
    arcs = b.arcs()
    assert len(arcs) == 1
    assert arcs[0][1] - arcs[0][0] == pytest.approx(0.2, abs=EPS_GEOM)


def test_ball_full_circle():
    assert ball(0.3, 0.6, wrap=True).measure() == pytest.approx(1.0)


def test_segments_mod1():
    segs = segments_mod1(0.9, 1.1)
    s = IntervalSet.from_pairs(segs, wrap=True)
    assert s.measure() == pytest.approx(0.2, abs=EPS_GEOM)
    assert segments_mod1(0.2, 0.4) == [(pytest.approx(0.2), pytest.approx(0.4))]
    assert IntervalSet.from_pairs(segments_mod1(-0.3, 1.2), wrap=True).measure() == 1.0


def test_intersect_random_against_grid():
    # membership oracle on a fine grid
    rng = np.random.default_rng(5)
    grid = np.linspace(0, 1, 4001)
    for _ in range(50):
        a, b = rand_set(rng), rand_set(rng)
        inter = a.intersect(b)
        want = a.contains_points(grid) & b.contains_points(grid)
        got = inter.contains_points(grid)
        # endpoints can differ on boundary grid points only
        assert np.mean(want != got) < 2e-3
