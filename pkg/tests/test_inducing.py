import json
import math

import numpy as np
import pytest

import gmykit.hyperbolic as gh
import gmykit.inducing as gi
import gmykit.maps as gm

from oracles import forward_defect_oracle, forward_reiterate, tent_preimage_depth

P06 = gh.HyperbolicParams(0.6, 0.05, 0.5, "shifted")
TENT_PARAMS = gh.HyperbolicParams(0.6, 0.002, 0.5, "shifted")
LOGISTIC_PARAMS = gh.HyperbolicParams(0.6, 0.002, 0.5, "shifted")
MP_PARAMS = gh.HyperbolicParams(0.6, 0.01, 0.5, "shifted")


@pytest.fixture(scope="module")
def doubling_base():
    return gi.find_base_point(gm.doubling(), 0.1, p=0.3)


@pytest.fixture(scope="module")
def doubling_tree(doubling_base):
    return gi.build_connector_tree(gm.doubling(), doubling_base)


@pytest.fixture(scope="module")
def doubling_run(doubling_base, doubling_tree):
    return gi.run_inducing(
        gm.doubling(), doubling_base, P06, n0=8, n_max=24, grid=1024,
        tree=doubling_tree,
    )


@pytest.fixture(scope="module")
def tent_small():
    spec = gm.tent()
    base = gi.find_base_point(spec, 0.1)
    return gi.run_inducing(spec, base, TENT_PARAMS, n0=8, n_max=20, grid=512)


# ---------------------------------------------------------------------------
# base domain and base-point search
# ---------------------------------------------------------------------------


def test_base_domain_validation():
    b = gi.BaseDomain("doubling", 0.3, 0.005, 0.1, 6)
    assert b.delta == (0.295, 0.305)
    assert b.delta_prime == (0.29, 0.31)
    assert b.measure() == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(gi.InducingError):
        gi.BaseDomain("doubling", 0.3, 0.006, 0.1, 6)
    with pytest.raises(gi.InducingError):
        gi.BaseDomain("doubling", 0.3, 0.005, 0.1, -1)


def test_find_base_doubling_dyadic_spacing(doubling_base):
    # 2^m preimages of 0.3 with exact gap 2^-m; 1/64 < 0.025 <= 1/32
    assert doubling_base.p == 0.3
    assert doubling_base.N0 == 6
    assert doubling_base.delta0 == pytest.approx(0.005, abs=1e-15)
    assert 2.0 ** -6 < 0.1 / 4.0 < 2.0 ** -5


def test_find_base_tent_nondyadic_matches_enumeration():
    spec = gm.tent()
    for p in (0.3, 1.0 / 3.0):
        want = tent_preimage_depth(p, 0.1)
        got = gi.find_base_point(spec, 0.1, p=p)
        assert got.N0 == want
        assert got.N0 <= 7


def test_find_base_logistic_rejects_critical_orbit():
    spec = gm.logistic()
    with pytest.raises(gi.BaseSearchError):
        gi.find_base_point(spec, 0.1, p=0.5)
    base = gi.find_base_point(spec, 0.1)
    assert float(gm.distance_to_crit(spec, base.p)) > 2.0 * base.delta0


def test_find_base_errors():
    with pytest.raises(gm.DomainError):
        gi.find_base_point(gm.doubling(), 0.7)
    with pytest.raises(gi.BaseSearchError) as ei:
        gi.find_base_point(gm.doubling(), 0.1, depth_max=2)
    assert "densest" in str(ei.value)


def test_min_depth_extends_connector():
    base = gi.find_base_point(gm.logistic(), 0.1, min_depth=8)
    assert base.N0 == 8


# ---------------------------------------------------------------------------
# connector tree
# ---------------------------------------------------------------------------


def test_tree_doubling_counts_and_lengths():
    # Delta' = B(0.3, 0.02): depth-m components are dyadic translates of
    # length 0.04 * 2^-m
    base = gi.BaseDomain("doubling", 0.3, 0.01, 0.2, 6)
    t = gi.build_connector_tree(gm.doubling(), base)
    assert t.n_entries == 127  # 2^0 + ... + 2^6
    assert t.counts().tolist() == [2 ** m for m in range(7)]
    for m in range(7):
        lengths = t.hi[m] - t.lo[m]
        assert np.max(np.abs(lengths - 0.04 * 2.0 ** -m)) < 1e-12
    assert t.D0 == pytest.approx(0.0, abs=1e-12)
    assert t.K0 == pytest.approx(64.0, abs=1e-9)
    assert t.forward_defect < 1e-9
    assert t.discarded == 0


def test_tree_entries_sorted_and_disjoint(doubling_tree):
    t = doubling_tree
    for m in range(t.depth + 1):
        assert np.all(np.diff(t.lo[m]) > 0)
        assert np.all(t.lo[m][1:] >= t.hi[m][:-1] - 1e-12)
    assert t.offsets.tolist() == np.cumsum([0] + t.counts().tolist()).tolist()


def test_tree_boundary_forward_all_maps():
    for spec, d1 in [
        (gm.doubling(), 0.1),
        (gm.tent(), 0.1),
        (gm.logistic(), 0.1),
        (gm.manneville_pomeau(0.5), 0.2),
    ]:
        base = gi.find_base_point(spec, d1)
        tree = gi.build_connector_tree(spec, base)
        pl, ph = base.delta_prime
        worst = 0.0
        for m in range(tree.depth + 1):
            if tree.lo[m].size == 0:
                continue
            R = np.full(tree.lo[m].size, m, dtype=np.int64)
            worst = max(
                worst, forward_defect_oracle(spec, tree.lo[m], tree.hi[m], R, pl, ph)
            )
        assert worst < 1e-9, spec.name


def test_tree_logistic_depth8_forward():
    spec = gm.logistic()
    base = gi.find_base_point(spec, 0.1, min_depth=8)
    tree = gi.build_connector_tree(spec, base)
    assert tree.depth == 8
    pl, ph = base.delta_prime
    for m in range(9):
        if tree.lo[m].size == 0:
            continue
        R = np.full(tree.lo[m].size, m, dtype=np.int64)
        assert forward_defect_oracle(spec, tree.lo[m], tree.hi[m], R, pl, ph) < 1e-9


# ---------------------------------------------------------------------------
# reach_delta
# ---------------------------------------------------------------------------


def _entries_inside(tree, m, bl, bh):
    hits = []
    for k in (math.floor(bl), math.floor(bl) + 1):
        lo, hi = tree.lo[m] + k, tree.hi[m] + k
        for j in range(lo.size):
            if bl < lo[j] and hi[j] < bh:
                hits.append(lo[j])
    return hits


def test_reach_doubling_exhaustive_grid(doubling_tree):
    t = doubling_tree
    for i in range(1000):
        c = (i + 0.5) / 1000.0
        bl, bh = c - 0.1, c + 0.1
        entry, k = gi.reach_delta(t, (bl, bh))
        assert entry.m <= 6
        assert bl < entry.lo + k and entry.hi + k < bh
        for m in range(entry.m):
            assert not _entries_inside(t, m, bl, bh)
        same = _entries_inside(t, entry.m, bl, bh)
        assert min(same) == pytest.approx(entry.lo + k, abs=1e-15)


def test_reach_at_p_is_depth_zero(doubling_base, doubling_tree):
    entry, k = gi.reach_delta(doubling_tree, (0.3 - 0.1, 0.3 + 0.1))
    assert entry.m == 0
    assert entry.lo + k == pytest.approx(0.29, abs=1e-12)
    assert entry.hi + k == pytest.approx(0.31, abs=1e-12)


def test_reach_tiny_ball_coverage_error(doubling_tree):
    with pytest.raises(gi.CoverageError):
        gi.reach_delta(doubling_tree, (0.123456, 0.123456 + 1e-6))


# ---------------------------------------------------------------------------
# candidate_set
# ---------------------------------------------------------------------------


def test_candidate_doubling_width_exact(doubling_base, doubling_tree):
    spec = gm.doubling()
    orbit = gm.iterate_orbit(spec, 0.2971, 10, delta=P06.delta)
    pb = gh.build_preball(spec, orbit, 3, 0.1, P06)
    cand = gi.candidate_set(spec, pb, doubling_tree, orbit=orbit)
    assert cand.n == 3 and cand.R == 3 + cand.m
    want = 0.01 * 2.0 ** -cand.R
    assert cand.u_hi - cand.u_lo == pytest.approx(want, rel=1e-12)


def test_candidate_forward_all_maps():
    cases = [
        (gm.doubling(), 0.1, 0.3, P06),
        (gm.tent(), 0.1, None, TENT_PARAMS),
        (gm.logistic(), 0.1, None, LOGISTIC_PARAMS),
        (gm.manneville_pomeau(0.5), 0.2, None, MP_PARAMS),
    ]
    for spec, d1, p, params in cases:
        base = gi.find_base_point(spec, d1, p=p)
        tree = gi.build_connector_tree(spec, base)
        d_lo, d_hi = base.delta
        checked = 0
        for s in range(40):
            x0 = base.p + (s - 20) * base.delta0 / 25.0
            orbit = gm.iterate_orbit(spec, x0, 16, delta=params.delta)
            times = gh.hyperbolic_times_fast(orbit, params)
            times = times[(times >= 6) & (times <= 14)]
            if times.size == 0:
                continue
            try:
                pb = gh.build_preball(spec, orbit, int(times[0]), d1, params)
                cand = gi.candidate_set(spec, pb, tree, orbit=orbit)
            except (gh.PullbackError, gi.CoverageError):
                continue
            defect = forward_defect_oracle(
                spec, [cand.u_lo], [cand.u_hi], [cand.R], d_lo, d_hi
            )
            assert defect < 1e-9, spec.name
            checked += 1
            if checked >= 5:
                break
        assert checked >= 3, spec.name


def test_candidate_tent_center_off_u():
    # the connector may sit anywhere in the image ball, so U need not
    # contain the center
    spec = gm.tent()
    base = gi.find_base_point(spec, 0.1)
    tree = gi.build_connector_tree(spec, base)
    found = False
    for s in range(60):
        x0 = base.p + (s - 30) * base.delta0 / 35.0
        orbit = gm.iterate_orbit(spec, x0, 16, delta=TENT_PARAMS.delta)
        times = gh.hyperbolic_times_fast(orbit, TENT_PARAMS)
        times = times[(times >= 6) & (times <= 12)]
        if times.size == 0:
            continue
        try:
            pb = gh.build_preball(spec, orbit, int(times[0]), 0.1, TENT_PARAMS)
            cand = gi.candidate_set(spec, pb, tree, orbit=orbit)
        except (gh.PullbackError, gi.CoverageError):
            continue
        if not (cand.u_lo <= x0 <= cand.u_hi):
            found = True
            break
    assert found


# ---------------------------------------------------------------------------
# inducing_step
# ---------------------------------------------------------------------------


def test_step_doubling_nonempty_at_n0(doubling_base, doubling_tree):
    spec = gm.doubling()
    state = gi.new_state(
        spec, doubling_base, P06, n0=8, n_max=12, grid=512, tree=doubling_tree
    )
    eng = state.engine
    centers = eng.grid_points[eng.hyp[:, 8]]
    assert centers.size == eng.grid_points.size  # every grid point is in H_8
    state = gi.inducing_step(state, 8, centers)
    assert len(state.elements) > 0
    assert state.leftover_measure() < doubling_base.measure()
    row = state.ledger.row(8)
    assert row.n_elements == len(state.elements)


def test_step_selection_disjoint_and_claimed(doubling_base, doubling_tree):
    spec = gm.doubling()
    state = gi.new_state(
        spec, doubling_base, P06, n0=8, n_max=12, grid=512, tree=doubling_tree
    )
    eng = state.engine
    for n in (8, 9, 10):
        gi.inducing_step(state, n, eng.grid_points)
    els = sorted(state.elements, key=lambda e: e.u_lo)
    d_lo, d_hi = doubling_base.delta
    for a, b in zip(els, els[1:]):
        assert b.u_lo >= a.u_hi - 1e-3 * (b.u_hi - b.u_lo)
    for e in els:
        assert d_lo - 1e-12 <= e.u_lo < e.u_hi <= d_hi + 1e-12
        j0 = np.searchsorted(eng.edges, 0.5 * (e.u_lo + e.u_hi), side="right") - 1
        assert not eng.alive[j0]
    assert np.all((eng.killer >= 0) == ~eng.alive)


def test_step_off_grid_centers_raise(doubling_base):
    state = gi.new_state(gm.doubling(), doubling_base, P06, n0=8, n_max=10, grid=256)
    with pytest.raises(gi.InducingError):
        gi.inducing_step(state, 8, [0.2951234567])


def test_step_empty_centers_noop(doubling_base):
    state = gi.new_state(gm.doubling(), doubling_base, P06, n0=8, n_max=10, grid=256)
    state = gi.inducing_step(state, 8, [])
    row = state.ledger.row(8)
    assert row.n_elements == 0 and row.measure == 0.0
    assert state.leftover_measure() == pytest.approx(0.01, abs=1e-15)


def test_saturation_every_step_all_maps(doubling_run, tent_small):
    for part in (doubling_run, tent_small):
        for row in part.ledger.rows:
            assert gi.saturation_defect(part, row.n) < 1e-8
    spec = gm.logistic()
    base = gi.find_base_point(spec, 0.1)
    part = gi.run_inducing(spec, base, LOGISTIC_PARAMS, n0=12, n_max=20, grid=512)
    for row in part.ledger.rows:
        assert gi.saturation_defect(part, row.n) < 1e-8
    spec = gm.manneville_pomeau(0.5)
    base = gi.find_base_point(spec, 0.2)
    part = gi.run_inducing(
        spec, base, MP_PARAMS, n0=10, n_max=20, grid=512, forward_slack=gi.FWD_ULP
    )
    for row in part.ledger.rows:
        assert gi.saturation_defect(part, row.n) < 1e-8


# ---------------------------------------------------------------------------
# run_inducing
# ---------------------------------------------------------------------------


def test_run_doubling_reference_coverage():
    # example config: n0 = 8, n_max = 40, grid 2^14
    spec = gm.doubling()
    base = gi.find_base_point(spec, 0.1, p=0.3)
    part = gi.run_inducing(spec, base, P06, n0=8, n_max=40, grid=2 ** 14)
    assert part.leftover_fraction() < 0.02
    lv = [v for _, v in part.leftover]
    assert all(b <= a + 1e-15 for a, b in zip(lv, lv[1:]))
    lo = np.asarray([e.u_lo for e in part.elements])
    hi = np.asarray([e.u_hi for e in part.elements])
    R = np.asarray([e.R for e in part.elements], dtype=np.int64)
    d_lo, d_hi = base.delta
    assert forward_defect_oracle(spec, lo, hi, R, d_lo, d_hi) < 1e-9


def test_run_monotone_leftover(doubling_run):
    lv = [v for _, v in doubling_run.leftover]
    assert all(b <= a + 1e-15 for a, b in zip(lv, lv[1:]))
    assert doubling_run.leftover_fraction() < 0.02


def test_run_element_invariants(doubling_run, tent_small):
    for part in (doubling_run, tent_small):
        n0, N0 = part.n0, part.base.N0
        for e in part.elements:
            assert e.R == e.n + e.m
            assert 0 <= e.m <= N0
            assert e.n >= n0
            assert e.min_deriv > 1.0  # kappa < 1 elementwise
            assert e.forward_defect <= 1e-9


def test_run_return_time_widths(doubling_run):
    # |U| = |Delta| 2^-R exactly for the doubling map
    meas = doubling_run.base.measure()
    for e in doubling_run.elements:
        assert e.u_hi - e.u_lo == pytest.approx(meas * 2.0 ** -e.R, rel=1e-9)


def test_engine_matches_scalar_candidate(doubling_run, doubling_tree):
    spec = gm.doubling()
    for e in doubling_run.elements[:: max(1, len(doubling_run.elements) // 7)]:
        orbit = gm.iterate_orbit(spec, e.center, e.n, delta=P06.delta)
        pb = gh.build_preball(spec, orbit, e.n, 0.1, P06)
        cand = gi.candidate_set(spec, pb, doubling_tree, orbit=orbit)
        assert cand.m == e.m and cand.R == e.R
        assert cand.u_lo == pytest.approx(e.u_lo, abs=1e-12)
        assert cand.u_hi == pytest.approx(e.u_hi, abs=1e-12)


def test_grid_leftover_bounds_exact_leftover(tent_small):
    grid_left = tent_small.leftover_measure()
    exact = tent_small.exact_leftover_set().measure()
    assert exact >= grid_left - 1e-12
    eng = tent_small.engine
    alive = np.flatnonzero(eng.alive)
    assert grid_left == pytest.approx(alive.size * eng.grid_spacing, abs=1e-15)
    eset = tent_small.element_set()
    for j in alive[:: max(1, alive.size // 16)]:
        cell = gi.IntervalSet.from_pairs([(eng.edges[j], eng.edges[j + 1])])
        assert cell.intersect(eset).measure() < 1e-12


def test_ledger_partial_sums(doubling_run):
    ps = doubling_run.ledger.partial_sums()
    assert ps.size == len(doubling_run.ledger.rows)
    assert np.all(np.diff(ps) >= -1e-15)
    with pytest.raises(KeyError):
        doubling_run.ledger.row(7)


def test_satellite_rows_inside_delta(doubling_run):
    dset = doubling_run.base.delta_set()
    for row in doubling_run.ledger.rows:
        s = row.satellite
        assert s.intersect(dset).measure() == pytest.approx(s.measure(), abs=1e-12)
        per = sum(m for _, m in row.per_element) + row.complement_measure
        assert per >= row.measure - 1e-12
        for idx, m in row.per_element:
            assert 0 <= idx < len(doubling_run.elements)
            assert m >= 0.0


def test_run_determinism_bitwise(doubling_base, doubling_tree):
    spec = gm.doubling()
    runs = [
        gi.run_inducing(
            spec, doubling_base, P06, n0=8, n_max=14, grid=512, tree=doubling_tree
        )
        for _ in range(2)
    ]
    a, b = (json.dumps(r.to_dict(), sort_keys=True) for r in runs)
    assert a == b


def test_run_keep_sets_false(doubling_base, doubling_tree):
    part = gi.run_inducing(
        gm.doubling(), doubling_base, P06, n0=8, n_max=12, grid=256,
        tree=doubling_tree, keep_sets=False,
    )
    assert part.ledger.rows[0].satellite is None
    assert part.ledger.rows[0].measure > 0.0
    with pytest.raises(gi.InducingError):
        gi.saturation_defect(part, 8)
    assert part.to_dict()["leftover"]["final_pairs"] == []


def test_new_state_validation(doubling_base):
    spec = gm.doubling()
    with pytest.raises(gm.DomainError):
        gi.new_state(spec, doubling_base, P06, n0=0, n_max=10)
    with pytest.raises(gm.DomainError):
        gi.new_state(spec, doubling_base, P06, n0=8, n_max=7)
    with pytest.raises(gm.DomainError):
        gi.new_state(spec, doubling_base, P06, n0=8, n_max=10, grid=1)
    with pytest.raises(gm.DomainError):
        gi.new_state(spec, doubling_base, P06, n0=8, n_max=10, forward_slack=-1.0)


def test_suggest_n0(doubling_tree):
    n0 = gi.suggest_n0(doubling_tree, P06)
    k0, N0 = doubling_tree.K0, doubling_tree.base.N0
    assert k0 * P06.sigma ** (0.5 * (n0 - N0)) <= 0.5
    assert k0 * P06.sigma ** (0.5 * (n0 - 1 - N0)) > 0.5


def test_json_csv_outputs(tmp_path, doubling_run):
    jp = tmp_path / "part.json"
    cp = tmp_path / "ledger.csv"
    gi.write_partition_json(doubling_run, str(jp))
    gi.write_ledger_csv(doubling_run, str(cp))
    data = json.loads(jp.read_text())
    assert data["map"] == "doubling"
    els = data["elements"]
    assert len(els) == len(doubling_run.elements)
    assert all(set(e) == {"U", "n", "m", "R", "center"} for e in els)
    assert all(a["U"][0] <= b["U"][0] for a, b in zip(els, els[1:]))
    lines = cp.read_text().splitlines()
    assert lines[0] == "n,satellite_measure,leftover_measure,elements,centers"
    assert len(lines) == 1 + len(doubling_run.ledger.rows)
