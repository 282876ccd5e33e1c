"""Construction of the induced full-branch map on a base interval.

The pipeline picks a base point p whose preimage tree is dense (so every
hyperbolic ball contains a connector entry), builds the connector tree of
diffeomorphic preimages of Delta' = B(p, 2*delta0), and then walks return
times n = n0..n_max.  At step n every grid center x in Delta that is
hyperbolic at n contributes candidates

    U^x_{n,m} = (f^{n+m} restricted to V_n(x))^{-1}(Delta),

one per connector entry of depth m inside the ball B(f^n x, delta1):
pull Delta back through the entry and then through the pre-ball branch
history of x.  A maximal pairwise-disjoint family of candidates inside
the unpartitioned region becomes the new partition elements with return
time R = n + m, selected in a fixed deterministic order (ascending left
endpoint, then smaller m, then leftmost center).

Disjointness is exact: a candidate is eligible only when its interval
misses every previously selected element (EPS_GEOM slack), and a blocked
candidate contributes its pre-ball remainder to the satellites of the
elements it overlaps.  The unpartitioned region Delta_n, the element
intervals, their return times, and the satellite sets are all exact
interval data; the grid only supplies the candidate centers (one per
cell) and a claimed-cell diagnostic.  Candidate construction per center
is pure and vectorized across centers; selection and satellite updates
run as a single sequential state machine per step, so identical inputs
give bitwise identical partitions.

Candidates are aimed where they can land: each center finds the largest
unpartitioned arc of its pre-ball (a range-argmax over the gaps between
selected elements), pushes the arc forward n steps in extended precision,
and offers the connector entries inside the arc image, a handful per
depth from the arc's left edge.  Entry positions at depth m only cover a
|Delta'| * 2^m fraction of image space per level, so blanketing every
entry of every branch mostly produces candidates that re-land on already
partitioned ground; arc aiming keeps the candidate pool proportional to
what is left to cover.  Arc images are advisory only; eligibility, the
forward certificate, and the exact set algebra downstream are unchanged.

Double precision limits return times twice over.  Re-iterating a stored
endpoint R steps amplifies its rounding error by |(f^R)'| ~ 2^R, so past
R = FLOAT_R_CAP a forward re-iteration check cannot beat EPS_FORWARD no
matter how the endpoint was computed; the default forward tolerance
therefore scales as max(EPS_FORWARD, FWD_ULP * |Delta| / |U|), which is
the rounding noise of the stored endpoints themselves.  Deeper still,
element widths |Delta| * 2^-R fall under the endpoint spacing near
R = R_STORE_CAP and the interval collapses in storage; candidates past
that cap are pruned up front and a width gate drops collapsed survivors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import hyperbolic as _hyp
from . import intervals as _iv
from . import maps as _maps
from .hyperbolic import HyperbolicParams, PreBall
from .intervals import EPS_GEOM, IntervalSet
from .maps import DomainError, MapSpec

EPS_CRIT = 1e-3
EPS_FORWARD = 1e-9
FWD_ULP = 2.0 ** -47  # storage ulps allowed after |(f^R)'| amplification
DEFAULT_GRID = 4096
FLOAT_R_CAP = 24  # 2^24 * ulp stays under EPS_FORWARD; 2^25 does not
R_STORE_CAP = 44  # |Delta| * 2^-44 nears endpoint spacing; widths collapse
CAP_PER_DEPTH = 64  # entries offered per (center, depth) from the arc edge
DEPTH_SPREAD = 6  # depths offered per arc past the shallowest reachable


def _ragged_arange(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenated ranges starts[i] .. starts[i] + counts[i] - 1."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    rep = np.repeat(starts, counts)
    off = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return rep + off


class InducingError(Exception):
    """Construction-level failure."""


class BaseSearchError(InducingError):
    """No admissible base point found within the search depth."""


class CoverageError(InducingError):
    """A hyperbolic ball contains no connector entry."""


# ---------------------------------------------------------------------------
# base domain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseDomain:
    """Base point p with Delta = B(p, delta0) and Delta' = B(p, 2*delta0).

    N0 is the connector depth: the preimages of p up to depth N0 are
    delta1/4-dense and stay clear of the critical set, so every ball of
    radius delta1 contains a depth <= N0 preimage of Delta'.
    """

    map_name: str
    p: float
    delta0: float
    delta1: float
    N0: int

    def __post_init__(self):
        if not 0 < self.delta0 <= self.delta1 / 20 + 1e-15:
            raise InducingError("delta0 must be positive and <= delta1/20")
        if self.N0 < 0:
            raise InducingError("N0 must be nonnegative")

    @property
    def delta(self) -> tuple[float, float]:
        return (self.p - self.delta0, self.p + self.delta0)

    @property
    def delta_prime(self) -> tuple[float, float]:
        return (self.p - 2.0 * self.delta0, self.p + 2.0 * self.delta0)

    def delta_set(self) -> IntervalSet:
        return IntervalSet.from_pairs([self.delta])

    def measure(self) -> float:
        return 2.0 * self.delta0


def _coverage_gap(xs: np.ndarray, circle: bool) -> float:
    """Largest gap of a point set; interval edge gaps count double so the
    criterion gap <= delta1/4 means covering radius <= delta1/8 in both
    phases."""
    xs = np.sort(np.asarray(xs, dtype=float))
    if xs.size == 0:
        return np.inf
    inner = float(np.diff(xs).max()) if xs.size > 1 else 0.0
    if circle:
        return max(inner, float(xs[0] + 1.0 - xs[-1]))
    return max(inner, 2.0 * float(xs[0]), 2.0 * float(1.0 - xs[-1]))


def _preimage_points(spec: MapSpec, xs: np.ndarray) -> np.ndarray:
    """All f-preimages of the given points, concatenated across branches."""
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if spec.is_circle:
        outs = [
            _maps.invert_circle_points(spec, xs + t) % 1.0
            for t in range(spec.degree)
        ]
        return np.concatenate(outs)
    outs = []
    ids = np.empty(xs.size, dtype=np.int64)
    for b in range(len(spec.branches)):
        ids.fill(b)
        x, ok = _maps.invert_interval_points(spec, ids, xs, img_tol=1e-12)
        outs.append(x[ok])
    return np.concatenate(outs)


def find_base_point(
    spec: MapSpec,
    delta1: float,
    depth_max: int = 12,
    grid: int = 64,
    *,
    p: Optional[float] = None,
    delta0: Optional[float] = None,
    min_depth: int = 0,
    eps_crit: float = EPS_CRIT,
) -> BaseDomain:
    """Scan grid candidates for a base point with a dense preimage tree.

    A candidate qualifies at depth N when the union of its preimages of
    depth <= N has coverage gap <= delta1/4 while every preimage stays
    eps_crit-clear of the critical set.  The first candidate achieving the
    minimal such N wins.  min_depth deepens N0 beyond the density depth
    (more connector levels) while keeping the avoidance requirement.
    """
    if not 0.0 < delta1 < 0.5:
        raise DomainError("delta1 must be in (0, 0.5)")
    d0 = delta1 / 20.0 if delta0 is None else float(delta0)
    circle = spec.is_circle
    cands = [float(p)] if p is not None else [(i + 0.5) / grid for i in range(grid)]
    best: Optional[tuple[int, float]] = None
    densest = (np.inf, float("nan"))
    for pc in cands:
        if circle:
            if not 2.0 * d0 <= pc <= 1.0 - 2.0 * d0:
                continue
        elif not (pc - 2.0 * d0 > 0.0 and pc + 2.0 * d0 < 1.0):
            continue
        if float(_maps.distance_to_crit(spec, pc)) < 2.0 * d0 + eps_crit:
            continue
        limit = depth_max if best is None else min(depth_max, best[0] - 1)
        pts = np.asarray([pc])
        union = [pts]
        n_found: Optional[int] = None
        tainted = False
        if _coverage_gap(pts, circle) <= delta1 / 4.0:
            n_found = 0
        m = 0
        while n_found is None and m < limit:
            m += 1
            pts = _preimage_points(spec, pts)
            if pts.size == 0 or float(np.min(_maps.distance_to_crit(spec, pts))) < eps_crit:
                tainted = True
                break
            union.append(pts)
            gap = _coverage_gap(np.concatenate(union), circle)
            if gap < densest[0]:
                densest = (gap, pc)
            if gap <= delta1 / 4.0:
                n_found = m
        if tainted or n_found is None:
            continue
        n0_depth = max(n_found, min_depth)
        while m < n0_depth:
            m += 1
            pts = _preimage_points(spec, pts)
            if pts.size == 0 or float(np.min(_maps.distance_to_crit(spec, pts))) < eps_crit:
                tainted = True
                break
        if tainted:
            continue
        if best is None or n_found < best[0]:
            best = (n_found, pc)
    if best is None:
        raise BaseSearchError(
            f"{spec.name}: no base point within depth {depth_max}; densest "
            f"gap achieved {densest[0]:.4g} at p={densest[1]:.6g} "
            f"(need <= {delta1 / 4.0:.4g})"
        )
    return BaseDomain(
        map_name=spec.name,
        p=best[1],
        delta0=d0,
        delta1=delta1,
        N0=max(best[0], min_depth),
    )


# ---------------------------------------------------------------------------
# connector tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConnectorEntry:
    """One diffeomorphic preimage V of Delta' at depth m.

    (vd_lo, vd_hi) is the sub-interval of V mapping onto Delta; min_deriv
    is the sampled minimum of |(f^m)'| over V.
    """

    lo: float
    hi: float
    vd_lo: float
    vd_hi: float
    m: int
    gid: int
    min_deriv: float

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class ConnectorTree:
    """All components of f^{-m}(Delta'), m = 0..depth, that map
    diffeomorphically onto Delta'.  Per-depth arrays are sorted by left
    endpoint; gid = offsets[m] + index is a stable global entry id."""

    base: BaseDomain
    circle: bool
    depth: int
    lo: tuple
    hi: tuple
    vd_lo: tuple
    vd_hi: tuple
    min_deriv: tuple
    offsets: np.ndarray
    K0: float
    D0: float
    forward_defect: float
    discarded: int

    @property
    def n_entries(self) -> int:
        return int(self.offsets[-1])

    def counts(self) -> np.ndarray:
        return np.asarray([a.size for a in self.lo], dtype=np.int64)

    def entry(self, m: int, idx: int) -> ConnectorEntry:
        return ConnectorEntry(
            lo=float(self.lo[m][idx]),
            hi=float(self.hi[m][idx]),
            vd_lo=float(self.vd_lo[m][idx]),
            vd_hi=float(self.vd_hi[m][idx]),
            m=m,
            gid=int(self.offsets[m]) + int(idx),
            min_deriv=float(self.min_deriv[m][idx]),
        )


def _point_set_distance(spec: MapSpec, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Distance from intervals [lo, hi] to the critical set (inf if none)."""
    if not spec.crit:
        return np.full(lo.shape, np.inf)
    d = np.full(lo.shape, np.inf)
    for c in spec.crit:
        dc = np.where(c < lo, lo - c, np.where(c > hi, c - hi, 0.0))
        d = np.minimum(d, dc)
    return d


def build_connector_tree(
    spec: MapSpec,
    base: BaseDomain,
    depth: Optional[int] = None,
    eps_crit: float = EPS_CRIT,
) -> ConnectorTree:
    """Breadth-first pullback of Delta' through all branches.

    Components that cross a branch boundary or come within eps_crit of the
    critical set are discarded (and counted); the survivors map onto Delta'
    diffeomorphically.  K0 and D0 are measured by forward-iterating three
    sample points per entry.
    """
    N0 = base.N0 if depth is None else int(depth)
    dp_lo, dp_hi = base.delta_prime
    d_lo, d_hi = base.delta
    circle = spec.is_circle
    if circle:
        t0 = float(spec.raw(0.0))
        if abs(t0 - round(t0)) > 1e-9:
            raise InducingError("circle lift must have integer value at 0")
        t0 = round(t0)
    levels = [
        (
            np.asarray([dp_lo]),
            np.asarray([dp_hi]),
            np.asarray([d_lo]),
            np.asarray([d_hi]),
        )
    ]
    discarded = 0
    for m in range(1, N0 + 1):
        plo, phi, pvl, pvh = levels[-1]
        outs = []
        if circle:
            for t in range(spec.degree):
                a = _maps.invert_circle_points(spec, plo + t0 + t) % 1.0
                b = _maps.invert_circle_points(spec, phi + t0 + t) % 1.0
                va = _maps.invert_circle_points(spec, pvl + t0 + t) % 1.0
                vb = _maps.invert_circle_points(spec, pvh + t0 + t) % 1.0
                outs.append((np.minimum(a, b), np.maximum(a, b),
                             np.minimum(va, vb), np.maximum(va, vb)))
        else:
            ids = np.empty(plo.size, dtype=np.int64)
            for bi, br in enumerate(spec.branches):
                il, ih = br.image
                contained = (plo >= il - 1e-12) & (phi <= ih + 1e-12)
                crossing = (phi > il + 1e-12) & (plo < ih - 1e-12) & ~contained
                discarded += int(crossing.sum())
                if not np.any(contained):
                    continue
                ids.fill(bi)
                sel = np.flatnonzero(contained)
                a, _ = _maps.invert_interval_points(spec, ids[sel], plo[sel])
                b, _ = _maps.invert_interval_points(spec, ids[sel], phi[sel])
                va, _ = _maps.invert_interval_points(spec, ids[sel], pvl[sel])
                vb, _ = _maps.invert_interval_points(spec, ids[sel], pvh[sel])
                outs.append((np.minimum(a, b), np.maximum(a, b),
                             np.minimum(va, vb), np.maximum(va, vb)))
        if not outs:
            levels.append((np.empty(0), np.empty(0), np.empty(0), np.empty(0)))
            continue
        clo = np.concatenate([o[0] for o in outs])
        chi = np.concatenate([o[1] for o in outs])
        cvl = np.concatenate([o[2] for o in outs])
        cvh = np.concatenate([o[3] for o in outs])
        near = _point_set_distance(spec, clo, chi) < eps_crit
        discarded += int(near.sum())
        keep = ~near
        order = np.argsort(clo[keep], kind="stable")
        levels.append((clo[keep][order], chi[keep][order],
                       cvl[keep][order], cvh[keep][order]))
    # sampled derivative statistics per entry
    K0 = 1.0
    D0 = 0.0
    fdef = 0.0
    min_deriv = []
    for m, (lo, hi, _, _) in enumerate(levels):
        if lo.size == 0:
            min_deriv.append(np.empty(0))
            continue
        cur = np.stack([lo, 0.5 * (lo + hi), hi])
        logp = np.zeros_like(cur)
        for _ in range(m):
            logp += np.log(spec.abs_deriv(cur))
            K0 = max(K0, float(np.exp(np.abs(logp).max())))
            cur = spec.eval(cur)
        if m > 0:
            D0 = max(D0, float((logp.max(axis=0) - logp.min(axis=0)).max()))
            ends = np.sort(cur[[0, 2]], axis=0)
            if circle:
                e0 = np.abs(ends[0] - dp_lo)
                e1 = np.abs(ends[1] - dp_hi)
                e0 = np.minimum(e0, 1.0 - e0)
                e1 = np.minimum(e1, 1.0 - e1)
            else:
                e0 = np.abs(ends[0] - dp_lo)
                e1 = np.abs(ends[1] - dp_hi)
            fdef = max(fdef, float(np.maximum(e0, e1).max()))
        min_deriv.append(np.exp(logp.min(axis=0)))
    counts = np.asarray([lvl[0].size for lvl in levels], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return ConnectorTree(
        base=base,
        circle=circle,
        depth=N0,
        lo=tuple(lvl[0] for lvl in levels),
        hi=tuple(lvl[1] for lvl in levels),
        vd_lo=tuple(lvl[2] for lvl in levels),
        vd_hi=tuple(lvl[3] for lvl in levels),
        min_deriv=tuple(min_deriv),
        offsets=offsets,
        K0=K0,
        D0=D0,
        forward_defect=fdef,
        discarded=discarded,
    )


def reach_delta(tree: ConnectorTree, ball) -> tuple[ConnectorEntry, int]:
    """Minimal-depth entry with closure(V) strictly inside the ball.

    The ball is an endpoint pair in cover coordinates for circle maps.
    Ties break to the leftmost entry.  Returns (entry, translate): the
    entry shifted by the integer translate lies inside the ball.
    """
    bl, bh = float(ball[0]), float(ball[1])
    if bh <= bl:
        raise DomainError("ball must have positive radius")
    ks = (int(math.floor(bl)), int(math.floor(bl)) + 1) if tree.circle else (0,)
    for m in range(tree.depth + 1):
        lo, hi = tree.lo[m], tree.hi[m]
        if lo.size == 0:
            continue
        hits = []
        for k in ks:
            j0 = int(np.searchsorted(lo, bl - k, side="right"))
            j1 = int(np.searchsorted(hi, bh - k, side="left"))
            if j1 > j0:
                hits.append((float(lo[j0] + k), j0, k))
        if hits:
            hits.sort()
            _, idx, k = hits[0]
            return tree.entry(m, idx), k
    raise CoverageError(
        f"no connector entry of depth <= {tree.depth} inside "
        f"({bl:.6g}, {bh:.6g}); preimage density insufficient"
    )


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    """A candidate U^x_{n,m} together with its provenance."""

    u_lo: float
    u_hi: float
    center: float
    n: int
    m: int
    R: int
    translate: int
    entry_gid: int
    min_deriv: float
    forward_defect: float
    levels: tuple = ()


def _forward_stats(spec: MapSpec, lo: float, hi: float, R: int, base: BaseDomain):
    """Re-iterate U's endpoints R steps: defect against Delta's endpoints
    plus the sampled minimum of |(f^R)'| over three points."""
    cur = np.asarray([lo, 0.5 * (lo + hi), hi], dtype=float)
    cur = cur % 1.0 if spec.is_circle else np.clip(cur, 0.0, 1.0)
    prod = np.ones(3)
    for _ in range(R):
        prod *= spec.abs_deriv(cur)
        cur = _maps.step_points(spec, cur)
    d_lo, d_hi = base.delta
    a, b = float(cur[0]), float(cur[2])

    def dist(u, v):
        e = abs(u - v)
        return min(e, 1.0 - e) if spec.is_circle else e

    fdef = min(
        max(dist(a, d_lo), dist(b, d_hi)),
        max(dist(a, d_hi), dist(b, d_lo)),
    )
    return float(fdef), float(prod.min())


def candidate_set(
    spec: MapSpec,
    preball: PreBall,
    tree: ConnectorTree,
    orbit: Optional[_maps.OrbitBuffer] = None,
) -> Candidate:
    """U^x_{n,m}: pull Delta back through the minimal-depth connector entry
    inside the pre-ball's image ball, then through the pre-ball's branch
    history.  Pass the orbit the pre-ball was built from when it was
    dithered; otherwise the plain orbit of the center is re-iterated."""
    n = preball.n
    if orbit is not None:
        anchors = np.asarray(orbit.points[: n + 1], dtype=float)
    else:
        pts, _ = _maps.iterate_ensemble(spec, np.asarray([preball.center]), n)
        anchors = pts[:, 0]
    entry, k = reach_delta(tree, preball.image_ball)
    los, his, ok, _ = _hyp.pullback_chain(
        spec,
        anchors[:, None],
        np.asarray([entry.vd_lo + k]),
        np.asarray([entry.vd_hi + k]),
    )
    if not ok[0]:
        raise _hyp.PullbackError("candidate target left the branch image")
    u_lo, u_hi = float(los[0, 0]), float(his[0, 0])
    R = n + entry.m
    fdef, mind = _forward_stats(spec, u_lo, u_hi, R, tree.base)
    return Candidate(
        u_lo=u_lo,
        u_hi=u_hi,
        center=float(anchors[0]),
        n=n,
        m=entry.m,
        R=R,
        translate=k,
        entry_gid=entry.gid,
        min_deriv=mind,
        forward_defect=fdef,
        levels=tuple((float(a), float(b)) for a, b in zip(los[:, 0], his[:, 0])),
    )


# ---------------------------------------------------------------------------
# partition state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionElement:
    """A return branch: f^R maps (u_lo, u_hi) onto Delta bijectively."""

    index: int
    u_lo: float
    u_hi: float
    center: float
    n: int
    m: int
    R: int
    translate: int
    entry_gid: int
    min_deriv: float
    forward_defect: float
    preball: PreBall
    levels: tuple = ()

    @property
    def length(self) -> float:
        return self.u_hi - self.u_lo


@dataclass(frozen=True)
class LedgerRow:
    """Satellite bookkeeping for one step.

    centers/v_lo/v_hi hold the pre-ball rows of every center that survived
    detection and contraction at this step; per_element pairs
    (element index, measure of S_n(U)); n_elements counts the elements
    selected at this step only."""

    n: int
    measure: float
    complement_measure: float
    per_element: tuple
    leftover_measure: float
    n_elements: int
    n_centers: int
    satellite: Optional[IntervalSet]
    centers: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray


@dataclass
class SatelliteLedger:
    rows: list = field(default_factory=list)

    def measures(self) -> np.ndarray:
        return np.asarray([r.measure for r in self.rows])

    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.measures()) if self.rows else np.empty(0)

    def row(self, n: int) -> LedgerRow:
        for r in self.rows:
            if r.n == n:
                return r
        raise KeyError(f"no ledger row for step {n}")


@dataclass
class InducedPartition:
    """Evolving construction state; also the final result object."""

    base: BaseDomain
    map_name: str
    params: HyperbolicParams
    n0: int
    n_max: int
    grid: int
    grid_spacing: float
    elements: list = field(default_factory=list)
    ledger: SatelliteLedger = field(default_factory=SatelliteLedger)
    leftover: list = field(default_factory=list)
    leftover_sets: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    engine: object = field(default=None, repr=False, compare=False)

    def leftover_measure(self) -> float:
        return self.leftover[-1][1] if self.leftover else self.base.measure()

    def leftover_fraction(self) -> float:
        return self.leftover_measure() / self.base.measure()

    def element_set(self) -> IntervalSet:
        if not self.elements:
            return IntervalSet.empty()
        return IntervalSet.from_pairs([(e.u_lo, e.u_hi) for e in self.elements])

    def exact_leftover_set(self) -> IntervalSet:
        """Delta minus the selected elements as an exact interval set (the
        grid leftover is an upper estimate of its measure)."""
        return self.base.delta_set().subtract(self.element_set())

    def elements_sorted(self) -> list:
        return sorted(self.elements, key=lambda e: (e.u_lo, e.m, e.center))

    def return_times(self) -> np.ndarray:
        return np.asarray([e.R for e in self.elements], dtype=np.int64)

    def to_dict(self) -> dict:
        rows = [
            {
                "n": r.n,
                "satellite_measure": r.measure,
                "complement_measure": r.complement_measure,
                "leftover_measure": r.leftover_measure,
                "elements": r.n_elements,
                "centers": r.n_centers,
            }
            for r in self.ledger.rows
        ]
        final = None
        if self.leftover_sets and (not self.ledger.rows or len(self.leftover_sets) > 1):
            final = self.leftover_sets[-1]
        return {
            "map": self.map_name,
            "base": {
                "p": self.base.p,
                "delta0": self.base.delta0,
                "delta1": self.base.delta1,
                "N0": self.base.N0,
            },
            "params": {
                "sigma": self.params.sigma,
                "delta": self.params.delta,
                "b": self.params.b,
                "index_convention": self.params.index_convention,
            },
            "n0": self.n0,
            "n_max": self.n_max,
            "grid": self.grid,
            "grid_spacing": self.grid_spacing,
            "elements": [
                {
                    "U": [e.u_lo, e.u_hi],
                    "n": e.n,
                    "m": e.m,
                    "R": e.R,
                    "center": e.center,
                }
                for e in self.elements_sorted()
            ],
            "ledger": rows,
            "leftover": {
                "steps": [[n, v] for n, v in self.leftover],
                "final_measure": self.leftover_measure(),
                "final_pairs": [] if final is None else [list(p) for p in final.pairs()],
            },
            "meta": self.meta,
        }


def write_partition_json(part: InducedPartition, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(part.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_ledger_csv(part: InducedPartition, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("n,satellite_measure,leftover_measure,elements,centers\n")
        for r in part.ledger.rows:
            fh.write(
                f"{r.n},{r.measure:.17g},{r.leftover_measure:.17g},"
                f"{r.n_elements},{r.n_centers}\n"
            )



# ---------------------------------------------------------------------------
# step engine
# ---------------------------------------------------------------------------


class _Engine:
    """Precomputed grid data plus the per-step state machine.

    Delta is split into `grid` equal cells with one candidate center per
    cell; the grid sets the candidate supply, not the partition geometry.
    Each hyperbolic center aims at the largest unpartitioned arc of its
    pre-ball and offers the connector entries inside the arc's forward
    image, CAP_PER_DEPTH per depth within the width cap.  Selection
    follows the maximal-disjoint-family rule: a candidate is eligible
    when its interval misses every already selected element, and a
    blocked candidate attributes its pre-ball remainder to the satellites
    of the elements it overlaps.  Element intervals, leftover measures,
    and satellite sets are exact interval data; the claimed-cell arrays
    (alive/killer) are kept as grid-resolution diagnostics."""

    def __init__(self, spec, base, params, tree, n_max, grid, keep_sets,
                 forward_slack=0.0):
        self.spec = spec
        self.base = base
        self.params = params
        self.tree = tree
        self.n_max = n_max
        self.keep_sets = keep_sets
        self.forward_slack = forward_slack
        self.delta_set = base.delta_set()
        self.d_lo, self.d_hi = base.delta
        self.grid_spacing = base.measure() / grid
        self.edges = self.d_lo + np.arange(grid + 1) * self.grid_spacing
        self.grid_points = 0.5 * (self.edges[:-1] + self.edges[1:])
        self.alive = np.ones(grid, dtype=bool)
        self.killer = np.full(grid, -1, dtype=np.int64)
        pts, br = _maps.iterate_ensemble(
            spec, self.grid_points, n_max, rng=None, track_branches=True
        )
        self.pts = pts
        lid, ltd = _maps.orbit_log_arrays(spec, pts, params.delta)
        self.hyp = _hyp.detect_matrix(lid.T, ltd.T, params)
        nb = max(spec.degree, len(spec.branches)) + 1
        cells = np.zeros((n_max + 1, self.grid_points.size), dtype=np.int64)
        for j in range(n_max):
            _, inv = np.unique(cells[j] * nb + br[j], return_inverse=True)
            cells[j + 1] = inv
        self.cells = cells
        self.vd_lo_flat = np.concatenate(tree.vd_lo)
        self.vd_hi_flat = np.concatenate(tree.vd_hi)
        self.min_deriv_flat = np.concatenate(tree.min_deriv)
        self.emid_flat = 0.5 * (
            np.concatenate(tree.lo) + np.concatenate(tree.hi)
        )
        # elements narrower than measure(Delta) * 2^-FLOAT_R_CAP amplify
        # endpoint rounding past EPS_FORWARD under re-iteration, so they
        # could never be certified; reject them at the supply stage
        self.width_floor = base.measure() * 2.0 ** -FLOAT_R_CAP
        self.m_of_gid = np.repeat(
            np.arange(tree.depth + 1, dtype=np.int64), tree.counts()
        )

    def _alive_set(self) -> IntervalSet:
        a = self.alive
        if not a.any():
            return IntervalSet.empty()
        d = np.diff(np.r_[0, a.astype(np.int8), 0])
        s = np.flatnonzero(d == 1)
        e = np.flatnonzero(d == -1)
        return IntervalSet.from_pairs(
            [(float(self.edges[i]), float(self.edges[j])) for i, j in zip(s, e)]
        )

    # -- chains ---------------------------------------------------------

    def _ball_chains(self, n: int, cols: np.ndarray):
        """Pre-ball components V_n for the given centers: level-by-level
        pullback of B(f^n x, delta1), clipping at branch images (component
        semantics) and enforcing the sigma^{k/2} contraction diagnostic.
        Interval-map balls are clipped to the phase space first."""
        spec = self.spec
        d1 = self.base.delta1
        y = self.pts[n, cols]
        if spec.is_circle:
            cur_lo = y - d1
            cur_hi = y + d1
        else:
            cur_lo = np.maximum(y - d1, 0.0)
            cur_hi = np.minimum(y + d1, 1.0)
        shrink = np.ones(cols.size, dtype=bool)
        bound0 = 2.0 * d1 * (1.0 + 1e-9)
        sig = self.params.sigma
        for j in range(n - 1, -1, -1):
            anc = self.pts[j, cols]
            if spec.is_circle:
                t = np.rint(spec.raw(anc) - self.pts[j + 1, cols])
                cur_lo = _maps.invert_circle_points(spec, cur_lo + t)
                cur_hi = _maps.invert_circle_points(spec, cur_hi + t)
            else:
                b = spec.branch_of(anc)
                a1, _ = _maps.invert_interval_points(spec, b, cur_lo, img_tol=np.inf)
                a2, _ = _maps.invert_interval_points(spec, b, cur_hi, img_tol=np.inf)
                cur_lo = np.minimum(a1, a2)
                cur_hi = np.maximum(a1, a2)
            shrink &= (cur_hi - cur_lo) <= bound0 * sig ** (0.5 * (n - j))
        return cur_lo, cur_hi, shrink

    def _m_cap(self, n: int) -> int:
        """Deepest connector level whose candidate widths remain
        representable in double precision at return time n + m."""
        return min(self.tree.depth, R_STORE_CAP - n)

    def _largest_arcs(self, cols, v_lo, v_hi, sel_lo, sel_hi):
        """Largest unpartitioned arc inside each center's pre-ball clipped
        to Delta, leftmost on ties.  Returns (arc_lo, arc_hi, active)."""
        A = cols.size
        bl = np.maximum(v_lo, self.d_lo)
        bh = np.minimum(v_hi, self.d_hi)
        gap_lo = np.r_[self.d_lo, sel_hi]
        gap_hi = np.r_[sel_lo, self.d_hi]
        wide = gap_hi - gap_lo > EPS_GEOM
        gap_lo, gap_hi = gap_lo[wide], gap_hi[wide]
        G = gap_lo.size
        if G == 0:
            z = np.zeros(A)
            return z, z, np.zeros(A, dtype=bool)
        wid = gap_hi - gap_lo
        gi0 = np.searchsorted(gap_hi, bl, side="right")
        gi1 = np.searchsorted(gap_lo, bh, side="left") - 1
        active = gi1 >= gi0
        c0 = np.clip(gi0, 0, G - 1)
        c1 = np.clip(gi1, 0, G - 1)
        w0 = np.minimum(gap_hi[c0], bh) - np.maximum(gap_lo[c0], bl)
        w1 = np.minimum(gap_hi[c1], bh) - np.maximum(gap_lo[c1], bl)
        best = c0.copy()
        bw = w0.copy()
        # interior gaps lie fully inside the ball; range-argmax via a
        # sparse table keeping the leftmost maximum
        il, ir = gi0 + 1, gi1 - 1
        has_int = active & (ir >= il)
        if np.any(has_int):
            tabs = [np.arange(G)]
            while (1 << len(tabs)) <= G:
                p = tabs[-1]
                h = 1 << (len(tabs) - 1)
                a = p[: G - 2 * h + 1]
                b = p[h: h + G - 2 * h + 1]
                tabs.append(np.where(wid[a] >= wid[b], a, b))
            span = np.where(has_int, ir - il + 1, 1)
            lev = np.frexp(span.astype(float))[1] - 1
            ib = np.zeros(A, dtype=np.int64)
            for k in np.unique(lev[has_int]):
                rows = np.flatnonzero(has_int & (lev == k))
                t = tabs[int(k)]
                a = t[il[rows]]
                b = t[ir[rows] - (1 << int(k)) + 1]
                ib[rows] = np.where(wid[a] >= wid[b], a, b)
            iw = np.where(has_int, wid[np.clip(ib, 0, G - 1)], -1.0)
            upgrade = has_int & (iw > bw)
            best = np.where(upgrade, ib, best)
            bw = np.where(upgrade, iw, bw)
        tail = active & (c1 > c0) & (w1 > bw)
        best = np.where(tail, c1, best)
        arc_lo = np.maximum(gap_lo[np.clip(best, 0, G - 1)], bl)
        arc_hi = np.minimum(gap_hi[np.clip(best, 0, G - 1)], bh)
        active &= arc_hi - arc_lo > EPS_GEOM
        return arc_lo, arc_hi, active

    def _forward_arc(self, n: int, cols, arc_lo, arc_hi):
        """Image of each arc under f^n in extended precision (the arc sits
        inside V_n(x), so plain iteration follows the branch history).
        Returns image start and length; orientation-reversing interval
        histories are re-sorted, circle branches always preserve order."""
        spec = self.spec
        a = arc_lo.astype(np.longdouble)
        b = arc_hi.astype(np.longdouble)
        for _ in range(n):
            a = spec.raw(a)
            b = spec.raw(b)
            if spec.is_circle:
                a -= np.floor(a)
                b -= np.floor(b)
            else:
                a = np.clip(a, 0.0, 1.0)
                b = np.clip(b, 0.0, 1.0)
        a64 = a.astype(float)
        b64 = b.astype(float)
        if spec.is_circle:
            return a64, np.mod(b64 - a64, 1.0)
        lo = np.minimum(a64, b64)
        return lo, np.maximum(a64, b64) - lo

    def _entry_fan(self, n: int, cols: np.ndarray, v_lo, v_hi,
                   sel_lo, sel_hi):
        """Candidates aimed at the unpartitioned region: each center offers
        the connector entries inside the f^n-image of the largest free arc
        of its pre-ball, up to CAP_PER_DEPTH entries per depth from the
        arc's left edge, over all depths with representable widths.
        Returns parallel arrays (center row, entry gid, lift translate)."""
        tree = self.tree
        empty = np.empty(0, dtype=np.int64)
        m_cap = self._m_cap(n)
        if m_cap < 0 or cols.size == 0:
            return empty, empty, empty
        arc_lo, arc_hi, active = self._largest_arcs(
            cols, v_lo, v_hi, sel_lo, sel_hi
        )
        rows = np.flatnonzero(active)
        if rows.size == 0:
            return empty, empty, empty
        img_a, img_len = self._forward_arc(
            n, cols[rows], arc_lo[rows], arc_hi[rows]
        )
        img_b = img_a + img_len
        out_r: list = []
        out_g: list = []
        # entries at distinct depths are pairwise disjoint, so offering a
        # band of depths tiles the arc image; the band is anchored at the
        # shallowest depth with an entry inside to keep widths commensurate
        first_m = np.full(rows.size, -1, dtype=np.int64)
        for m in range(m_cap + 1):
            elo, ehi = tree.lo[m], tree.hi[m]
            if elo.size == 0:
                continue
            s1 = np.searchsorted(elo, img_a, side="right")
            e1 = np.searchsorted(ehi, np.minimum(img_b, 1.0), side="left")
            c1 = np.clip(e1 - s1, 0, CAP_PER_DEPTH)
            if tree.circle:
                wrapped = img_b > 1.0
                e2 = np.searchsorted(ehi, img_b - 1.0, side="left")
                c2 = np.where(wrapped, np.minimum(e2, CAP_PER_DEPTH - c1), 0)
                c2 = np.maximum(c2, 0)
            else:
                c2 = np.zeros_like(c1)
            any_hit = c1 + c2 > 0
            first_m = np.where((first_m < 0) & any_hit, m, first_m)
            live = (first_m >= 0) & (m < first_m + DEPTH_SPREAD)
            c1 = np.where(live, c1, 0)
            c2 = np.where(live, c2, 0)
            fr = np.r_[np.repeat(rows, c1), np.repeat(rows, c2)]
            fj = np.r_[_ragged_arange(s1, c1),
                       _ragged_arange(np.zeros_like(c2), c2)]
            if fr.size == 0:
                continue
            out_r.append(fr)
            out_g.append(tree.offsets[m] + fj)
        if not out_r:
            return empty, empty, empty
        crow = np.concatenate(out_r)
        cgid = np.concatenate(out_g)
        # supply filter: skip entries whose candidate width estimate (entry
        # pullback width scaled by the pre-ball contraction) is hopelessly
        # below the width floor; survivors are still measured exactly
        est = (self.vd_hi_flat[cgid] - self.vd_lo_flat[cgid]) \
            * ((v_hi - v_lo)[crow] / min(2.0 * self.base.delta1, 1.0))
        keep = est >= 0.25 * self.width_floor
        crow, cgid = crow[keep], cgid[keep]
        if crow.size == 0:
            return empty, empty, empty
        if tree.circle:
            ck = np.rint(
                self.pts[n, cols[crow]] - self.emid_flat[cgid]
            ).astype(np.int64)
        else:
            ck = np.zeros(crow.size, dtype=np.int64)
        return crow, cgid, ck

    def _candidate_chains(self, n: int, ccols: np.ndarray, tlo: np.ndarray,
                          thi: np.ndarray):
        """Pull level-n targets back through the centers' branch histories,
        accumulating a per-level lower bound on |f'| for the expansion
        estimate.  Targets must stay inside branch images (no clipping)."""
        spec = self.spec
        cur_lo = tlo.astype(float).copy()
        cur_hi = thi.astype(float).copy()
        ok = np.ones(ccols.size, dtype=bool)
        min_prod = np.ones(ccols.size)
        for j in range(n - 1, -1, -1):
            anc = self.pts[j, ccols]
            if spec.is_circle:
                t = np.rint(spec.raw(anc) - self.pts[j + 1, ccols])
                cur_lo = _maps.invert_circle_points(spec, cur_lo + t)
                cur_hi = _maps.invert_circle_points(spec, cur_hi + t)
            else:
                b = spec.branch_of(anc)
                a1, ok1 = _maps.invert_interval_points(spec, b, cur_lo)
                a2, ok2 = _maps.invert_interval_points(spec, b, cur_hi)
                ok &= ok1 & ok2
                cur_lo = np.minimum(a1, a2)
                cur_hi = np.maximum(a1, a2)
            dmin = np.minimum(
                np.minimum(spec.abs_deriv(cur_lo), spec.abs_deriv(cur_hi)),
                spec.abs_deriv(0.5 * (cur_lo + cur_hi)),
            )
            min_prod *= dmin
        return cur_lo, cur_hi, ok, min_prod

    def _forward_defects(self, lo: np.ndarray, hi: np.ndarray,
                         R: np.ndarray) -> np.ndarray:
        """Re-iterate candidate endpoints R_i steps each and measure the
        mismatch against Delta's endpoints."""
        spec = self.spec
        cur = np.stack([lo, hi])
        cur = cur % 1.0 if spec.is_circle else np.clip(cur, 0.0, 1.0)
        out = cur.copy()
        for t in range(1, int(R.max()) + 1 if R.size else 0):
            cur = _maps.step_points(spec, cur)
            done = R == t
            if np.any(done):
                out[0] = np.where(done, cur[0], out[0])
                out[1] = np.where(done, cur[1], out[1])
        d_lo, d_hi = self.base.delta
        a = np.minimum(out[0], out[1])
        b = np.maximum(out[0], out[1])

        def dist(u, v):
            e = np.abs(u - v)
            return np.minimum(e, 1.0 - e) if spec.is_circle else e

        return np.minimum(
            np.maximum(dist(a, d_lo), dist(b, d_hi)),
            np.maximum(dist(a, d_hi), dist(b, d_lo)),
        )

    # -- the step ---------------------------------------------------------

    def _cell_span(self, lo: np.ndarray, hi: np.ndarray):
        """Index range of cells meeting (lo, hi) in more than a boundary
        point; the pad never eats more than a quarter of the interval."""
        pad = np.minimum(EPS_GEOM, 0.25 * (hi - lo))
        i0 = np.searchsorted(self.edges, lo + pad, side="right") - 1
        i1 = np.searchsorted(self.edges, hi - pad, side="right") - 1
        G = self.alive.size
        return np.clip(i0, 0, G - 1), np.clip(i1, 0, G - 1)

    def _selected_arrays(self, state):
        """Selected elements as (lo, hi, index) sorted by left endpoint.
        Disjointness makes both endpoint arrays sorted."""
        if not state.elements:
            z = np.empty(0)
            return z, z, np.empty(0, dtype=np.int64)
        lo = np.asarray([e.u_lo for e in state.elements])
        hi = np.asarray([e.u_hi for e in state.elements])
        idx = np.asarray([e.index for e in state.elements], dtype=np.int64)
        order = np.argsort(lo, kind="stable")
        return lo[order], hi[order], idx[order]

    _STAT_KEYS = (
        "hyperbolic", "contraction_dropped", "no_entry", "unique",
        "chain_failed", "width_dropped", "weak_expansion", "blocked",
        "eligible", "forward_dropped", "depth_shadowed",
    )

    def _finish_step(self, state, n, stats, cols, v_lo, v_hi, new_elems,
                     per_element, s_n, comp_measure):
        for k in self._STAT_KEYS:
            stats.setdefault(k, 0)
        covered = float(sum(e.u_hi - e.u_lo for e in state.elements))
        left = max(0.0, self.base.measure() - covered)
        if self.keep_sets:
            state.leftover_sets.append(
                self.delta_set.subtract(state.element_set())
            )
        state.leftover.append((n, left))
        state.ledger.rows.append(
            LedgerRow(
                n=n,
                measure=s_n.measure(),
                complement_measure=comp_measure,
                per_element=tuple(per_element),
                leftover_measure=left,
                n_elements=len(new_elems),
                n_centers=int(cols.size),
                satellite=s_n if self.keep_sets else None,
                centers=cols,
                v_lo=v_lo,
                v_hi=v_hi,
            )
        )
        stats["selected"] = len(new_elems)
        stats["elements_total"] = len(state.elements)
        stats["leftover"] = left
        stats["leftover_cells"] = float(self.alive.sum()) * self.grid_spacing
        stats["satellite"] = s_n.measure()
        state.meta.setdefault("steps", []).append(stats)
        return state

    def step(self, state: InducedPartition, n: int,
             cols: Optional[np.ndarray] = None) -> InducedPartition:
        spec = self.spec
        G = self.grid_points.size
        stats: dict = {"n": n}
        empty = np.empty(0, dtype=np.int64)
        if cols is None:
            mask = self.hyp[:, n].copy()
        else:
            mask = np.zeros(G, dtype=bool)
            mask[np.asarray(cols, dtype=np.int64)] = True
            mask &= self.hyp[:, n]
        cols = np.flatnonzero(mask)
        stats["hyperbolic"] = int(cols.size)
        if cols.size == 0:
            return self._finish_step(state, n, stats, empty, np.empty(0),
                                     np.empty(0), [], [], IntervalSet.empty(),
                                     0.0)
        v_lo, v_hi, shrink = self._ball_chains(n, cols)
        stats["contraction_dropped"] = int(np.sum(~shrink))
        cols, v_lo, v_hi = cols[shrink], v_lo[shrink], v_hi[shrink]
        if cols.size == 0:
            return self._finish_step(state, n, stats, empty, np.empty(0),
                                     np.empty(0), [], [], IntervalSet.empty(),
                                     0.0)
        sel_lo, sel_hi, sel_map = self._selected_arrays(state)
        crow, cgid, ck = self._entry_fan(n, cols, v_lo, v_hi, sel_lo, sel_hi)
        if crow.size:
            stats["no_entry"] = int(cols.size - np.unique(crow).size)
        else:
            stats["no_entry"] = int(cols.size)
            return self._finish_step(state, n, stats, cols, v_lo, v_hi, [],
                                     [], IntervalSet.empty(), 0.0)
        # same-branch centers produce identical pullbacks of the same
        # (entry, translate); keep the first fan occurrence of each
        total_g = np.int64(self.m_of_gid.size)
        key = (self.cells[n, cols[crow]] * total_g + cgid) * 3 + (ck + 1)
        korder = np.argsort(key, kind="stable")
        ks = key[korder]
        first = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
        keep = np.sort(korder[first])
        crow, cgid, ck = crow[keep], cgid[keep], ck[keep]
        cm = self.m_of_gid[cgid]
        C = crow.size
        stats["unique"] = int(C)
        tlo = self.vd_lo_flat[cgid] + ck
        thi = self.vd_hi_flat[cgid] + ck
        u_lo, u_hi, cok, chain_min = self._candidate_chains(
            n, cols[crow], tlo, thi
        )
        tot_min = chain_min * self.min_deriv_flat[cgid]
        ok = cok & np.isfinite(u_lo) & np.isfinite(u_hi) & (u_hi > u_lo)
        stats["chain_failed"] = int(np.sum(~ok))
        # elements below the width floor would shred their surroundings
        # into slivers no pre-ball can reach by the time they ripen; the
        # floor keeps every residual gap serveable at a later step
        wide = u_hi - u_lo >= self.width_floor
        stats["width_dropped"] = int(np.sum(ok & ~wide))
        ok &= wide
        weak = ok & ~(tot_min > 1.0)
        stats["weak_expansion"] = int(np.sum(weak))
        ok &= ~weak
        pokes = (u_lo < self.d_lo - EPS_GEOM) | (u_hi > self.d_hi + EPS_GEOM)
        # maximal-disjoint-family rule: a candidate joins the pool only if
        # it misses every previously selected element (EPS_GEOM slack)
        if sel_lo.size:
            kl = np.searchsorted(sel_lo, u_lo, side="right") - 1
            klc = np.clip(kl, 0, sel_lo.size - 1)
            has_l = (kl >= 0) & (sel_hi[klc] > u_lo + EPS_GEOM)
            kr = np.clip(kl + 1, 0, sel_lo.size - 1)
            has_r = (kl + 1 < sel_lo.size) & (sel_lo[kr] < u_hi - EPS_GEOM)
            overlap = has_l | has_r
        else:
            overlap = np.zeros(C, dtype=bool)
        blocked = ok & ~pokes & overlap
        stats["blocked"] = int(np.sum(blocked))
        eligible = ok & ~pokes & ~overlap
        stats["eligible"] = int(eligible.sum())
        # forward verification gates selection; re-iteration amplifies the
        # endpoint storage error by |(f^R)'| ~ measure(Delta)/|U|, so the
        # certificate tolerance carries that factor for deep candidates
        fd_all = np.full(C, np.inf)
        elig_idx = np.flatnonzero(eligible)
        if elig_idx.size:
            fd_all[elig_idx] = self._forward_defects(
                u_lo[elig_idx], u_hi[elig_idx], n + cm[elig_idx]
            )
        amp = self.base.measure() / np.maximum(u_hi - u_lo, 1e-300)
        ftol = np.maximum(EPS_FORWARD, self.forward_slack * amp)
        okf = eligible & (fd_all <= ftol)
        stats["forward_dropped"] = int(np.sum(eligible & ~okf))
        pool = np.flatnonzero(okf)
        # depth shadowing: a deep candidate overlapping a shallower pool
        # mate would only splinter the family (its earlier left endpoint
        # wins the sweep and blocks the wide one), so the supply withholds
        # it; intersection counts work on independently sorted endpoints
        if pool.size:
            sh_lo = np.empty(0)
            sh_hi = np.empty(0)
            kept: list = []
            pm = cm[pool]
            for mm in np.unique(pm):
                grp = pool[pm == mm]
                if sh_lo.size:
                    cnt = np.searchsorted(
                        sh_lo, u_hi[grp] - EPS_GEOM, side="left"
                    ) - np.searchsorted(
                        sh_hi, u_lo[grp] + EPS_GEOM, side="right"
                    )
                    grp = grp[cnt <= 0]
                if grp.size:
                    kept.append(grp)
                    sh_lo = np.sort(np.r_[sh_lo, u_lo[grp]])
                    sh_hi = np.sort(np.r_[sh_hi, u_hi[grp]])
            pool = np.concatenate(kept) if kept else pool[:0]
        stats["depth_shadowed"] = int(okf.sum() - pool.size)
        order = pool[np.lexsort((cols[crow[pool]], cm[pool], u_lo[pool]))]
        chosen = []
        last_hi = -np.inf
        for i in order:
            # touching is allowed; overlap beyond EPS_GEOM is not
            if u_lo[i] >= last_hi - EPS_GEOM:
                chosen.append(int(i))
                last_hi = u_hi[i]
        new_elems = []
        own_idx = np.full(C, -1, dtype=np.int64)
        d1 = self.base.delta1
        for i in chosen:
            r = int(crow[i])
            col = int(cols[r])
            x = float(self.pts[0, col])
            yb = float(self.pts[n, col])
            a, b = float(v_lo[r]), float(v_hi[r])
            idx = len(state.elements)
            own_idx[i] = idx
            elem = PartitionElement(
                index=idx,
                u_lo=float(u_lo[i]),
                u_hi=float(u_hi[i]),
                center=x,
                n=n,
                m=int(cm[i]),
                R=n + int(cm[i]),
                translate=int(ck[i]),
                entry_gid=int(cgid[i]),
                min_deriv=float(tot_min[i]),
                forward_defect=float(fd_all[i]),
                preball=PreBall(
                    center=x,
                    n=n,
                    v_n=(a, b),
                    image_ball=(yb - d1, yb + d1),
                    inner_radius=min(x - a, b - x),
                    levels=(),
                ),
            )
            state.elements.append(elem)
            new_elems.append(elem)
            j0, j1 = self._cell_span(np.asarray([elem.u_lo]),
                                     np.asarray([elem.u_hi]))
            sub = np.flatnonzero(self.alive[j0[0]:j1[0] + 1])
            self.killer[j0[0] + sub] = idx
            self.alive[j0[0]:j1[0] + 1] = False
        # ---- satellite bookkeeping ------------------------------------
        # a selected candidate leaves its own ball remainder V_n(x) \ U in
        # its satellite; every other surviving candidate overlaps one or
        # more selected elements (that is the only way to lose the sweep),
        # and its pre-ball remainder joins each overlapped element's S_n(U)
        sel_lo, sel_hi, sel_map = self._selected_arrays(state)
        pe_parts: list = []
        pq_parts: list = []
        surv = np.flatnonzero(ok & ~pokes)
        own_q = surv[own_idx[surv] >= 0]
        if own_q.size:
            pe_parts.append(own_idx[own_q])
            pq_parts.append(own_q)
        bl_q = surv[own_idx[surv] < 0]
        if bl_q.size and sel_lo.size:
            j0 = np.searchsorted(sel_hi, u_lo[bl_q] + EPS_GEOM, side="right")
            j1 = np.searchsorted(sel_lo, u_hi[bl_q] - EPS_GEOM, side="left") - 1
            cnt = np.maximum(0, j1 - j0 + 1)
            keep = cnt > 0
            cntk = cnt[keep]
            total = int(cntk.sum())
            ar = np.arange(total) - np.repeat(np.cumsum(cntk) - cntk, cntk)
            pe_parts.append(sel_map[np.repeat(j0[keep], cntk) + ar])
            pq_parts.append(np.repeat(bl_q[keep], cntk))

        def clipped_ball_pairs(rows):
            a = np.maximum(v_lo[rows], self.d_lo)
            b = np.minimum(v_hi[rows], self.d_hi)
            keep = b > a
            return list(zip(a[keep], b[keep]))

        per_element: list = []
        sat_parts: list = []
        if pe_parts:
            pe = np.concatenate(pe_parts)
            rows = crow[np.concatenate(pq_parts)]
            packed = np.unique(pe * np.int64(cols.size) + rows)
            eidx, rows = packed // cols.size, packed % cols.size
            bounds = np.flatnonzero(np.r_[True, eidx[1:] != eidx[:-1]])
            bounds = np.r_[bounds, eidx.size]
            for bi in range(bounds.size - 1):
                sl = slice(bounds[bi], bounds[bi + 1])
                e = state.elements[int(eidx[bounds[bi]])]
                prs = clipped_ball_pairs(rows[sl])
                if not prs:
                    continue
                vset = IntervalSet.from_pairs(prs).subtract(
                    IntervalSet.from_pairs([(e.u_lo, e.u_hi)])
                )
                if not vset.is_empty():
                    per_element.append((e.index, vset.measure()))
                    sat_parts.append(vset)
        comp_measure = 0.0
        out_q = np.flatnonzero(ok & pokes)
        if out_q.size:
            prs = clipped_ball_pairs(np.unique(crow[out_q]))
            if prs:
                cset = IntervalSet.from_pairs(prs)
                comp_measure = cset.measure()
                sat_parts.append(cset)
        if sat_parts:
            allp = [p for s in sat_parts for p in s.pairs()]
            s_n = IntervalSet.from_pairs(allp)
        else:
            s_n = IntervalSet.empty()
        return self._finish_step(state, n, stats, cols, v_lo, v_hi,
                                 new_elems, per_element, s_n, comp_measure)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def suggest_n0(tree: ConnectorTree, params: HyperbolicParams,
               safety: float = 0.5) -> int:
    """Smallest n with K0 * sigma^{(n - N0)/2} <= safety (conservative; the
    per-element expansion guard enforces kappa < 1 regardless)."""
    k0 = max(tree.K0, 1.0)
    need = 2.0 * math.log(k0 / safety) / (-math.log(params.sigma))
    return tree.base.N0 + max(1, int(math.ceil(need)))


def new_state(
    spec: MapSpec,
    base: BaseDomain,
    params: HyperbolicParams,
    n0: int,
    n_max: int = 60,
    grid: int = DEFAULT_GRID,
    *,
    tree: Optional[ConnectorTree] = None,
    keep_sets: bool = True,
    forward_slack: float = FWD_ULP,
) -> InducedPartition:
    """Fresh construction state with the grid engine attached.

    forward_slack (in units of measure(Delta)/|U|) sets the forward
    certificate tolerance to max(EPS_FORWARD, slack * amplification): a
    stored endpoint re-iterated R steps carries its own rounding error
    amplified by |(f^R)'|, so demanding better than FWD_ULP ulps rejects
    exact intervals once R passes FLOAT_R_CAP.  Pass 0.0 to insist on
    EPS_FORWARD outright (shallow constructions only)."""
    if n0 < 1 or n_max < n0:
        raise DomainError("need 1 <= n0 <= n_max")
    if grid < 2:
        raise DomainError("grid must have at least 2 cells")
    if forward_slack < 0:
        raise DomainError("forward_slack must be nonnegative")
    if tree is None:
        tree = build_connector_tree(spec, base)
    eng = _Engine(spec, base, params, tree, n_max, grid, keep_sets,
                  forward_slack)
    state = InducedPartition(
        base=base,
        map_name=spec.name,
        params=params,
        n0=n0,
        n_max=n_max,
        grid=grid,
        grid_spacing=eng.grid_spacing,
        leftover_sets=[eng.delta_set],
        engine=eng,
    )
    state.meta["phase"] = spec.phase
    state.meta["map_params"] = dict(spec.params)
    state.meta["tree"] = {
        "depth": tree.depth,
        "entries": tree.n_entries,
        "discarded": tree.discarded,
        "K0": tree.K0,
        "D0": tree.D0,
        "forward_defect": tree.forward_defect,
    }
    return state


def inducing_step(state: InducedPartition, n: int, hyp_centers) -> InducedPartition:
    """One construction step driven by explicit centers.

    The centers must lie on the state's grid; they are intersected with the
    detector's hyperbolic set at n, so passing a superset is harmless."""
    eng = state.engine
    if eng is None:
        raise InducingError("state has no attached engine; use new_state()")
    pts = np.atleast_1d(np.asarray(hyp_centers, dtype=float))
    gp = eng.grid_points
    j = np.clip(np.searchsorted(gp, pts), 0, gp.size - 1)
    jm = np.maximum(j - 1, 0)
    j = np.where(np.abs(gp[jm] - pts) < np.abs(gp[j] - pts), jm, j)
    if np.any(np.abs(gp[j] - pts) > 1e-9):
        raise InducingError("hyp_centers must lie on the construction grid")
    return eng.step(state, n, cols=np.unique(j))


def run_inducing(
    spec: MapSpec,
    base: BaseDomain,
    params: HyperbolicParams,
    n0: int,
    n_max: int = 60,
    grid: int = DEFAULT_GRID,
    *,
    tree: Optional[ConnectorTree] = None,
    keep_sets: bool = True,
    forward_slack: float = FWD_ULP,
    progress: Optional[Callable[[int, dict], None]] = None,
) -> InducedPartition:
    """Full construction loop n = n0..n_max.

    Slow coverage is reported through the leftover series, never raised."""
    state = new_state(
        spec, base, params, n0, n_max, grid, tree=tree, keep_sets=keep_sets,
        forward_slack=forward_slack,
    )
    for n in range(n0, n_max + 1):
        state.engine.step(state, n)
        if progress is not None:
            progress(n, state.meta["steps"][-1])
    return state


def saturation_defect(state: InducedPartition, n: int) -> float:
    """Largest unaccounted measure of V_n(x) ∩ Delta over the step's
    centers, where accounted means S_n plus elements from steps <= n."""
    row = state.ledger.row(n)
    if row.satellite is None:
        raise InducingError("ledger was built with keep_sets=False")
    pairs = [(e.u_lo, e.u_hi) for e in state.elements if e.n <= n]
    covered = row.satellite
    if pairs:
        covered = IntervalSet.from_pairs(list(covered.pairs()) + pairs)
    delta_set = state.base.delta_set()
    worst = 0.0
    for lo, hi in zip(row.v_lo, row.v_hi):
        vset = IntervalSet.from_pairs([(float(lo), float(hi))]).intersect(delta_set)
        if vset.is_empty():
            continue
        worst = max(worst, vset.subtract(covered).measure())
    return worst
