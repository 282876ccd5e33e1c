"""Hyperbolic-time detection and pre-ball construction.

A time n is a (sigma, delta)-hyperbolic time for x when, for every
1 <= k <= n, the backward derivative product over the last k steps is
bounded by sigma^k and the delta-truncated distance of f^{n-k}(x) to the
critical set is at least sigma^{bk}.  The detector works throughout in
log space with the per-step margin

    u_j = log||Df(f^j x)^-1|| - log(sigma)

so that the derivative condition at (n, k) reads "window sum of u <= 0".
Subtracting log(sigma) elementwise *before* summing makes the naive and
the fast detector agree bitwise even in exact boundary cases (doubling
with sigma = 1/2 gives u identically zero).  The recurrence condition is
always evaluated through the single expression ``(b * k) * (-log sigma)``
for the same reason.

The fast detector is O(n): the derivative condition becomes "prefix sum
P_n is no larger than every earlier prefix" (running minimum), and the
recurrence condition becomes "n exceeds i + K_i for every earlier site i"
where K_i is the largest depth at which site i is too close to the
critical set (running maximum).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import maps as _maps
from .maps import DomainError, MapSpec, OrbitBuffer

EPS_DEFECT = 1e-9


class DetectorError(Exception):
    """Base class for detection/calibration failures."""


class PowerSearchError(DetectorError):
    """No iterate power with negative averaged log inverse derivative."""


class PullbackError(DetectorError):
    """Pre-ball pullback left the valid branch geometry (delta1 too large)."""


class HyperbolicityViolation(DetectorError):
    """Backward contraction failed at a reported hyperbolic time."""


class CalibrationError(DetectorError):
    """NUE/SR report cannot support parameter calibration."""


@dataclass(frozen=True)
class HyperbolicParams:
    sigma: float
    delta: float
    b: float
    index_convention: str = "paper"

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"sigma must be in (0,1), got {self.sigma}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.b <= 0:
            raise ValueError("b must be positive")
        if self.index_convention not in ("paper", "shifted"):
            raise ValueError(f"unknown index convention {self.index_convention!r}")

    @property
    def log_sigma(self) -> float:
        return math.log(self.sigma)

    def recurrence_threshold(self, k):
        """-log of the recurrence bound sigma^{bk}; shared by all detectors."""
        return (self.b * k) * (-self.log_sigma)


@dataclass(frozen=True)
class NueReport:
    """Empirical nonuniform-expansion / slow-recurrence summary."""

    map_name: str
    lambda_hat: float
    sr_curve: tuple[tuple[float, float], ...]  # (delta, value), delta decreasing
    n_power: int
    passed: bool

    def sr_value(self, delta: float) -> float:
        for d, v in self.sr_curve:
            if abs(d - delta) < 1e-15:
                return v
        raise KeyError(f"delta {delta} not on the tested grid")


@dataclass(frozen=True)
class PreBall:
    """Hyperbolic pre-ball V_n around a center at hyperbolic time n.

    ``levels[j]`` is the j-th image f^j(V_n) as an endpoint pair, in lift
    (cover) coordinates for circle maps; levels[n] is the target ball and
    levels[0] is V_n itself.
    """

    center: float
    n: int
    v_n: tuple[float, float]
    image_ball: tuple[float, float]
    inner_radius: float
    levels: tuple[tuple[float, float], ...] = ()


# ---------------------------------------------------------------------------
# margins
# ---------------------------------------------------------------------------


def _check_delta(orbit: OrbitBuffer, params: HyperbolicParams) -> None:
    if np.any(orbit.log_trunc_dist != 0.0) and orbit.delta != params.delta:
        raise DetectorError(
            f"orbit buffer built with delta={orbit.delta}, detector wants "
            f"{params.delta}; rebuild with with_delta()"
        )


def _margin_array(orbit: OrbitBuffer, params: HyperbolicParams) -> np.ndarray:
    """u_i for i = 1..n: the summand of the depth-k window at time n is
    u over indices n-k+1..n (both conventions, after index relabeling)."""
    lid = orbit.log_inv_deriv
    if params.index_convention == "paper":
        src = lid[1:]
    else:  # shifted: product over j = n-k..n-1
        src = lid[:-1]
    return src - params.log_sigma


# ---------------------------------------------------------------------------
# naive detector (literal definition)
# ---------------------------------------------------------------------------


def is_hyperbolic_time(orbit: OrbitBuffer, n: int, params: HyperbolicParams) -> bool:
    """Literal check of the definition at a single index (O(n))."""
    if n <= 0:
        raise DomainError("hyperbolic time index must be >= 1")
    if n > len(orbit):
        raise DomainError(f"index {n} beyond orbit length {len(orbit)}")
    _check_delta(orbit, params)
    u = _margin_array(orbit, params)
    ltd = orbit.log_trunc_dist
    s = 0.0
    for k in range(1, n + 1):
        s += u[n - k]  # u is 0-based: u[i-1] holds margin index i
        if not s <= 0.0:
            return False
        if not ltd[n - k] <= params.recurrence_threshold(float(k)):
            return False
    return True


def hyperbolic_times_naive(orbit: OrbitBuffer, params: HyperbolicParams) -> np.ndarray:
    """Index-by-index scan with the literal detector (O(n^2))."""
    out = [n for n in range(1, len(orbit) + 1) if is_hyperbolic_time(orbit, n, params)]
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# fast detector
# ---------------------------------------------------------------------------


def _recurrence_depths(ltd: np.ndarray, params: HyperbolicParams) -> np.ndarray:
    """K_i = largest k with ltd_i > threshold(k) (0 when never violated).

    The comparison uses recurrence_threshold exactly as the naive detector
    does; the division only seeds the search and is corrected by +-1 steps.
    """
    bL = params.b * (-params.log_sigma)
    with np.errstate(divide="ignore", invalid="ignore"):
        K = np.floor(ltd / bL)
    K = np.where(np.isfinite(K), K, 0.0)
    K = np.maximum(K, 0.0)
    for _ in range(64):
        up = ltd > params.recurrence_threshold(K + 1.0)
        if not np.any(up):
            break
        K = np.where(up, K + 1.0, K)
    for _ in range(64):
        dn = (K >= 1.0) & ~(ltd > params.recurrence_threshold(K))
        if not np.any(dn):
            break
        K = np.where(dn, K - 1.0, K)
    return K


def detect_matrix(
    lid: np.ndarray, ltd: np.ndarray, params: HyperbolicParams
) -> np.ndarray:
    """Fast detection over a batch of orbits.

    lid and ltd have shape (G, N+1) (rows are orbits, columns orbit
    indices 0..N).  Returns a boolean matrix of the same shape whose
    column n flags n as a hyperbolic time; column 0 is always False.
    """
    lid = np.atleast_2d(lid)
    ltd = np.atleast_2d(ltd)
    G, M = lid.shape
    N = M - 1
    if params.index_convention == "paper":
        u = lid[:, 1:] - params.log_sigma
    else:
        u = lid[:, :-1] - params.log_sigma
    P = np.zeros((G, N + 1))
    np.cumsum(u, axis=1, out=P[:, 1:])
    prefix_min = np.minimum.accumulate(P, axis=1)
    ok = np.zeros((G, N + 1), dtype=bool)
    ok[:, 1:] = P[:, 1:] <= prefix_min[:, :-1]
    # recurrence sites i = n-k run over 0..n-1
    K = _recurrence_depths(ltd[:, :N], params)
    horizon = np.maximum.accumulate(np.arange(N)[None, :] + K, axis=1)
    ok[:, 1:] &= np.arange(1, N + 1)[None, :] > horizon
    return ok


def hyperbolic_times_fast(orbit: OrbitBuffer, params: HyperbolicParams) -> np.ndarray:
    """All hyperbolic times of the orbit, O(n) amortized."""
    _check_delta(orbit, params)
    ok = detect_matrix(
        orbit.log_inv_deriv[None, :], orbit.log_trunc_dist[None, :], params
    )[0]
    return np.nonzero(ok)[0].astype(np.int64)


def frequency_estimate(
    orbits: Sequence[OrbitBuffer], params: HyperbolicParams
) -> float:
    """Mean fraction of hyperbolic indices across orbits (theta estimate)."""
    if len(orbits) < 8 or any(len(ob) < 10**4 for ob in orbits):
        raise DetectorError("frequency estimate needs >= 8 orbits of length >= 1e4")
    fractions = [
        hyperbolic_times_fast(ob, params).size / len(ob) for ob in orbits
    ]
    return float(np.mean(fractions))


def shift_property_check(orbit: OrbitBuffer, params: HyperbolicParams) -> bool:
    """If n is hyperbolic for x, n-i must be hyperbolic for f^i(x), i < n.

    Checked literally for every detected time and every shift, using the
    same prefix representation as the detector (vectorized over shifts).
    """
    _check_delta(orbit, params)
    times = hyperbolic_times_fast(orbit, params)
    if times.size == 0:
        return True
    u = _margin_array(orbit, params)
    P = np.concatenate([[0.0], np.cumsum(u)])
    ltd = orbit.log_trunc_dist
    for n in times:
        # shifted orbit start i, target index m = n - i, windows k = 1..m
        # derivative condition: P[n] <= min P[i..n-1]
        tail_min = np.minimum.accumulate(P[n - 1 :: -1])[::-1]  # min P[i..n-1]
        i_idx = np.arange(1, n)
        if i_idx.size and not np.all(P[n] <= tail_min[i_idx]):
            return False
        ks = np.arange(1, n + 1, dtype=float)
        viol = ltd[n - ks.astype(int)] > params.recurrence_threshold(ks)
        if np.any(viol):
            first_bad = int(np.nonzero(viol)[0][0]) + 1  # smallest bad k
            # shift i admits depths k <= n - i; need first_bad > n - i
            if np.any(n - i_idx >= first_bad):
                return False
    return True


# ---------------------------------------------------------------------------
# NUE / SR statistics
# ---------------------------------------------------------------------------


def birkhoff_log_inv(orbit: OrbitBuffer) -> float:
    """(1/n) sum_{j=1..n} log||Df(f^j x)^-1|| (negative under expansion)."""
    if len(orbit) < 10**3:
        raise DetectorError("need orbit length >= 1e3")
    return float(np.mean(orbit.log_inv_deriv[1:]))


def check_sr(
    spec: MapSpec, orbit: OrbitBuffer, delta_grid: Sequence[float]
) -> dict[float, float]:
    """Empirical recurrence sums (1/n) sum_j -log dist_delta for each delta."""
    dg = list(delta_grid)
    if any(d <= 0 for d in dg) or any(a <= b for a, b in zip(dg, dg[1:])):
        raise DetectorError("delta grid must be positive and decreasing")
    d = _maps.distance_to_crit(spec, orbit.points[1:])
    out = {}
    for delta in dg:
        near = d < delta
        if np.any(near):
            vals = -np.log(d[near])
            out[delta] = float(np.sum(vals) / d.size)
        else:
            out[delta] = 0.0
    return out


def find_power_N(
    spec: MapSpec, samples: Sequence[OrbitBuffer], n_max: int
) -> int:
    """Smallest N with negative sample-mean of the N-step log sum."""
    if not samples:
        raise PowerSearchError("no sample orbits")
    neg = sum(birkhoff_log_inv(ob) < 0 for ob in samples)
    if 2 * neg <= len(samples):
        raise PowerSearchError(
            f"{spec.name}: expansion fails on most samples ({neg}/{len(samples)})"
        )
    n_max = min(n_max, min(len(ob) for ob in samples))
    lid = np.stack([ob.log_inv_deriv[:n_max] for ob in samples])
    means = np.mean(np.cumsum(lid, axis=1), axis=0)
    hits = np.nonzero(means < 0)[0]
    if hits.size == 0:
        raise PowerSearchError(f"{spec.name}: no N <= {n_max} with mean expansion")
    return int(hits[0]) + 1


def assemble_nue_report(
    spec: MapSpec,
    orbits: Sequence[OrbitBuffer],
    delta_grid: Sequence[float],
    n_power_max: int = 32,
) -> NueReport:
    """Aggregate NUE/SR evidence over sample orbits."""
    lam = -float(np.mean([birkhoff_log_inv(ob) for ob in orbits]))
    grid = list(delta_grid)
    if spec.crit:
        acc = np.zeros(len(grid))
        for ob in orbits:
            curve = check_sr(spec, ob, grid)
            acc += np.asarray([curve[d] for d in grid])
        vals = acc / len(orbits)
    else:
        vals = np.zeros(len(grid))
    # monotone decay toward 0 as delta shrinks, with Monte Carlo slack
    slack = 1e-9 + 0.05 * max(float(np.max(vals)), 1e-12)
    monotone = all(b <= a + slack for a, b in zip(vals, vals[1:]))
    try:
        n_power = find_power_N(spec, orbits, n_power_max)
        power_ok = True
    except PowerSearchError:
        n_power, power_ok = 0, False
    passed = lam > 0 and monotone and power_ok
    return NueReport(
        map_name=spec.name,
        lambda_hat=lam,
        sr_curve=tuple((float(d), float(v)) for d, v in zip(grid, vals)),
        n_power=n_power,
        passed=passed,
    )


def calibrate_params(
    spec: MapSpec, report: NueReport, overrides: Optional[dict] = None
) -> HyperbolicParams:
    """Default (sigma, delta, b) from the empirical report.

    sigma = exp(-lambda_hat/2); delta = largest tested delta whose
    recurrence sum is at most lambda_hat/16 (1 when the critical set is
    empty); b = 0.4 * min(1, 1/beta).  Any field can be overridden.
    """
    overrides = dict(overrides or {})
    if not report.passed:
        raise CalibrationError(f"{report.map_name}: NUE/SR report not passed")
    sigma = overrides.pop("sigma", None) or math.exp(-report.lambda_hat / 2.0)
    if "delta" in overrides:
        delta = overrides.pop("delta")
    elif not spec.crit:
        delta = 1.0
    else:
        budget = report.lambda_hat / 16.0
        good = [d for d, v in report.sr_curve if v <= budget]
        if not good:
            raise CalibrationError(
                f"{report.map_name}: no tested delta meets the recurrence "
                f"budget {budget:.3g}; extend the grid downward"
            )
        delta = max(good)
    beta = spec.nondeg.beta
    b_default = 0.4 * min(1.0, 1.0 / beta) if beta > 0 else 0.4
    b = overrides.pop("b", None) or b_default
    conv = overrides.pop("index_convention", "paper")
    if overrides:
        raise CalibrationError(f"unknown overrides {sorted(overrides)}")
    if 2 * b >= min(1.0, 1.0 / beta if beta > 0 else math.inf):
        raise CalibrationError(f"b barrier violated: 2*{b} >= min(1, 1/beta)")
    return HyperbolicParams(sigma=sigma, delta=delta, b=b, index_convention=conv)


# ---------------------------------------------------------------------------
# pre-balls
# ---------------------------------------------------------------------------


def pullback_chain(
    spec: MapSpec,
    anchors: np.ndarray,
    lo_top: np.ndarray,
    hi_top: np.ndarray,
):
    """Pull a level-n interval back along anchor orbits, one branch per step.

    ``anchors`` has shape (n+1, C): column c is the orbit segment whose
    level-j point anchors the chain component.  (lo_top, hi_top) are the
    level-n intervals, in lift coordinates for circle maps.  Returns
    (los, his, ok, defect): (n+1, C) chain endpoint matrices, a validity
    flag per column, and the largest one-step forward defect among valid
    columns.
    """
    anchors = np.atleast_2d(anchors)
    n = anchors.shape[0] - 1
    C = anchors.shape[1]
    los = np.empty((n + 1, C))
    his = np.empty((n + 1, C))
    los[n], his[n] = lo_top, hi_top
    ok = np.ones(C, dtype=bool)
    defect = 0.0
    if spec.is_circle:
        for j in range(n - 1, -1, -1):
            t = np.rint(spec.raw(anchors[j]) - anchors[j + 1])
            tgt_lo = los[j + 1] + t
            tgt_hi = his[j + 1] + t
            los[j] = _maps.invert_circle_points(spec, tgt_lo)
            his[j] = _maps.invert_circle_points(spec, tgt_hi)
            d = max(
                float(np.max(np.abs(spec.lift_eval(los[j]) - tgt_lo), initial=0.0)),
                float(np.max(np.abs(spec.lift_eval(his[j]) - tgt_hi), initial=0.0)),
            )
            defect = max(defect, d)
    else:
        for j in range(n - 1, -1, -1):
            bid = spec.branch_of(anchors[j])
            inc = np.asarray([b.increasing for b in spec.branches])[bid]
            a, oka = _maps.invert_interval_points(spec, bid, los[j + 1])
            b_, okb = _maps.invert_interval_points(spec, bid, his[j + 1])
            ok &= oka & okb
            los[j] = np.where(inc, a, b_)
            his[j] = np.where(inc, b_, a)
            if np.any(ok):
                d = max(
                    float(np.max(np.abs(spec.raw(a) - los[j + 1])[ok], initial=0.0)),
                    float(np.max(np.abs(spec.raw(b_) - his[j + 1])[ok], initial=0.0)),
                )
                defect = max(defect, d)
    return los, his, ok, defect


def build_preball(
    spec: MapSpec,
    orbit: OrbitBuffer,
    n: int,
    delta1: float,
    params: Optional[HyperbolicParams] = None,
) -> PreBall:
    """V_n = the component of f^{-n} B(f^n x, delta1) containing x.

    With params given, n must be a detected hyperbolic time and the
    backward images must contract like sigma^{k/2} (Lemma-style bound);
    violations raise HyperbolicityViolation.
    """
    if not 1 <= n <= len(orbit):
        raise DomainError(f"n={n} outside orbit range")
    if delta1 <= 0 or delta1 >= 0.5:
        raise PullbackError("delta1 must be in (0, 0.5)")
    if params is not None and not is_hyperbolic_time(orbit, n, params):
        raise HyperbolicityViolation(f"n={n} is not a hyperbolic time")
    y = orbit.points[n]
    lo_top, hi_top = y - delta1, y + delta1
    if not spec.is_circle and (lo_top < 0 or hi_top > 1):
        raise PullbackError(
            f"target ball ({lo_top:.4g}, {hi_top:.4g}) leaves the interval"
        )
    anchors = orbit.points[: n + 1][:, None]
    los, his, ok, defect = pullback_chain(
        spec, anchors, np.asarray([lo_top]), np.asarray([hi_top])
    )
    if not ok[0]:
        raise PullbackError(
            f"pullback crossed a branch boundary (delta1={delta1} too large)"
        )
    if defect > EPS_DEFECT:
        raise PullbackError(f"forward defect {defect:.3g} exceeds {EPS_DEFECT}")
    levels = tuple((float(a), float(b)) for a, b in zip(los[:, 0], his[:, 0]))
    if params is not None:
        diams = his[:, 0] - los[:, 0]
        ks = n - np.arange(n + 1)
        bound = params.sigma ** (ks / 2.0) * 2 * delta1
        bad = diams > bound * (1 + 1e-9)
        if np.any(bad):
            j = int(np.nonzero(bad)[0][0])
            raise HyperbolicityViolation(
                f"diam f^{j}(V_{n}) = {diams[j]:.3g} exceeds "
                f"sigma^(k/2) bound {bound[j]:.3g}"
            )
    x = orbit.points[0]
    v_lo, v_hi = levels[0]
    return PreBall(
        center=float(x),
        n=int(n),
        v_n=(v_lo, v_hi),
        image_ball=(float(lo_top), float(hi_top)),
        inner_radius=float(min(x - v_lo, v_hi - x)),
        levels=levels,
    )


def distortion_along(spec: MapSpec, preball: PreBall, pairs: int) -> float:
    """Empirical distortion constant of f^n on V_n.

    Max over sampled pairs (y, z) of |log|(f^n)'(y)| - log|(f^n)'(z)|| over
    the image distance of y and z.  Sampling is deterministic (uniform
    grid in V_n, consecutive-and-spread pair pattern).
    """
    m = max(int(math.isqrt(2 * pairs)) + 2, 4)
    v_lo, v_hi = preball.v_n
    ys = np.linspace(v_lo, v_hi, m + 2)[1:-1]
    if spec.is_circle:
        ys = ys % 1.0
    pts = ys.copy()
    logd = np.zeros_like(pts)
    for _ in range(preball.n):
        with np.errstate(divide="ignore"):
            logd += np.log(spec.abs_deriv(pts))
        pts = spec.eval(pts)
    best = 0.0
    count = 0
    for stride in range(1, m):
        a = np.arange(0, m - stride)
        b = a + stride
        dist = _maps.phase_distance(spec, 0.0, np.abs(pts[a] - pts[b]))
        good = dist > 1e-12
        if np.any(good):
            r = np.abs(logd[a] - logd[b])[good] / dist[good]
            best = max(best, float(np.max(r)))
        count += int(np.sum(good))
        if count >= pairs:
            break
    return best


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def write_times_csv(path, per_orbit_times: Iterable[tuple[int, Sequence[int]]]):
    with open(path, "w") as fh:
        fh.write("orbit_id,hyperbolic_time\n")
        for oid, times in per_orbit_times:
            for t in times:
                fh.write(f"{oid},{int(t)}\n")


def write_frequency_csv(path, rows: Iterable[tuple[float, float, float]]):
    with open(path, "w") as fh:
        fh.write("sigma,delta,theta_hat\n")
        for sigma, delta, theta in rows:
            fh.write(f"{sigma:.17g},{delta:.17g},{theta:.17g}\n")


def write_sr_csv(path, curves: Iterable[tuple[str, float, float]]):
    with open(path, "w") as fh:
        fh.write("label,delta,recurrence_sum\n")
        for label, delta, val in curves:
            fh.write(f"{label},{delta:.17g},{val:.17g}\n")
