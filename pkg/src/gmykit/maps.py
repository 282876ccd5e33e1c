"""One-dimensional map models and numeric kernels.

A :class:`MapSpec` describes a piecewise monotone map of [0, 1], either as
an interval map or as a degree-d covering of the circle.  Circle maps are
handled through their lift: a strictly increasing homeomorphism of the real
line with ``lift(x + 1) = lift(x) + degree``.  This makes backward pullbacks
of intervals well defined even when they cross the 0/1 seam.

Built-in models: ``doubling``, ``tent``, ``logistic`` and
``manneville_pomeau`` (intermittent, configurable exponent).  Custom maps
are assembled from a small formula catalog (see :func:`build_from_config`).

Numeric conventions
-------------------
* ``EPS_ROOT = 1e-13``: target accuracy for branch inversion, and the nudge
  size used when an orbit lands on a critical point.
* The doubling and tent maps are exact in binary floating point, so every
  float orbit collapses onto a dyadic cycle after ~50 steps.  Orbits used
  for statistics therefore apply a seeded sub-ulp dither (``spec.dither``)
  when a generator is supplied; without a generator iteration is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import mpmath as mp
import numpy as np

EPS_ROOT = 1e-13
BISECT_ITERS = 60


class MapError(Exception):
    """Base class for map-evaluation failures."""


class DomainError(MapError):
    """Point outside the phase space or on a discontinuity."""


class CriticalPointError(MapError):
    """Derivative requested at a critical/singular point."""


class NoPreimageError(MapError):
    """Branch inversion target outside the branch image."""


class NumericError(MapError):
    """Overflow or NaN during iteration."""


@dataclass(frozen=True)
class Branch:
    """Maximal monotonicity interval [lo, hi] with raw endpoint values.

    Raw values are lift values for circle maps (so they can exceed 1) and
    plain image values for interval maps.
    """

    lo: float
    hi: float
    f_lo: float
    f_hi: float

    @property
    def increasing(self) -> bool:
        return self.f_hi >= self.f_lo

    @property
    def image(self) -> tuple[float, float]:
        return (min(self.f_lo, self.f_hi), max(self.f_lo, self.f_hi))


@dataclass(frozen=True)
class Nondegeneracy:
    """Declared behaviour of |f'| near the critical set.

    kind 'critical': B^-1 * d^beta <= |f'| <= B * d^beta' with d the
    distance to the critical set.  kind 'bounded_jump': |f'| within
    [1/B, B] globally (derivative jump, no blowup).  kind 'none': empty
    critical set.
    """

    kind: str = "none"
    B: float = 1.0
    beta: float = 0.0
    beta_prime: float = 0.0


@dataclass(frozen=True)
class MapSpec:
    name: str
    phase: str  # 'circle' | 'interval'
    branches: tuple[Branch, ...]
    raw: Callable[[np.ndarray], np.ndarray]
    raw_deriv: Callable[[np.ndarray], np.ndarray]
    degree: int = 1
    crit: tuple[float, ...] = ()
    jumps: tuple[float, ...] = ()
    nondeg: Nondegeneracy = field(default_factory=Nondegeneracy)
    dither: float = 0.0
    params: dict = field(default_factory=dict)
    mp_raw: Optional[Callable] = None
    mp_raw_deriv: Optional[Callable] = None
    flags: tuple[str, ...] = ()

    @property
    def is_circle(self) -> bool:
        return self.phase == "circle"

    # -- evaluation ---------------------------------------------------------

    def _branch_los(self) -> np.ndarray:
        return np.asarray([b.lo for b in self.branches])

    def branch_of(self, x) -> np.ndarray:
        """Index of the branch containing x (right-continuous at cuts)."""
        los = self._branch_los()
        idx = np.searchsorted(los[1:], np.asarray(x, dtype=float), side="right")
        return idx

    def reduce(self, y):
        if self.is_circle:
            return y - np.floor(y)
        return y

    def eval(self, x):
        return self.reduce(self.raw(np.asarray(x, dtype=float)))

    def abs_deriv(self, x):
        return np.abs(self.raw_deriv(np.asarray(x, dtype=float)))

    # -- lift (circle maps) --------------------------------------------------

    def lift_eval(self, x):
        """Value of the lift at arbitrary real x."""
        x = np.asarray(x, dtype=float)
        k = np.floor(x)
        return self.raw(x - k) + self.degree * k

    def lift_deriv(self, x):
        x = np.asarray(x, dtype=float)
        return self.raw_deriv(x - np.floor(x))


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------


def _validate_point(spec: MapSpec, x: float) -> float:
    if not np.isfinite(x):
        raise DomainError(f"non-finite point {x!r}")
    if spec.is_circle:
        return float(x) % 1.0
    if x < -EPS_ROOT or x > 1 + EPS_ROOT:
        raise DomainError(f"point {x!r} outside [0, 1]")
    return float(min(max(x, 0.0), 1.0))


def evaluate(spec: MapSpec, x: float) -> float:
    """f(x), reduced mod 1 on the circle."""
    x = _validate_point(spec, x)
    for j in spec.jumps:
        if abs(x - j) < EPS_ROOT:
            raise DomainError(f"{spec.name}: evaluation at discontinuity {j}")
    y = float(spec.eval(x))
    if not np.isfinite(y):
        raise NumericError(f"{spec.name}: f({x}) not finite")
    return y


def phase_distance(spec: MapSpec, x: float, y) -> np.ndarray:
    """Distance in the phase space (circle metric when applicable)."""
    d = np.abs(np.asarray(y, dtype=float) - x)
    if spec.is_circle:
        d = np.minimum(d, 1.0 - d)
    return d


def distance_to_crit(spec: MapSpec, x) -> np.ndarray:
    """Pointwise distance to the critical set (inf for empty set)."""
    x = np.asarray(x, dtype=float)
    if not spec.crit:
        return np.full(x.shape, np.inf)
    ds = [phase_distance(spec, c, x) for c in spec.crit]
    return np.minimum.reduce(ds)


def inv_norm(spec: MapSpec, x: float) -> float:
    """1 / |f'(x)|, the norm of the inverse derivative in dimension one."""
    x = _validate_point(spec, x)
    if spec.crit and float(distance_to_crit(spec, x)) < EPS_ROOT:
        raise CriticalPointError(f"{spec.name}: derivative undefined at {x}")
    d = float(spec.abs_deriv(x))
    if d == 0.0 or not np.isfinite(d):
        raise CriticalPointError(f"{spec.name}: |f'({x})| = {d}")
    return 1.0 / d


def truncated_distance(spec: MapSpec, x: float, delta: float) -> float:
    """delta-truncated distance to the critical set.

    Equals 1 when the point is at distance >= delta from the critical set,
    and the plain distance otherwise.  With an empty critical set it is
    identically 1.
    """
    if not (0 < delta <= 1):
        raise DomainError(f"delta must be in (0, 1], got {delta}")
    x = _validate_point(spec, x)
    d = float(distance_to_crit(spec, x))
    return 1.0 if d >= delta else d


def branch_inverse(spec: MapSpec, branch_id: int, y, tol: float = EPS_ROOT):
    """Inverse of f restricted to one branch, by monotone bisection.

    ``y`` may be a scalar or an (a, b) pair; pairs are mapped to the
    (orientation-corrected) preimage pair.  Raises NoPreimageError when the
    target is not in the closed branch image.
    """
    if not 0 <= branch_id < len(spec.branches):
        raise DomainError(f"no branch {branch_id}")
    br = spec.branches[branch_id]
    if np.ndim(y) == 1 and len(y) == 2:
        xa = branch_inverse(spec, branch_id, y[0], tol)
        xb = branch_inverse(spec, branch_id, y[1], tol)
        return (xa, xb) if xa <= xb else (xb, xa)
    y = float(y)
    img_lo, img_hi = br.image
    target = y
    if spec.is_circle:
        # interpret y mod 1 and shift into the raw image of the branch
        y = y % 1.0
        k = math.ceil(img_lo - y - tol)
        target = y + k
    if target < img_lo - 1e-9 or target > img_hi + 1e-9:
        raise NoPreimageError(
            f"{spec.name}: branch {branch_id} image {br.image} misses {target}"
        )
    target = min(max(target, img_lo), img_hi)
    inc = br.increasing
    # image extremes are attained at branch endpoints; bisection cannot
    # resolve them through the float plateau of f (vertex targets)
    if target == img_lo:
        return br.lo if inc else br.hi
    if target == img_hi:
        return br.hi if inc else br.lo
    lo, hi = br.lo, br.hi
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        fm = float(spec.raw(np.asarray(mid)))
        if (fm < target) == inc:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    return 0.5 * (lo + hi)


def preimages_of_point(spec: MapSpec, y: float, tol: float = EPS_ROOT) -> list[float]:
    """All solutions of f(x) = y in the phase space."""
    out = []
    for i in range(len(spec.branches)):
        try:
            out.append(branch_inverse(spec, i, y, tol))
        except NoPreimageError:
            continue
    out.sort()
    dedup: list[float] = []
    for x in out:
        if not dedup or x - dedup[-1] > 10 * tol:
            dedup.append(x)
    return dedup


# ---------------------------------------------------------------------------
# vectorized kernels
# ---------------------------------------------------------------------------


def step_points(
    spec: MapSpec,
    x: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """One forward step of an array of points, with optional dither.

    Points landing within EPS_ROOT of the critical set are nudged away by
    EPS_ROOT before the next evaluation would see them.
    """
    y = spec.eval(x)
    if rng is not None and spec.dither > 0:
        y = y + (2.0 * rng.random(np.shape(y)) - 1.0) * spec.dither
        y = spec.reduce(y) if spec.is_circle else np.clip(y, 0.0, 1.0)
    if spec.crit:
        for c in spec.crit:
            hit = np.abs(y - c) < EPS_ROOT
            if np.any(hit):
                y = np.where(hit, c + EPS_ROOT, y)
    if not np.all(np.isfinite(y)):
        raise NumericError(f"{spec.name}: non-finite iterate")
    return y


def iterate_ensemble(
    spec: MapSpec,
    x0: np.ndarray,
    n: int,
    rng: Optional[np.random.Generator] = None,
    track_branches: bool = False,
):
    """Iterate a batch of points n steps.

    Returns (points, branches) where points has shape (n+1, width).  The
    branch array holds, per step j, the branch index of points[j] for
    interval maps and the integer lift translate for circle maps; it is
    None unless requested.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    pts = np.empty((n + 1, x0.size))
    pts[0] = x0 % 1.0 if spec.is_circle else np.clip(x0, 0.0, 1.0)
    br = np.empty((n, x0.size), dtype=np.int64) if track_branches else None
    for j in range(n):
        if track_branches:
            if spec.is_circle:
                raw = spec.raw(pts[j])
                nxt = raw - np.floor(raw)
                br[j] = np.rint(raw - nxt).astype(np.int64)
            else:
                br[j] = spec.branch_of(pts[j])
        try:
            pts[j + 1] = step_points(spec, pts[j], rng)
        except NumericError as exc:
            raise NumericError(f"step {j + 1}: {exc}") from exc
    return pts, br


def orbit_log_arrays(spec: MapSpec, pts: np.ndarray, delta: float):
    """(-log|f'|, -log dist_delta) along precomputed orbit points."""
    with np.errstate(divide="ignore"):
        lid = -np.log(spec.abs_deriv(pts))
    d = distance_to_crit(spec, pts)
    trunc = np.where(d >= delta, 1.0, d)
    with np.errstate(divide="ignore"):
        ltd = -np.log(trunc)
    return lid, ltd


@dataclass(frozen=True)
class OrbitBuffer:
    """A finite orbit with cached log-derivative and recurrence data.

    ``log_inv_deriv[j] = -log|f'(points[j])|`` and ``log_trunc_dist[j]``
    is -log of the delta-truncated distance of points[j] to the critical
    set (0 whenever the point is delta-far from it).
    """

    map_name: str
    points: np.ndarray
    log_inv_deriv: np.ndarray
    log_trunc_dist: np.ndarray
    delta: float
    nudges: int = 0

    def __len__(self) -> int:
        return self.points.size - 1

    def with_delta(self, spec: MapSpec, delta: float) -> "OrbitBuffer":
        lid, ltd = orbit_log_arrays(spec, self.points, delta)
        return OrbitBuffer(self.map_name, self.points, lid, ltd, delta, self.nudges)


def iterate_orbit(
    spec: MapSpec,
    x0: float,
    n: int,
    delta: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> OrbitBuffer:
    """Orbit x0, f(x0), ..., f^n(x0) with cached logs.

    Without an rng the iteration is plain floating point (exact for the
    binary maps); with one, the map's dither is applied each step so that
    long-run statistics see a generic orbit.
    """
    if n < 0:
        raise DomainError("n must be nonnegative")
    x0 = _validate_point(spec, x0)
    nudged = 0
    if spec.crit:
        d0 = float(distance_to_crit(spec, x0))
        if d0 < EPS_ROOT:
            x0 += EPS_ROOT
            nudged += 1
    pts, _ = iterate_ensemble(spec, np.asarray([x0]), n, rng)
    pts = pts[:, 0]
    lid, ltd = orbit_log_arrays(spec, pts, delta)
    return OrbitBuffer(spec.name, pts, lid, ltd, delta, nudged)


# -- vectorized inversion ----------------------------------------------------


def invert_circle_points(spec: MapSpec, y: np.ndarray, iters: int = BISECT_ITERS):
    """Solve lift(x) = y for each y (cover coordinates), by bisection.

    The lift is a strictly increasing homeomorphism of R, so this never
    fails.  Returns x in cover coordinates.
    """
    y = np.asarray(y, dtype=float)
    t = np.floor(y / spec.degree)
    target = y - spec.degree * t
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = spec.raw(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi) + t


def invert_interval_points(
    spec: MapSpec,
    branch_ids: np.ndarray,
    y: np.ndarray,
    iters: int = BISECT_ITERS,
    img_tol: float = 1e-9,
):
    """Solve f(x) = y within given branches.  Returns (x, ok).

    Targets outside the closed branch image by more than img_tol are
    flagged (ok=False); targets within tolerance are clamped onto it.
    """
    y = np.asarray(y, dtype=float)
    branch_ids = np.asarray(branch_ids)
    blo = np.asarray([b.lo for b in spec.branches])[branch_ids]
    bhi = np.asarray([b.hi for b in spec.branches])[branch_ids]
    ilo = np.asarray([b.image[0] for b in spec.branches])[branch_ids]
    ihi = np.asarray([b.image[1] for b in spec.branches])[branch_ids]
    inc = np.asarray([b.increasing for b in spec.branches])[branch_ids]
    ok = (y >= ilo - img_tol) & (y <= ihi + img_tol)
    target = np.clip(y, ilo, ihi)
    lo, hi = blo.astype(float).copy(), bhi.astype(float).copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = (spec.raw(mid) < target) == inc
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi), ok


def newton_invert(
    spec: MapSpec,
    y: np.ndarray,
    seed: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    iters: int = 4,
):
    """Refine preimages by safeguarded Newton inside known brackets.

    Works in cover coordinates for circle maps and plain coordinates for
    interval maps.  Seeds must already lie in [lo, hi]; iterates are
    clamped back into the bracket.  Returns (x, residual).
    """
    x = np.clip(np.asarray(seed, dtype=float), lo, hi)
    if spec.is_circle:
        f, fp = spec.lift_eval, spec.lift_deriv
    else:
        f, fp = spec.raw, spec.raw_deriv
    for _ in range(iters):
        fx = f(x)
        d = fp(x)
        d = np.where(np.abs(d) < 1e-300, 1e-300, d)
        x = np.clip(x - (fx - y) / d, lo, hi)
    return x, np.abs(f(x) - y)


# ---------------------------------------------------------------------------
# formula catalog and registry
# ---------------------------------------------------------------------------


def _formula(kind: str, p: dict):
    """(eval, deriv, mp_eval, mp_deriv) for one catalog formula."""
    if kind == "affine":
        a, b = float(p["a"]), float(p["b"])
        return (
            lambda x: a * x + b,
            lambda x: np.full_like(np.asarray(x, dtype=float), a),
            lambda x: a * x + b,
            lambda x: mp.mpf(a),
        )
    if kind == "quadratic":
        a, b, c = float(p["a"]), float(p["b"]), float(p.get("c", 0.0))
        return (
            lambda x: (a * x + b) * x + c,
            lambda x: 2 * a * x + b,
            lambda x: (a * x + b) * x + c,
            lambda x: 2 * a * x + b,
        )
    if kind == "power_offset":
        c, q = float(p.get("c", 1.0)), float(p["p"])
        return (
            lambda x: x + c * np.power(x, q),
            lambda x: 1.0 + c * q * np.power(x, q - 1.0),
            lambda x: x + c * x**mp.mpf(q),
            lambda x: 1 + c * mp.mpf(q) * x ** (mp.mpf(q) - 1),
        )
    raise DomainError(f"unknown formula kind {kind!r}")


def doubling() -> MapSpec:
    return MapSpec(
        name="doubling",
        phase="circle",
        branches=(Branch(0.0, 0.5, 0.0, 1.0), Branch(0.5, 1.0, 1.0, 2.0)),
        raw=lambda x: 2.0 * x,
        raw_deriv=lambda x: np.full_like(np.asarray(x, dtype=float), 2.0),
        degree=2,
        crit=(),
        nondeg=Nondegeneracy("none"),
        dither=1e-12,
        mp_raw=lambda x: 2 * x,
        mp_raw_deriv=lambda x: mp.mpf(2),
    )


def tent() -> MapSpec:
    return MapSpec(
        name="tent",
        phase="interval",
        branches=(Branch(0.0, 0.5, 0.0, 1.0), Branch(0.5, 1.0, 1.0, 0.0)),
        raw=lambda x: np.where(np.asarray(x, dtype=float) <= 0.5, 2.0 * x, 2.0 * (1.0 - x)),
        raw_deriv=lambda x: np.where(np.asarray(x, dtype=float) <= 0.5, 2.0, -2.0),
        crit=(0.5,),
        nondeg=Nondegeneracy("bounded_jump", B=2.0),
        dither=1e-12,
        mp_raw=lambda x: 2 * x if x <= mp.mpf("0.5") else 2 * (1 - x),
        mp_raw_deriv=lambda x: mp.mpf(2) if x <= mp.mpf("0.5") else mp.mpf(-2),
    )


def logistic() -> MapSpec:
    return MapSpec(
        name="logistic",
        phase="interval",
        branches=(Branch(0.0, 0.5, 0.0, 1.0), Branch(0.5, 1.0, 1.0, 0.0)),
        raw=lambda x: 4.0 * x * (1.0 - x),
        raw_deriv=lambda x: 4.0 - 8.0 * np.asarray(x, dtype=float),
        crit=(0.5,),
        nondeg=Nondegeneracy("critical", B=8.0, beta=1.0, beta_prime=1.0),
        mp_raw=lambda x: 4 * x * (1 - x),
        mp_raw_deriv=lambda x: 4 - 8 * x,
    )


def manneville_pomeau(alpha: float = 0.5) -> MapSpec:
    """Intermittent circle map x + x^(1+alpha) mod 1, neutral fixed point at 0."""
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    a = float(alpha)
    # branch cut: x* solves x + x^(1+alpha) = 1
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid + mid ** (1 + a) < 1.0:
            lo = mid
        else:
            hi = mid
    xstar = 0.5 * (lo + hi)
    flags = ("nonintegrable_regime",) if a >= 1.0 else ()
    return MapSpec(
        name="manneville_pomeau",
        phase="circle",
        branches=(Branch(0.0, xstar, 0.0, 1.0), Branch(xstar, 1.0, 1.0, 2.0)),
        raw=lambda x: x + np.power(x, 1.0 + a),
        raw_deriv=lambda x: 1.0 + (1.0 + a) * np.power(x, a),
        degree=2,
        crit=(),
        nondeg=Nondegeneracy("none"),
        params={"alpha": a},
        mp_raw=lambda x: x + x ** (1 + mp.mpf(a)),
        mp_raw_deriv=lambda x: 1 + (1 + mp.mpf(a)) * x ** mp.mpf(a),
        flags=flags,
    )


_BUILTINS = {
    "doubling": doubling,
    "tent": tent,
    "logistic": logistic,
    "manneville_pomeau": manneville_pomeau,
}


def builtin_names() -> list[str]:
    return sorted(_BUILTINS)


def get_map(name: str, **params) -> MapSpec:
    if name not in _BUILTINS:
        raise DomainError(f"unknown map {name!r}; built-ins: {builtin_names()}")
    return _BUILTINS[name](**params)


def build_from_config(cfg: dict) -> MapSpec:
    """Map from a config mapping: a built-in name or a piecewise table."""
    name = cfg.get("name")
    if name in _BUILTINS:
        return get_map(name, **cfg.get("params", {}))
    if "branches" not in cfg:
        raise DomainError(f"map {name!r} is not built in and has no branch table")
    phase = cfg.get("phase", "interval")
    pieces = []
    for bc in cfg["branches"]:
        f, df, mf, mdf = _formula(bc["formula"]["kind"], bc["formula"])
        pieces.append((float(bc["lo"]), float(bc["hi"]), f, df, mf, mdf))
    pieces.sort(key=lambda t: t[0])
    los = np.asarray([p[0] for p in pieces])
    his = np.asarray([p[1] for p in pieces])
    if np.any(np.abs(los[1:] - his[:-1]) > EPS_GEOM_BRANCH):
        raise DomainError("branch table must tile [0, 1] without gaps")

    def raw(x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(los[1:], x, side="right")
        out = np.empty_like(x)
        for i, (_, _, f, _, _, _) in enumerate(pieces):
            m = idx == i
            if np.any(m):
                out[m] = f(x[m])
        return out

    def raw_deriv(x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(los[1:], x, side="right")
        out = np.empty_like(x)
        for i, (_, _, _, df, _, _) in enumerate(pieces):
            m = idx == i
            if np.any(m):
                out[m] = df(x[m]) if np.ndim(df(x[m])) else np.full(m.sum(), df(x[m]))
        return out

    def mp_raw(x):
        for lo_, hi_, _, _, mf, _ in pieces:
            if lo_ <= x <= hi_:
                return mf(x)
        return pieces[-1][4](x)

    def mp_raw_deriv(x):
        for lo_, hi_, _, _, _, mdf in pieces:
            if lo_ <= x <= hi_:
                return mdf(x)
        return pieces[-1][5](x)

    branches = tuple(
        Branch(lo_, hi_, float(f(np.asarray(lo_))), float(f(np.asarray(hi_))))
        for lo_, hi_, f, _, _, _ in pieces
    )
    jumps = []
    if phase == "interval":
        for a, b in zip(branches, branches[1:]):
            if abs(a.f_hi - b.f_lo) > 1e-9:
                jumps.append(b.lo)
    degree = int(round(max(b.image[1] for b in branches))) if phase == "circle" else 1
    nd = cfg.get("nondegeneracy", {})
    return MapSpec(
        name=name or "custom",
        phase=phase,
        branches=branches,
        raw=raw,
        raw_deriv=raw_deriv,
        degree=max(degree, 1),
        crit=tuple(float(c) for c in cfg.get("critical_points", ())),
        jumps=tuple(jumps),
        nondeg=Nondegeneracy(
            nd.get("kind", "none"),
            float(nd.get("B", 1.0)),
            float(nd.get("beta", 0.0)),
            float(nd.get("beta_prime", 0.0)),
        ),
        dither=float(cfg.get("dither", 0.0)),
        params=dict(cfg.get("params", {})),
        mp_raw=mp_raw,
        mp_raw_deriv=mp_raw_deriv,
    )


EPS_GEOM_BRANCH = 1e-9


def validate_spec(spec: MapSpec, samples_per_branch: int = 64) -> None:
    """Structural checks: branches tile the space, are strictly monotone,
    endpoint raw values are consistent with evaluation."""
    branches = spec.branches
    if not branches:
        raise DomainError("no branches")
    if abs(branches[0].lo) > EPS_GEOM_BRANCH or abs(branches[-1].hi - 1) > EPS_GEOM_BRANCH:
        raise DomainError("branches must start at 0 and end at 1")
    for a, b in zip(branches, branches[1:]):
        if abs(b.lo - a.hi) > EPS_GEOM_BRANCH:
            raise DomainError(f"gap between branches at {a.hi}")
    for i, br in enumerate(branches):
        xs = np.linspace(br.lo, br.hi, samples_per_branch + 2)[1:-1]
        d = spec.raw_deriv(xs)
        if br.increasing and np.any(d <= 0):
            raise DomainError(f"branch {i} not strictly increasing")
        if not br.increasing and np.any(d >= 0):
            raise DomainError(f"branch {i} not strictly decreasing")
        for e, fe in ((br.lo, br.f_lo), (br.hi, br.f_hi)):
            if abs(float(spec.raw(np.asarray(e))) - fe) > 1e-9:
                raise DomainError(f"branch {i} endpoint value mismatch at {e}")
    if spec.is_circle:
        img_lo = min(b.image[0] for b in branches)
        img_hi = max(b.image[1] for b in branches)
        if abs(img_lo) > 1e-9 or abs(img_hi - spec.degree) > 1e-9:
            raise DomainError("lift must map [0,1] onto [0, degree]")


def check_nondegeneracy(
    spec: MapSpec, rng: np.random.Generator, n_samples: int = 512
) -> dict:
    """Empirical check of the declared derivative envelope near the
    critical set.  Returns the measured envelope; raises on violation."""
    nd = spec.nondeg
    report = {"kind": nd.kind, "checked": 0, "ratio_min": None, "ratio_max": None}
    if nd.kind == "none" or not spec.crit:
        return report
    # dyadic approach distances plus uniform background points
    ds = 2.0 ** -np.arange(2, 40)
    pts = []
    for c in spec.crit:
        pts.append(np.clip(c + ds, 0, 1))
        pts.append(np.clip(c - ds, 0, 1))
    pts.append(rng.random(n_samples))
    x = np.unique(np.concatenate(pts))
    x = x[distance_to_crit(spec, x) > 0]
    d = distance_to_crit(spec, x)
    ad = spec.abs_deriv(x)
    if nd.kind == "critical":
        ratio = ad / np.power(d, nd.beta)
        lo_ok = np.all(ad >= np.power(d, nd.beta) / nd.B * (1 - 1e-9))
        hi_ok = np.all(ad <= nd.B * np.power(d, nd.beta_prime) * (1 + 1e-9))
    else:  # bounded_jump
        ratio = ad
        lo_ok = np.all(ad >= 1.0 / nd.B * (1 - 1e-9))
        hi_ok = np.all(ad <= nd.B * (1 + 1e-9))
    report.update(
        checked=int(x.size),
        ratio_min=float(np.min(ratio)),
        ratio_max=float(np.max(ratio)),
    )
    if not (lo_ok and hi_ok):
        raise DomainError(f"{spec.name}: derivative envelope violated: {report}")
    return report


# ---------------------------------------------------------------------------
# iterated map (used when the one-step averaged expansion is not negative)
# ---------------------------------------------------------------------------


def power_compose(spec: MapSpec, n: int) -> MapSpec:
    """The map f^n as a MapSpec (branch table = depth-n monotonicity cells)."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if n == 1:
        return spec
    # cell boundaries: preimages of branch cut points up to depth n-1
    cuts = {b.lo for b in spec.branches} | {b.hi for b in spec.branches}
    bounds = set(cuts)
    level = set(cuts)
    for _ in range(n - 1):
        nxt = set()
        for y in level:
            for x in preimages_of_point(spec, y % 1.0 if spec.is_circle else y):
                nxt.add(x)
        bounds |= nxt
        level = nxt
    cells = sorted(b for b in bounds if 0 <= b <= 1)
    if cells[0] > EPS_ROOT:
        cells.insert(0, 0.0)
    if cells[-1] < 1 - EPS_ROOT:
        cells.append(1.0)

    def raw(x):
        x = np.asarray(x, dtype=float)
        y = x.astype(float)
        shift = np.zeros_like(y)
        for _ in range(n):
            z = spec.raw(y)
            if spec.is_circle:
                k = np.floor(z)
                shift = spec.degree * shift + k
                y = z - k
            else:
                y = z
        return y + shift if spec.is_circle else y

    def raw_deriv(x):
        x = np.asarray(x, dtype=float)
        y = x.astype(float)
        d = np.ones_like(y)
        for _ in range(n):
            d = d * spec.raw_deriv(y)
            y = spec.reduce(spec.raw(y))
        return d

    eps = 1e-12
    branches = []
    for a, b in zip(cells, cells[1:]):
        if b - a < 10 * eps:
            continue
        fa = float(raw(np.asarray(a + eps)))
        fb = float(raw(np.asarray(b - eps)))
        branches.append(Branch(a, b, fa, fb))
    crit = set(spec.crit)
    lvl = set(spec.crit)
    for _ in range(n - 1):
        lvl = {x for y in lvl for x in preimages_of_point(spec, y)}
        crit |= lvl

    def mp_raw(x):
        shift = mp.mpf(0)
        for _ in range(n):
            z = spec.mp_raw(x)
            if spec.is_circle:
                k = mp.floor(z)
                shift = spec.degree * shift + k
                x = z - k
            else:
                x = z
        return x + shift if spec.is_circle else x

    def mp_raw_deriv(x):
        d = mp.mpf(1)
        for _ in range(n):
            d *= spec.mp_raw_deriv(x)
            z = spec.mp_raw(x)
            x = z - mp.floor(z) if spec.is_circle else z
        return d

    return MapSpec(
        name=f"{spec.name}^_{n}",
        phase=spec.phase,
        branches=tuple(branches),
        raw=raw,
        raw_deriv=raw_deriv,
        degree=spec.degree**n if spec.is_circle else 1,
        crit=tuple(sorted(crit)),
        nondeg=spec.nondeg,
        dither=spec.dither,
        params={**spec.params, "power": n},
        mp_raw=mp_raw,
        mp_raw_deriv=mp_raw_deriv,
        flags=spec.flags,
    )
