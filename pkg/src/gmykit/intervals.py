"""Finite unions of closed intervals in [0, 1].

All region bookkeeping in the package (base domains, leftover sets,
satellite unions) runs through :class:`IntervalSet`, a normalized sorted
list of disjoint closed components.  Normalization merges components
separated by less than ``EPS_GEOM`` but never drops an isolated tiny
component: deep partition elements can be far smaller than the merge
tolerance and must survive set algebra.

Circle topology is handled at the edges only: ``ball`` splits a wrapping
arc into segments and ``arcs`` re-joins the pair across the seam for
reporting.  Measures and boolean operations are seam-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_GEOM = 1e-12


class IntervalError(ValueError):
    """Malformed interval data (reversed endpoints, points outside [0, 1])."""


def _normalize(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort components, merge gaps below EPS_GEOM, drop empty ones."""
    if lo.size == 0:
        return lo, hi
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    if lo.size == 0:
        return lo, hi
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    out_lo = [lo[0]]
    out_hi = [hi[0]]
    for a, b in zip(lo[1:], hi[1:]):
        if a <= out_hi[-1] + EPS_GEOM:
            if b > out_hi[-1]:
                out_hi[-1] = b
        else:
            out_lo.append(a)
            out_hi.append(b)
    return np.asarray(out_lo, dtype=float), np.asarray(out_hi, dtype=float)


@dataclass(frozen=True)
class IntervalSet:
    """Disjoint sorted closed intervals, optionally on the circle."""

    lo: np.ndarray = field(default_factory=lambda: np.empty(0))
    hi: np.ndarray = field(default_factory=lambda: np.empty(0))
    wrap: bool = False

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise IntervalError("endpoint arrays differ in length")
        if lo.size and (np.any(lo < -EPS_GEOM) or np.any(hi > 1 + EPS_GEOM)):
            raise IntervalError("components must lie inside [0, 1]")
        if np.any(hi - lo < -EPS_GEOM):
            raise IntervalError("reversed component endpoints")
        lo, hi = _normalize(np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    # -- constructors ------------------------------------------------------

    @staticmethod
    def empty(wrap: bool = False) -> "IntervalSet":
        return IntervalSet(np.empty(0), np.empty(0), wrap)

    @staticmethod
    def from_pairs(pairs, wrap: bool = False) -> "IntervalSet":
        if len(pairs) == 0:
            return IntervalSet.empty(wrap)
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return IntervalSet(arr[:, 0], arr[:, 1], wrap)

    # -- basics ------------------------------------------------------------

    @property
    def n_components(self) -> int:
        return int(self.lo.size)

    def is_empty(self) -> bool:
        return self.lo.size == 0

    def measure(self) -> float:
        return float(np.sum(self.hi - self.lo))

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.lo, self.hi)]

    def arcs(self) -> list[tuple[float, float]]:
        """Components with the wrap pair [0,b],[a,1] joined as (a, 1+b)."""
        comps = self.pairs()
        if (
            self.wrap
            and len(comps) >= 2
            and comps[0][0] <= EPS_GEOM
            and comps[-1][1] >= 1 - EPS_GEOM
        ):
            a, _ = comps[-1]
            _, b = comps[0]
            comps = comps[1:-1] + [(a, 1.0 + b)]
        return comps

    def bounding_interval(self) -> tuple[float, float]:
        if self.is_empty():
            raise IntervalError("empty set has no bounding interval")
        return float(self.lo[0]), float(self.hi[-1])

    # -- boolean algebra ----------------------------------------------------

    def _require_same_wrap(self, other: "IntervalSet") -> None:
        # empty sets are wrap-agnostic
        if self.is_empty() or other.is_empty():
            return
        if self.wrap != other.wrap:
            raise IntervalError("mixed wrap modes")

    def union(self, other: "IntervalSet") -> "IntervalSet":
        self._require_same_wrap(other)
        return IntervalSet(
            np.concatenate([self.lo, other.lo]),
            np.concatenate([self.hi, other.hi]),
            self.wrap or other.wrap,
        )

    def intersect(self, other: "IntervalSet") -> "IntervalSet":
        self._require_same_wrap(other)
        if self.is_empty() or other.is_empty():
            return IntervalSet.empty(self.wrap)
        out = []
        j = 0
        for a, b in zip(self.lo, self.hi):
            while j < other.lo.size and other.hi[j] < a:
                j += 1
            k = j
            while k < other.lo.size and other.lo[k] <= b:
                c = max(a, other.lo[k])
                d = min(b, other.hi[k])
                if d > c:
                    out.append((c, d))
                k += 1
        return IntervalSet.from_pairs(out, self.wrap)

    def subtract(self, other: "IntervalSet") -> "IntervalSet":
        self._require_same_wrap(other)
        if self.is_empty() or other.is_empty():
            return self
        out = []
        j = 0
        for a, b in zip(self.lo, self.hi):
            cur = a
            while j < other.lo.size and other.hi[j] < cur:
                j += 1
            k = j
            while k < other.lo.size and other.lo[k] < b:
                if other.lo[k] > cur:
                    out.append((cur, other.lo[k]))
                cur = max(cur, other.hi[k])
                if cur >= b:
                    break
                k += 1
            if cur < b:
                out.append((cur, b))
        return IntervalSet.from_pairs(out, self.wrap)

    # -- queries -----------------------------------------------------------

    def overlap_flags(self, lo, hi, eps: float = EPS_GEOM) -> np.ndarray:
        """For query intervals [lo_i, hi_i]: does any component overlap by
        more than eps?  Vectorized.  Components with index in [b, a) start
        before hi-eps and end after lo+eps, so overlap holds iff a > b."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if self.is_empty():
            return np.zeros(lo.shape, dtype=bool)
        a = np.searchsorted(self.lo, hi - eps, side="left")
        b = np.searchsorted(self.hi, lo + eps, side="right")
        return a > b

    def contained_flags(self, lo, hi, tol: float = EPS_GEOM) -> np.ndarray:
        """For query intervals: is [lo_i, hi_i] inside one component,
        allowing tol slack at both ends?"""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if self.is_empty():
            return np.zeros(lo.shape, dtype=bool)
        j = np.searchsorted(self.lo, hi, side="right") - 1
        jc = np.clip(j, 0, self.lo.size - 1)
        return (j >= 0) & (self.lo[jc] <= lo + tol) & (hi <= self.hi[jc] + tol)

    def contains_points(self, x) -> np.ndarray:
        """Boolean membership for an array of points (closed components)."""
        x = np.asarray(x, dtype=float)
        if self.is_empty():
            return np.zeros(x.shape, dtype=bool)
        idx = np.searchsorted(self.lo, x, side="right") - 1
        ok = idx >= 0
        safe = np.clip(idx, 0, self.lo.size - 1)
        return ok & (x <= self.hi[safe])

    def covers_interval(self, a: float, b: float, tol: float = 0.0) -> bool:
        """True if [a, b] sits inside a single component (with slack tol)."""
        if self.is_empty():
            return False
        i = int(np.searchsorted(self.lo, a + tol, side="right")) - 1
        if i < 0:
            return False
        return a >= self.lo[i] - tol and b <= self.hi[i] + tol

    def overlaps_interval(self, a: float, b: float) -> bool:
        if self.is_empty():
            return False
        i = np.searchsorted(self.hi, a, side="left")
        return i < self.lo.size and self.lo[i] < b

    # -- sampling ----------------------------------------------------------

    def sample(self, k: int, rng) -> np.ndarray:
        """Draw k points uniformly w.r.t. length.

        ``rng`` may be a Generator or a seed; output is deterministic
        given either.  Sampling from a measure-zero set is an error.
        """
        if self.is_empty() or self.measure() <= 0:
            raise IntervalError("cannot sample from a measure-zero set")
        rng = np.random.default_rng(rng)
        lens = self.hi - self.lo
        cum = np.cumsum(lens)
        u = rng.random(k) * cum[-1]
        idx = np.searchsorted(cum, u, side="right")
        idx = np.clip(idx, 0, lens.size - 1)
        offset = u - (cum[idx] - lens[idx])
        return self.lo[idx] + offset


def ball(center: float, radius: float, wrap: bool = False) -> IntervalSet:
    """Metric ball B(center, radius), split across the seam on the circle."""
    if radius <= 0:
        raise IntervalError("radius must be positive")
    a, b = center - radius, center + radius
    if not wrap:
        return IntervalSet.from_pairs([(max(a, 0.0), min(b, 1.0))])
    if b - a >= 1.0:
        return IntervalSet.from_pairs([(0.0, 1.0)], wrap=True)
    a_m, b_m = a % 1.0, b % 1.0
    if a_m <= b_m:
        return IntervalSet.from_pairs([(a_m, b_m)], wrap=True)
    return IntervalSet.from_pairs([(0.0, b_m), (a_m, 1.0)], wrap=True)


def segments_mod1(a: float, b: float) -> list[tuple[float, float]]:
    """Reduce an interval [a, b] from the universal cover to [0,1] segments.

    Intervals of length >= 1 cover the whole circle.
    """
    if b - a >= 1.0:
        return [(0.0, 1.0)]
    a_m = a % 1.0
    b_m = a_m + (b - a)
    if b_m <= 1.0:
        return [(a_m, b_m)]
    return [(a_m, 1.0), (0.0, b_m - 1.0)]
