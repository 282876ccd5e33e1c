"""Independent oracles and batch helpers shared by the test suite."""

import math

import numpy as np

import gmykit.maps as gm
from gmykit.maps import OrbitBuffer


def orbit_batch(spec, x0s, n, delta=1.0, seed=None):
    """Build OrbitBuffers for many starts with one vectorized sweep."""
    rng = np.random.default_rng(seed) if seed is not None else None
    pts, _ = gm.iterate_ensemble(spec, np.asarray(x0s, dtype=float), n, rng)
    out = []
    for c in range(pts.shape[1]):
        col = pts[:, c]
        lid, ltd = gm.orbit_log_arrays(spec, col, delta)
        out.append(OrbitBuffer(spec.name, col, lid, ltd, delta))
    return out


def brute_force_times(lid, ltd, sigma, delta, b, convention="paper"):
    """Literal O(n^2) hyperbolic-time scan on raw log arrays.

    Kept deliberately independent of the package implementation: plain
    backward accumulation per (n, k) pair, jit-compiled for the sweep
    sizes used by the acceptance tests.
    """
    u = (lid[1:] if convention == "paper" else lid[:-1]) - math.log(sigma)
    return _scan(np.asarray(u, dtype=np.float64),
                 np.asarray(ltd, dtype=np.float64),
                 float(b), float(-math.log(sigma)))


def _scan_py(u, ltd, b, L):
    N = u.size
    out = np.zeros(N + 1, dtype=np.bool_)
    for n in range(1, N + 1):
        s = 0.0
        good = True
        for k in range(1, n + 1):
            s += u[n - k]
            if not s <= 0.0:
                good = False
                break
            if not ltd[n - k] <= (b * float(k)) * L:
                good = False
                break
        out[n] = good
    return out


try:
    import numba

    _scan = numba.njit(cache=True)(_scan_py)
except ImportError:  # pragma: no cover
    _scan = _scan_py


def quadrature_sr_tent(delta):
    """E[-log dist_delta] under Lebesgue for a critical point: closed form."""
    return 2.0 * delta * (1.0 - math.log(delta))


def quadrature_sr_logistic(delta):
    """Same integral against the density 1/(pi sqrt(x(1-x))) around 1/2."""
    import mpmath as mp

    f = lambda u: -mp.log(u) / (mp.pi * mp.sqrt(mp.mpf(1) / 4 - u**2))
    return float(2 * mp.quad(f, [0, delta]))


def tent_preimage_depth(p, delta1, depth_max=12):
    """Minimal N with the depth <= N tent preimages of p delta1/4-dense.

    Exact rational enumeration (y -> {y/2, 1 - y/2}); edge gaps count
    double, matching the covering-radius criterion of the base search.
    """
    from fractions import Fraction

    target = Fraction(delta1).limit_denominator(10**6) / 4
    level = [Fraction(p).limit_denominator(10**6)]
    union = set(level)
    for m in range(depth_max + 1):
        pts = sorted(union)
        gaps = [b - a for a, b in zip(pts, pts[1:])]
        edge = max(2 * pts[0], 2 * (1 - pts[-1]))
        if max(max(gaps, default=Fraction(0)), edge) <= target:
            return m
        level = [v for y in level for v in (y / 2, 1 - y / 2)]
        union.update(level)
    return None


def forward_reiterate(spec, lo, hi, R):
    """Iterate interval endpoints R_i steps each; plain step_points loop."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    R = np.atleast_1d(np.asarray(R, dtype=np.int64))
    cur = np.stack([lo, hi])
    cur = cur % 1.0 if spec.is_circle else np.clip(cur, 0.0, 1.0)
    out = cur.copy()
    for t in range(1, int(R.max()) + 1):
        cur = gm.step_points(spec, cur)
        hit = R == t
        out[:, hit] = cur[:, hit]
    return out[0], out[1]


def forward_defect_oracle(spec, lo, hi, R, target_lo, target_hi):
    """Worst endpoint mismatch of f^R([lo, hi]) against a target interval."""
    a, b = forward_reiterate(spec, lo, hi, R)
    a, b = np.minimum(a, b), np.maximum(a, b)

    def dist(u, v):
        e = np.abs(u - v)
        return np.minimum(e, 1.0 - e) if spec.is_circle else e

    straight = np.maximum(dist(a, target_lo), dist(b, target_hi))
    flipped = np.maximum(dist(a, target_hi), dist(b, target_lo))
    return float(np.minimum(straight, flipped).max())
