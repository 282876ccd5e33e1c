"""Invariant-density estimation and the lift from induced to global measure.

Ulam discretization: the phase space (or the base interval Delta) is split
into K bins, the bin-to-bin transition operator is estimated by Monte
Carlo (one step of f, or one full return of the induced map F), and the
stationary weight vector is found by power iteration.  For the induced
map, sample points in the unpartitioned remainder have no return branch;
they are discarded and the discarded fraction is reported on the estimate.

The lift mu ~ sum_{j=0}^{R_U - 1} f^j_*(nu|U) pushes the induced density
forward along each element's return block.  The j = 0 term is deposited
exactly by rebinning; the j >= 1 terms are sampled from nu|U by inverse
CDF so every element contributes exactly R_U * nu(U) of mass and the
normalizing denominator sum_j nu(R > j) is hit identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import maps as _maps
from .inducing import InducedPartition
from .maps import MapSpec

__all__ = [
    "DensityEstimate",
    "MeasuresError",
    "ConvergenceError",
    "EmptyPartitionError",
    "ulam_density",
    "ulam_exact_rows",
    "stationary_weights",
    "analytic_density",
    "lift_measure",
    "density_distance",
    "restricted_l1",
    "mean_return_time",
    "write_density_csv",
]

EPS_NORM = 1e-12
L1_TOL = 1e-10
MAX_SWEEPS = 10 ** 5

ROLES = ("nu_induced", "mu_lifted", "mu_direct", "analytic")


class MeasuresError(Exception):
    pass


class ConvergenceError(MeasuresError):
    pass


class EmptyPartitionError(MeasuresError):
    pass


@dataclass(frozen=True)
class DensityEstimate:
    """Histogram density: bin masses over an equal-width grid on support."""

    support: tuple
    bins: int
    weights: np.ndarray
    role: str
    discarded: float = 0.0

    def __post_init__(self):
        if self.role not in ROLES:
            raise MeasuresError(f"unknown role {self.role!r}")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.bins,):
            raise MeasuresError("weights shape does not match bin count")
        if np.any(w < -1e-15):
            raise MeasuresError("weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > EPS_NORM:
            raise MeasuresError("weights must sum to 1 within 1e-12")
        object.__setattr__(self, "weights", w)

    @property
    def width(self) -> float:
        return (self.support[1] - self.support[0]) / self.bins

    def edges(self) -> np.ndarray:
        lo, hi = self.support
        return lo + (hi - lo) * np.arange(self.bins + 1) / self.bins

    def centers(self) -> np.ndarray:
        lo, hi = self.support
        return lo + (hi - lo) * (np.arange(self.bins) + 0.5) / self.bins

    def scaled(self) -> np.ndarray:
        """weights * K: the density relative to uniform on the support."""
        return self.weights * self.bins

    def mass(self, a: float, b: float) -> float:
        """Mass of [a, b] treating each bin as uniform."""
        e = self.edges()
        ov = np.minimum(e[1:], b) - np.maximum(e[:-1], a)
        frac = np.clip(ov, 0.0, None) / self.width
        return float(np.dot(frac, self.weights))


def _same_grid(a: DensityEstimate, b: DensityEstimate) -> bool:
    return (
        a.bins == b.bins
        and abs(a.support[0] - b.support[0]) <= 1e-12
        and abs(a.support[1] - b.support[1]) <= 1e-12
    )


def density_distance(a: DensityEstimate, b: DensityEstimate) -> float:
    """L1 distance of the bin weights, in [0, 2]."""
    if not _same_grid(a, b):
        raise MeasuresError("estimates must share support and bin count")
    return float(np.abs(a.weights - b.weights).sum())


def restricted_l1(a: DensityEstimate, b: DensityEstimate, lo: float, hi: float) -> float:
    """L1 distance summed over the bins whose centers fall in [lo, hi]."""
    if not _same_grid(a, b):
        raise MeasuresError("estimates must share support and bin count")
    sel = (a.centers() >= lo) & (a.centers() <= hi)
    return float(np.abs(a.weights[sel] - b.weights[sel]).sum())


# ---------------------------------------------------------------------------
# Ulam operator
# ---------------------------------------------------------------------------


def stationary_weights(P: np.ndarray, tol: float = L1_TOL,
                       max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Renormalized power iteration for a (sub)stochastic row matrix."""
    K = P.shape[0]
    w = np.full(K, 1.0 / K)
    for _ in range(max_sweeps):
        w2 = w @ P
        s = float(w2.sum())
        if s <= 0.0:
            raise ConvergenceError("operator lost all mass")
        w2 /= s
        if float(np.abs(w2 - w).sum()) <= tol:
            w2 /= w2.sum()
            return w2
        w = w2
    raise ConvergenceError(f"power iteration did not reach {tol} in {max_sweeps} sweeps")


def _stratified(bins: int, samples_per_bin: int,
                rng: np.random.Generator) -> np.ndarray:
    # one jittered sample per stratum keeps row noise O(1/samples)
    u = (np.arange(samples_per_bin) + rng.random((bins, samples_per_bin)))
    return u / samples_per_bin


def _direct_rows(spec: MapSpec, bins: int, samples_per_bin: int,
                 rng: np.random.Generator) -> np.ndarray:
    u = _stratified(bins, samples_per_bin, rng)
    x = ((np.arange(bins)[:, None] + u) / bins).ravel()
    y = _maps.step_points(spec, x)
    j = np.clip((y * bins).astype(np.int64), 0, bins - 1)
    i = np.repeat(np.arange(bins), samples_per_bin)
    P = np.zeros((bins, bins))
    np.add.at(P, (i, j), 1.0)
    return P / samples_per_bin


def _induced_rows(part: InducedPartition, spec: MapSpec, bins: int,
                  samples_per_bin: int, rng: np.random.Generator):
    d_lo, d_hi = part.base.delta
    els = part.elements_sorted()
    if not els:
        raise EmptyPartitionError("partition has no elements")
    u_lo = np.asarray([e.u_lo for e in els])
    u_hi = np.asarray([e.u_hi for e in els])
    R = np.asarray([e.R for e in els], dtype=np.int64)
    u = _stratified(bins, samples_per_bin, rng)
    x = (d_lo + (d_hi - d_lo) * (np.arange(bins)[:, None] + u) / bins).ravel()
    k = np.searchsorted(u_lo, x, side="right") - 1
    inside = (k >= 0) & (x <= u_hi[np.clip(k, 0, u_hi.size - 1)])
    rows = np.repeat(np.arange(bins), samples_per_bin)
    x, k, rows = x[inside], k[inside], rows[inside]
    Rk = R[k]
    y = x.copy()
    for step in range(1, int(Rk.max()) + 1 if Rk.size else 0):
        act = Rk >= step
        y[act] = _maps.step_points(spec, y[act])
    j = np.clip(((y - d_lo) / (d_hi - d_lo) * bins).astype(np.int64), 0, bins - 1)
    P = np.zeros((bins, bins))
    np.add.at(P, (rows, j), 1.0)
    counts = np.bincount(rows, minlength=bins).astype(float)
    nonzero = counts > 0
    P[nonzero] /= counts[nonzero, None]
    discarded = 1.0 - x.size / (bins * samples_per_bin)
    return P, float(discarded)


def ulam_density(dynamics: Union[MapSpec, InducedPartition], bins: int = 512,
                 samples_per_bin: int = 1000, seed: int = 0, *,
                 spec: Optional[MapSpec] = None) -> DensityEstimate:
    """Stationary density of f (MapSpec) or of the induced return map F
    (InducedPartition; pass spec= when the partition's map is needed and
    differs from the registry default)."""
    if bins < 64:
        raise MeasuresError("bins must be >= 64")
    rng = np.random.default_rng(seed)
    if isinstance(dynamics, MapSpec):
        P = _direct_rows(dynamics, bins, samples_per_bin, rng)
        w = stationary_weights(P)
        return DensityEstimate((0.0, 1.0), bins, w, "mu_direct")
    part = dynamics
    if spec is None:
        spec = _maps.get_map(part.map_name, **part.meta.get("map_params", {}))
    P, discarded = _induced_rows(part, spec, bins, samples_per_bin, rng)
    w = stationary_weights(P)
    return DensityEstimate(part.base.delta, bins, w, "nu_induced",
                           discarded=discarded)


def ulam_exact_rows(spec: MapSpec, bins: int) -> np.ndarray:
    """Exact transition rows for the piecewise-linear slope-2 maps.

    Each bin maps linearly onto exactly two consecutive image bins (K
    even), so the Monte Carlo operator can be cross-checked against the
    exact one."""
    if spec.name not in ("doubling", "tent"):
        raise MeasuresError("exact rows only for piecewise-linear maps")
    if bins % 2:
        raise MeasuresError("bins must be even")
    P = np.zeros((bins, bins))
    for i in range(bins):
        if spec.name == "doubling":
            j0 = (2 * i) % bins
            P[i, j0] = P[i, (j0 + 1) % bins] = 0.5
        elif 2 * i < bins:
            P[i, 2 * i] = P[i, 2 * i + 1] = 0.5
        else:
            j0 = 2 * (bins - i) - 2
            P[i, j0] = P[i, j0 + 1] = 0.5
    return P


# ---------------------------------------------------------------------------
# analytic registry
# ---------------------------------------------------------------------------


def _logistic_cdf(x: np.ndarray) -> np.ndarray:
    return 2.0 / np.pi * np.arcsin(np.sqrt(np.clip(x, 0.0, 1.0)))


def analytic_density(name: str, bins: int,
                     support: tuple = (0.0, 1.0)) -> DensityEstimate:
    """Known invariant densities: Lebesgue for doubling/tent, the arcsine
    law for the full logistic map."""
    lo, hi = support
    e = lo + (hi - lo) * np.arange(bins + 1) / bins
    if name in ("doubling", "tent"):
        w = np.diff(e) / (hi - lo)
    elif name == "logistic":
        if not (abs(lo) <= 1e-12 and abs(hi - 1.0) <= 1e-12):
            raise MeasuresError("logistic analytic density is on [0, 1]")
        c = _logistic_cdf(e)
        w = np.diff(c) / (c[-1] - c[0])
    else:
        raise MeasuresError(f"no analytic density registered for {name!r}")
    w = w / w.sum()
    return DensityEstimate(support, bins, w, "analytic")


# ---------------------------------------------------------------------------
# lift
# ---------------------------------------------------------------------------


def _element_masses(nu: DensityEstimate, u_lo: np.ndarray,
                    u_hi: np.ndarray) -> np.ndarray:
    e = nu.edges()
    ov = np.minimum(e[None, 1:], u_hi[:, None]) - np.maximum(e[None, :-1], u_lo[:, None])
    return np.clip(ov, 0.0, None) @ (nu.weights / nu.width)


def _deposit_pieces(hist: np.ndarray, support: tuple, p_lo, p_hi, mass) -> None:
    lo, hi = support
    K = hist.size
    h = (hi - lo) / K
    for a, b, m in zip(p_lo, p_hi, mass):
        if m <= 0.0 or b <= a:
            continue
        j0 = int(np.clip((a - lo) / h, 0, K - 1))
        j1 = int(np.clip((b - lo) / h - 1e-15, 0, K - 1))
        if j0 == j1:
            hist[j0] += m
            continue
        dens = m / (b - a)
        hist[j0] += dens * (lo + (j0 + 1) * h - a)
        hist[j1] += dens * (b - (lo + j1 * h))
        hist[j0 + 1 : j1] += dens * h


def _restricted_pieces(nu: DensityEstimate, a: float, b: float):
    """nu|[a,b] as pieces (lo, hi, mass), one per overlapped nu-bin."""
    e = nu.edges()
    lo = np.maximum(e[:-1], a)
    hi = np.minimum(e[1:], b)
    sel = hi > lo
    mass = (hi[sel] - lo[sel]) * nu.weights[sel] / nu.width
    return lo[sel], hi[sel], mass


def _sample_restricted(nu: DensityEstimate, a: float, b: float, n: int,
                       rng: np.random.Generator) -> np.ndarray:
    """n inverse-CDF samples from nu conditioned on [a, b]."""
    p_lo, p_hi, mass = _restricted_pieces(nu, a, b)
    total = float(mass.sum())
    if total <= 0.0:
        # nu gives [a, b] no mass; fall back to uniform on it
        return a + (b - a) * rng.random(n)
    cum = np.concatenate([[0.0], np.cumsum(mass)])
    u = rng.random(n) * cum[-1]
    k = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, mass.size - 1)
    frac = (u - cum[k]) / mass[k]
    return p_lo[k] + frac * (p_hi[k] - p_lo[k])


def lift_measure(nu: DensityEstimate, partition: InducedPartition,
                 spec: MapSpec, pushforward_samples: int = 200000,
                 seed: int = 0, *, bins: Optional[int] = None) -> DensityEstimate:
    """mu ~ sum_U sum_{j=0}^{R_U - 1} f^j_*(nu|U), normalized.

    The j = 0 layer is rebinned exactly; each j >= 1 layer is estimated
    with samples from nu|U, every sample carrying weight nu(U)/n_U so the
    layer total is exact and only its placement is stochastic."""
    if not partition.elements:
        raise EmptyPartitionError("partition has no elements to lift from")
    d_lo, d_hi = partition.base.delta
    if abs(nu.support[0] - d_lo) > 1e-9 or abs(nu.support[1] - d_hi) > 1e-9:
        raise MeasuresError("nu must be supported on the partition's Delta")
    els = partition.elements_sorted()
    u_lo = np.asarray([e.u_lo for e in els])
    u_hi = np.asarray([e.u_hi for e in els])
    R = np.asarray([e.R for e in els], dtype=np.int64)
    nuU = _element_masses(nu, u_lo, u_hi)
    Z = float(np.dot(R, nuU))
    if Z <= 0.0:
        raise EmptyPartitionError("nu gives the partition zero mass")
    K = nu.bins if bins is None else int(bins)
    support = (0.0, 1.0)
    hist = np.zeros(K)
    for a, b in zip(u_lo, u_hi):
        p_lo, p_hi, mass = _restricted_pieces(nu, a, b)
        _deposit_pieces(hist, support, p_lo, p_hi, mass)
    rng = np.random.default_rng(seed)
    extra = R - 1
    tot_extra = float(np.dot(extra, nuU))
    if tot_extra > 0.0:
        for i in range(len(els)):
            if extra[i] == 0 or nuU[i] <= 0.0:
                continue
            n_i = max(1, int(round(pushforward_samples * extra[i] * nuU[i] / tot_extra)))
            x = _sample_restricted(nu, u_lo[i], u_hi[i], n_i, rng)
            w_i = nuU[i] / n_i
            for _ in range(int(extra[i])):
                x = _maps.step_points(spec, x)
                j = np.clip((x * K).astype(np.int64), 0, K - 1)
                np.add.at(hist, j, w_i)
    w = hist / hist.sum()
    return DensityEstimate(support, K, w, "mu_lifted")


def mean_return_time(nu: DensityEstimate, partition: InducedPartition, *,
                     return_remainder: bool = False):
    """sum_U R_U nu(U); requires >= 98% Lebesgue coverage of Delta.

    The uncovered remainder's nu-mass is the reported bound on the missing
    contribution per unit return time."""
    if partition.leftover_fraction() > 0.02 + 1e-12:
        raise MeasuresError("partition covers less than 98% of Delta")
    els = partition.elements_sorted()
    if not els:
        raise EmptyPartitionError("partition has no elements")
    u_lo = np.asarray([e.u_lo for e in els])
    u_hi = np.asarray([e.u_hi for e in els])
    R = np.asarray([e.R for e in els], dtype=np.int64)
    nuU = _element_masses(nu, u_lo, u_hi)
    value = float(np.dot(R, nuU))
    remainder = max(0.0, 1.0 - float(nuU.sum()))
    if return_remainder:
        return value, remainder
    return value


def write_density_csv(est: DensityEstimate, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("bin_center,weight_k\n")
        for c, s in zip(est.centers(), est.scaled()):
            fh.write(f"{c:.17g},{s:.17g}\n")
