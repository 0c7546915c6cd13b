"""Brownian-bridge primitives.

Poisson time grids, progressive bridge revelation, and the minimum /
Bessel-bridge samplers needed to evaluate transition-density estimators on
both bounded-potential models and models whose potential is only bounded
on half-lines above the bridge minimum.

All samplers take a ``numpy.random.Generator`` and are deterministic given
it. A :class:`BridgeSkeleton` records every revealed point, so later
queries are drawn conditionally on earlier ones and a single realization
stays internally coherent no matter the query order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BridgeSkeleton",
    "sample_poisson_times",
    "bridge_interpolate",
    "sample_bridge_minimum",
    "sample_bridge_minimum_batch",
    "sample_bessel_bridge_point",
    "sequential_bridge_batch",
]


def sample_poisson_times(intensity: float, delta: float, rng) -> tuple[int, np.ndarray]:
    """kappa ~ Poisson(intensity) and kappa i.i.d. uniform times on [0, delta].

    ``intensity`` is the full Poisson mean; ``delta`` only scales the times.
    Times are returned unsorted.
    """
    if not np.isfinite(intensity) or intensity < 0:
        raise ValueError(f"intensity must be finite and >= 0, got {intensity}")
    if not np.isfinite(delta) or delta <= 0:
        raise ValueError(f"delta must be finite and > 0, got {delta}")
    kappa = int(rng.poisson(intensity))
    times = rng.uniform(0.0, delta, size=kappa)
    return kappa, times


def _cond_moments(t, t0, v0, t1, v1):
    # Gaussian conditional of a Brownian path at t given values at t0 < t < t1
    gap = t1 - t0
    frac = (t - t0) / gap
    mean = v0 + frac * (v1 - v0)
    var = (t - t0) * (t1 - t) / gap
    return mean, var


@dataclass
class _BesselSegment:
    """One side of a minimum-conditioned bridge, in local time s in [0, length].

    The segment is a 3-d Bessel bridge from 0 to endval, realized as the norm
    of three independent 0->0 Brownian bridges plus a linear part in the
    first component. ``points`` holds revealed component values, sorted by s.
    """

    length: float
    endval: float
    points: list = field(default_factory=list)  # (s, (b1, b2, b3))

    def reveal(self, s: float, rng) -> float:
        if s <= 0.0:
            return 0.0
        if s >= self.length:
            return self.endval
        for sj, comps in self.points:
            if sj == s:
                return self._radial(s, comps)
        lo_s, lo_v = 0.0, (0.0, 0.0, 0.0)
        hi_s, hi_v = self.length, (0.0, 0.0, 0.0)
        for sj, comps in self.points:
            if sj < s and sj > lo_s:
                lo_s, lo_v = sj, comps
            elif sj > s and sj < hi_s:
                hi_s, hi_v = sj, comps
        mean, var = _cond_moments(s, lo_s, np.asarray(lo_v), hi_s, np.asarray(hi_v))
        comps = tuple(mean + math.sqrt(max(var, 0.0)) * rng.standard_normal(3))
        self.points.append((s, comps))
        self.points.sort(key=lambda p: p[0])
        return self._radial(s, comps)

    def _radial(self, s, comps):
        b1, b2, b3 = comps
        lin = self.endval * s / self.length
        return math.sqrt((lin + b1) ** 2 + b2**2 + b3**2)


@dataclass
class BridgeSkeleton:
    """Progressively revealed Brownian bridge from start to end over [0, duration].

    ``known_points`` holds interior revealed points (t, value), strictly
    increasing in t. Once a minimum (min_value, min_time) is recorded, all
    further interior points are drawn from the minimum-conditioned law and
    satisfy value >= min_value.
    """

    start: float
    end: float
    duration: float
    known_points: list = field(default_factory=list)
    min_value: float | None = None
    min_time: float | None = None
    _segments: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.duration) or self.duration <= 0:
            raise ValueError(f"duration must be finite and > 0, got {self.duration}")

    def value_at(self, t: float):
        """Already-determined value at t, or None if not yet revealed."""
        if t == 0.0:
            return self.start
        if t == self.duration:
            return self.end
        if self.min_time is not None and t == self.min_time:
            return self.min_value
        for tj, vj in self.known_points:
            if tj == t:
                return vj
        return None

    def record_minimum(self, m: float, t_min: float) -> None:
        if self.known_points:
            raise ValueError("minimum must be recorded before interior points")
        if self.min_value is not None:
            raise ValueError("minimum already recorded")
        if m > min(self.start, self.end):
            raise ValueError("minimum above an endpoint")
        if not 0.0 < t_min < self.duration:
            raise ValueError("minimum time outside (0, duration)")
        self.min_value = float(m)
        self.min_time = float(t_min)
        left = _BesselSegment(length=t_min, endval=self.start - m)
        right = _BesselSegment(length=self.duration - t_min, endval=self.end - m)
        self._segments = (left, right)

    def _insert(self, t: float, value: float) -> None:
        self.known_points.append((t, value))
        self.known_points.sort(key=lambda p: p[0])


def bridge_interpolate(skeleton: BridgeSkeleton, t: float, rng) -> float:
    """Reveal the bridge at t, conditionally on all earlier revelations.

    The point is inserted into the skeleton, so repeated and out-of-order
    queries stay mutually consistent. Requires a skeleton without a
    recorded minimum (those use :func:`sample_bessel_bridge_point`).
    """
    if skeleton.min_value is not None:
        raise ValueError("skeleton carries a minimum; use sample_bessel_bridge_point")
    if not 0.0 <= t <= skeleton.duration:
        raise ValueError(f"t={t} outside [0, {skeleton.duration}]")
    known = skeleton.value_at(t)
    if known is not None:
        return known
    lo_t, lo_v = 0.0, skeleton.start
    hi_t, hi_v = skeleton.duration, skeleton.end
    for tj, vj in skeleton.known_points:
        if lo_t < tj < t:
            lo_t, lo_v = tj, vj
        elif t < tj < hi_t:
            hi_t, hi_v = tj, vj
    mean, var = _cond_moments(t, lo_t, lo_v, hi_t, hi_v)
    value = mean + math.sqrt(max(var, 0.0)) * rng.standard_normal()
    skeleton._insert(t, value)
    return value


def sample_bridge_minimum(x: float, y: float, delta: float, rng) -> tuple[float, float]:
    """Joint draw of (minimum, argmin time) of a Brownian bridge x -> y on [0, delta].

    The minimum is drawn by inverting the reflection-principle CDF
    P(min <= m) = exp(-2 (x-m)(y-m) / delta); the argmin given the minimum
    is the documented two-component inverse-Gaussian mixture.
    """
    if not np.isfinite(delta) or delta <= 0:
        raise ValueError(f"delta must be finite and > 0, got {delta}")
    e = rng.exponential()
    m = 0.5 * (x + y - math.sqrt((x - y) ** 2 + 2.0 * delta * e))
    a = x - m
    b = y - m
    if rng.random() < a / (a + b):
        u = rng.wald(b / a, b * b / delta)
    else:
        u = 1.0 / rng.wald(a / b, a * a / delta)
    t_min = delta / (1.0 + u)
    return m, t_min


def sample_bridge_minimum_batch(x, y, delta, rng):
    """Vectorized :func:`sample_bridge_minimum`; x, y are arrays."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    e = rng.exponential(size=x.shape)
    m = 0.5 * (x + y - np.sqrt((x - y) ** 2 + 2.0 * delta * e))
    a = np.maximum(x - m, 1e-300)
    b = np.maximum(y - m, 1e-300)
    pick = rng.random(size=x.shape) < a / (a + b)
    u_lo = rng.wald(b / a, b * b / delta)
    u_hi = 1.0 / rng.wald(a / b, a * a / delta)
    u = np.where(pick, u_lo, u_hi)
    t_min = delta / (1.0 + u)
    return m, t_min


def sample_bessel_bridge_point(skeleton: BridgeSkeleton, t: float, rng) -> float:
    """Reveal the minimum-conditioned bridge at t; always >= the recorded minimum.

    The bridge conditioned on (min, argmin) = (m, t_min) splits into two
    independent 3-d Bessel bridges run away from the minimum: one over
    [t_min, duration] toward end - m, one over [0, t_min] (in reversed
    time) toward start - m.
    """
    if skeleton.min_value is None:
        raise ValueError("skeleton has no recorded minimum")
    if not 0.0 <= t <= skeleton.duration:
        raise ValueError(f"t={t} outside [0, {skeleton.duration}]")
    known = skeleton.value_at(t)
    if known is not None:
        return known
    left, right = skeleton._segments
    if t < skeleton.min_time:
        value = skeleton.min_value + left.reveal(skeleton.min_time - t, rng)
    else:
        value = skeleton.min_value + right.reveal(t - skeleton.min_time, rng)
    skeleton._insert(t, value)
    return value


def sequential_bridge_batch(start, end, duration, times, mask, rng):
    """Reveal many independent Brownian bridges at per-row time sets, batched.

    start, end, duration: scalars or (B,) arrays; times, mask: (B, K) with
    mask marking valid entries. Each row's active times are visited in
    increasing order and drawn from the exact conditional law given the
    previously revealed points of that row.

    Returns (values, sorted_times, sorted_mask), all (B, K), aligned to the
    per-row ascending time order (padded cells carry arbitrary values and
    inf times). Row order of factors is immaterial to the callers, which
    only form symmetric products over the revealed points.
    """
    times = np.asarray(times, dtype=float)
    B, K = times.shape
    start = np.broadcast_to(np.asarray(start, dtype=float), (B,))
    end = np.broadcast_to(np.asarray(end, dtype=float), (B,))
    duration = np.broadcast_to(np.asarray(duration, dtype=float), (B,))
    key = np.where(mask, times, np.inf)
    order = np.argsort(key, axis=1)
    ts = np.take_along_axis(key, order, axis=1)
    ms = np.take_along_axis(np.asarray(mask, dtype=bool), order, axis=1)
    values = np.empty((B, K), dtype=float)
    prev_t = np.zeros(B)
    prev_v = start.astype(float).copy()
    for j in range(K):
        act = ms[:, j]
        t = np.where(act, ts[:, j], prev_t)
        denom = np.maximum(duration - prev_t, 1e-300)
        frac = (t - prev_t) / denom
        mean = prev_v + frac * (end - prev_v)
        var = (t - prev_t) * (duration - t) / denom
        z = rng.standard_normal(B)
        v = mean + np.sqrt(np.maximum(var, 0.0)) * z
        values[:, j] = v
        prev_t = np.where(act, t, prev_t)
        prev_v = np.where(act, v, prev_v)
    return values, ts, ms
