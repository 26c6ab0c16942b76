"""Track centerline geometry: piecewise straight/arc segments, C1 at joins.

A pose is (x, y, heading); arclength s parametrizes the centerline. All
closed forms, no numerical integration anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import WorldloopError
from .config import EnvConfig


@dataclass(frozen=True)
class Segment:
    length: float     # m, > 0
    curvature: float  # 1/m, 0 = straight, positive = left bend


class Track:
    """Immutable centerline with precomputed segment start poses."""

    def __init__(self, segments, lane_half_width, dash_period, dash_duty, seed):
        self.segments = tuple(segments)
        self.lane_half_width = float(lane_half_width)
        self.dash_period = float(dash_period)
        self.dash_duty = float(dash_duty)
        self.seed = int(seed)
        n = len(self.segments)
        self.starts = np.zeros(n + 1)
        self._x0 = np.zeros(n + 1)
        self._y0 = np.zeros(n + 1)
        self._h0 = np.zeros(n + 1)
        x = y = h = 0.0
        for i, seg in enumerate(self.segments):
            self._x0[i], self._y0[i], self._h0[i] = x, y, h
            x, y, h = _advance(x, y, h, seg.curvature, seg.length)
            self.starts[i + 1] = self.starts[i] + seg.length
        self._x0[n], self._y0[n], self._h0[n] = x, y, h
        self._curv = np.array([s.curvature for s in self.segments])

    @property
    def total_length(self) -> float:
        return float(self.starts[-1])

    def _segment_index(self, s: float) -> int:
        i = int(np.searchsorted(self.starts, s, side="right")) - 1
        return min(max(i, 0), len(self.segments) - 1)

    def pose(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.total_length)
        i = self._segment_index(s)
        ds = s - self.starts[i]
        return _advance(self._x0[i], self._y0[i], self._h0[i], self.segments[i].curvature, ds)

    def pose_many(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized pose lookup (used by the rasterizer)."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.total_length)
        idx = np.clip(np.searchsorted(self.starts, s, side="right") - 1, 0, len(self.segments) - 1)
        ds = s - self.starts[idx]
        k = self._curv[idx]
        x0, y0, h0 = self._x0[idx], self._y0[idx], self._h0[idx]
        h = h0 + k * ds
        straight = k == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.where(straight, x0 + ds * np.cos(h0), x0 + (np.sin(h) - np.sin(h0)) / k)
            y = np.where(straight, y0 + ds * np.sin(h0), y0 - (np.cos(h) - np.cos(h0)) / k)
        return x, y, h

    def curvature_at(self, s: float) -> float:
        return self.segments[self._segment_index(min(max(s, 0.0), self.total_length))].curvature

    def max_abs_curvature(self, s0: float, s1: float) -> float:
        """Largest |curvature| over the arclength interval [s0, s1]."""
        s0 = min(max(s0, 0.0), self.total_length)
        s1 = min(max(s1, 0.0), self.total_length)
        if s1 < s0:
            s0, s1 = s1, s0
        i0 = self._segment_index(s0)
        i1 = self._segment_index(s1)
        return float(max(abs(self.segments[i].curvature) for i in range(i0, i1 + 1)))


def _advance(x, y, h, curvature, ds):
    """Exact pose after ds metres along constant curvature."""
    if curvature == 0.0:
        return x + ds * math.cos(h), y + ds * math.sin(h), h
    h1 = h + curvature * ds
    x1 = x + (math.sin(h1) - math.sin(h)) / curvature
    y1 = y - (math.cos(h1) - math.cos(h)) / curvature
    return x1, y1, h1


def generate_track(seed: int, cfg: EnvConfig | None = None) -> Track:
    """Procedural track: straights alternating with bounded-curvature arcs.

    Deterministic in (seed, cfg). Arc curvature stays within
    ``curvature_hi`` of the drivable bound so the expert can follow it.
    """
    cfg = cfg or EnvConfig()
    rng = np.random.default_rng(np.random.SeedSequence([0x7261636B, seed]))
    k_bound = cfg.drivable_curvature
    segments: list[Segment] = []
    total = 0.0
    sign = 1.0 if rng.random() < 0.5 else -1.0
    while total < cfg.track_min_length:
        s_len = rng.uniform(cfg.straight_min, cfg.straight_max)
        segments.append(Segment(s_len, 0.0))
        total += s_len
        if rng.random() < cfg.arc_probability:
            frac = rng.uniform(cfg.curvature_lo, cfg.curvature_hi)
            angle = rng.uniform(cfg.arc_angle_min, cfg.arc_angle_max)
            k = sign * frac * k_bound
            # mostly alternate bend direction, with a little randomness
            sign = -sign if rng.random() < 0.8 else sign
            segments.append(Segment(angle / abs(k), k))
            total += segments[-1].length
    return Track(segments, cfg.lane_half_width, cfg.dash_period, cfg.dash_duty, seed)


class ProjectionError(WorldloopError):
    pass


def project(track: Track, x: float, y: float, s_hint: float, window: float = 40.0):
    """Nearest centerline point near ``s_hint``: returns (s, lateral).

    ``lateral`` is the signed offset, positive left of the path. Closed
    form per segment (point-line / point-arc), searched over segments
    within ``window`` metres of the hint.
    """
    lo = max(0.0, s_hint - window)
    hi = min(track.total_length, s_hint + window)
    i0 = track._segment_index(lo)
    i1 = track._segment_index(hi)
    best = None
    for i in range(i0, i1 + 1):
        seg = track.segments[i]
        x0, y0, h0 = track._x0[i], track._y0[i], track._h0[i]
        if seg.curvature == 0.0:
            dx, dy = x - x0, y - y0
            cx, sy = math.cos(h0), math.sin(h0)
            t = min(max(dx * cx + dy * sy, 0.0), seg.length)
            px, py = x0 + t * cx, y0 + t * sy
            lateral = cx * (y - py) - sy * (x - px)
            dist = math.hypot(x - px, y - py)
            s_cand = track.starts[i] + t
        else:
            k = seg.curvature
            r = 1.0 / abs(k)
            # center sits 1/k along the left normal of the start pose
            cxc = x0 - math.sin(h0) / k
            cyc = y0 + math.cos(h0) / k
            ang_start = math.atan2(y0 - cyc, x0 - cxc)
            ang_p = math.atan2(y - cyc, x - cxc)
            sweep = k * seg.length  # signed subtended angle
            rel = (ang_p - ang_start) * math.copysign(1.0, k)
            rel = rel % (2 * math.pi)
            rel = min(max(rel, 0.0), abs(sweep)) if rel <= abs(sweep) + math.pi else 0.0
            t = rel * r
            px, py, _ = _advance(x0, y0, h0, k, t)
            d_center = math.hypot(x - cxc, y - cyc)
            lateral = math.copysign(1.0, k) * (r - d_center)
            dist = math.hypot(x - px, y - py)
            s_cand = track.starts[i] + t
        if best is None or dist < best[0]:
            best = (dist, s_cand, lateral)
    if best is None:
        raise ProjectionError("projection window selected no segments")
    return best[1], best[2]
