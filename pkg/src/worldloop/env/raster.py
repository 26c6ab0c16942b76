"""Ego-centric top-down rasterizer.

Heading-up view: ahead is up. Lane boundaries are solid, the centerline is
dashed with the dash phase fixed in world arclength, so ego motion shifts
the dashes between consecutive frames and speed stays visually
recoverable. Anti-aliased capsule coverage composed with max(), which is
order independent, hence deterministic.
"""

from __future__ import annotations

import numpy as np

from .config import EnvConfig
from .geometry import Track, project
from .vehicle import EgoState


def render(state: EgoState, track: Track, cfg: EnvConfig | None = None) -> np.ndarray:
    cfg = cfg or EnvConfig()
    size = cfg.frame_size
    mpp = cfg.m_per_px
    col0 = (size - 1) / 2.0
    row0 = cfg.ego_row

    s_ego, _ = project(track, state.x, state.y, state.s)
    ahead = (row0 + 2.0) * mpp + 2.0
    behind = (size - row0 + 2.0) * mpp + 2.0
    ds = 0.9 * mpp
    s_lo = max(0.0, s_ego - behind)
    s_hi = min(track.total_length, s_ego + ahead)
    n = max(2, int(np.ceil((s_hi - s_lo) / ds)) + 1)
    svals = np.linspace(s_lo, s_hi, n)

    cx, cy, ch = track.pose_many(svals)
    nx, ny = -np.sin(ch), np.cos(ch)  # left normal of the centerline

    hc, hs = np.cos(state.heading), np.sin(state.heading)

    def to_pixels(px, py):
        dx, dy = px - state.x, py - state.y
        fwd = dx * hc + dy * hs
        left = -dx * hs + dy * hc
        return row0 - fwd / mpp, col0 - left / mpp

    img = np.zeros((size, size))
    w = track.lane_half_width
    mids = 0.5 * (svals[:-1] + svals[1:])
    dash_on = (mids % track.dash_period) < (track.dash_duty * track.dash_period)
    for lateral, mask in ((w, None), (-w, None), (0.0, dash_on)):
        rows, cols = to_pixels(cx + lateral * nx, cy + lateral * ny)
        _draw_polyline(img, rows, cols, mask, cfg.line_half_width_px)
    return np.clip(img, 0.0, 1.0)


def _draw_polyline(img, rows, cols, segment_mask, half_width):
    """Composite anti-aliased segments between consecutive points."""
    size = img.shape[0]
    r0, c0 = rows[:-1], cols[:-1]
    r1, c1 = rows[1:], cols[1:]
    keep = (
        (np.minimum(r0, r1) < size + 2)
        & (np.maximum(r0, r1) > -3)
        & (np.minimum(c0, c1) < size + 2)
        & (np.maximum(c0, c1) > -3)
    )
    if segment_mask is not None:
        keep &= segment_mask
    if not keep.any():
        return
    r0, c0, r1, c1 = r0[keep], c0[keep], r1[keep], c1[keep]
    k = r0.size

    # fixed window around each segment midpoint; segments are ~1 px long
    reach = 3
    win = 2 * reach + 1
    ar = np.floor(0.5 * (r0 + r1)).astype(np.int64) - reach
    ac = np.floor(0.5 * (c0 + c1)).astype(np.int64) - reach
    off = np.arange(win)
    pr = ar[:, None, None] + off[None, :, None]  # (k, win, 1)
    pc = ac[:, None, None] + off[None, None, :]  # (k, 1, win)

    # distance from each window pixel to the segment
    dr = (r1 - r0)[:, None, None]
    dc = (c1 - c0)[:, None, None]
    vr = pr - r0[:, None, None]
    vc = pc - c0[:, None, None]
    denom = dr * dr + dc * dc
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(denom > 0, (vr * dr + vc * dc) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    dist = np.sqrt((vr - t * dr) ** 2 + (vc - t * dc) ** 2)
    cov = np.clip(0.5 + (half_width - dist), 0.0, 1.0)

    pr = np.broadcast_to(pr, (k, win, win)).reshape(-1)
    pc = np.broadcast_to(pc, (k, win, win)).reshape(-1)
    cov = cov.reshape(-1)
    ok = (pr >= 0) & (pr < size) & (pc >= 0) & (pc < size) & (cov > 0)
    np.maximum.at(img, (pr[ok], pc[ok]), cov[ok])
