"""Kinematic bicycle ego vehicle and the scripted expert that drives it."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .. import WorldloopError
from .config import EnvConfig
from .geometry import Track, project


@dataclass(frozen=True)
class ControlSignal:
    """The action: commanded speed (m/s, non-negative magnitude) and steer
    angle (rad, positive = left turn, negative = right turn)."""

    speed: float
    steer: float


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float  # rad, wrapped to (-pi, pi]
    s: float        # m, arclength travelled, non-decreasing


@dataclass(frozen=True)
class StepInfo:
    clamped: bool  # control was outside bounds and got clipped


@dataclass(frozen=True)
class VisionActionPair:
    frame: object          # (H, W) float64 array in [0, 1]
    action: ControlSignal
    t: int                 # timestamp index, consecutive within an episode


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


def step(state: EgoState, control: ControlSignal, dt: float, cfg: EnvConfig | None = None):
    """Advance one step with exact constant-curvature integration.

    Heading rate is (speed / wheelbase) * tan(steer). Out-of-bounds
    controls are clamped and flagged in the returned StepInfo.
    """
    cfg = cfg or EnvConfig()
    if dt <= 0:
        raise ValueError(f"step: dt must be positive, got {dt}")
    v = min(max(control.speed, 0.0), cfg.v_max)
    steer = min(max(control.steer, -cfg.steer_max), cfg.steer_max)
    clamped = (v != control.speed) or (steer != control.steer)
    omega = (v / cfg.wheelbase) * math.tan(steer)
    h = state.heading
    if abs(omega) < 1e-12:
        x = state.x + v * dt * math.cos(h)
        y = state.y + v * dt * math.sin(h)
        h1 = h
    else:
        h1 = h + omega * dt
        radius = v / omega
        x = state.x + (math.sin(h1) - math.sin(h)) * radius
        y = state.y - (math.cos(h1) - math.cos(h)) * radius
    return EgoState(x, y, wrap_angle(h1), state.s + v * dt), StepInfo(clamped)


class OffCorridorError(WorldloopError):
    """Ego left the lane corridor; the episode terminates."""


class ExpertController:
    """Pure-pursuit steering plus curvature-limited, rate-limited speed.

    Keeps two pieces of state between calls: the previous speed command
    (for the rate limit) and the last centerline projection (search hint).
    """

    def __init__(self, track: Track, cfg: EnvConfig | None = None, initial_speed: float = 0.0):
        self.track = track
        self.cfg = cfg or EnvConfig()
        self.prev_speed = float(initial_speed)
        self._s_hint = 0.0

    def action(self, state: EgoState) -> ControlSignal:
        cfg = self.cfg
        s, lateral = project(self.track, state.x, state.y, self._s_hint)
        if abs(lateral) > self.track.lane_half_width:
            raise OffCorridorError(
                f"ego {abs(lateral):.2f} m off centerline exceeds half width "
                f"{self.track.lane_half_width:.2f} m at s={s:.1f}"
            )
        self._s_hint = s

        lookahead = max(cfg.lookahead_min, cfg.lookahead_gain * self.prev_speed)
        tx, ty, _ = self.track.pose(min(s + lookahead, self.track.total_length))
        dx, dy = tx - state.x, ty - state.y
        ch, sh = math.cos(state.heading), math.sin(state.heading)
        fwd = dx * ch + dy * sh
        lat = -dx * sh + dy * ch
        dist = math.hypot(fwd, lat)
        if dist < 1e-9:
            steer = 0.0
        else:
            alpha = math.atan2(lat, fwd)
            steer = math.atan2(2.0 * cfg.wheelbase * math.sin(alpha), dist)
        steer = min(max(steer, -cfg.steer_max), cfg.steer_max)

        # anticipate curves over the braking distance, then rate-limit
        horizon = lookahead + self.prev_speed**2 / (2.0 * cfg.accel_limit)
        k_ahead = self.track.max_abs_curvature(s, s + horizon)
        if k_ahead < 1e-9:
            v_target = cfg.v_max
        else:
            v_target = min(cfg.v_max, math.sqrt(cfg.a_lat_max / k_ahead))
        dv = cfg.accel_limit * cfg.dt
        v_cmd = min(max(v_target, self.prev_speed - dv), self.prev_speed + dv)
        v_cmd = min(max(v_cmd, 0.0), cfg.v_max)
        self.prev_speed = v_cmd
        return ControlSignal(v_cmd, steer)
