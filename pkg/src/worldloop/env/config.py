"""Synthetic driving world constants. Every default is documented here and
overridable from the run config file."""

from dataclasses import dataclass


@dataclass(frozen=True)
class EnvConfig:
    # vehicle
    v_max: float = 15.0            # m/s, commanded speed ceiling
    steer_max: float = 0.5         # rad, |steer| ceiling, positive = left
    wheelbase: float = 2.5         # m, bicycle-model wheelbase
    dt: float = 0.25               # s, keyframe period (4 Hz)

    # track generation
    track_min_length: float = 400.0  # m, generation stops past this
    straight_min: float = 18.0       # m, straight segment length range
    straight_max: float = 50.0
    arc_angle_min: float = 0.5       # rad, arc subtended angle range
    arc_angle_max: float = 1.8
    curvature_lo: float = 0.25       # arc |curvature| as fraction of the drivable bound
    curvature_hi: float = 0.80
    arc_probability: float = 1.0     # chance a straight is followed by an arc
    lane_half_width: float = 2.0     # m
    dash_period: float = 4.0         # m, centerline dash cycle in world arclength
    dash_duty: float = 0.5           # fraction of the cycle that is painted

    # expert controller
    a_lat_max: float = 2.0           # m/s^2, comfort bound setting curve speed
    accel_limit: float = 1.5         # m/s per second, speed command rate limit
    lookahead_min: float = 4.0       # m
    lookahead_gain: float = 0.8      # s, lookahead = max(min, gain * speed)

    # rasterizer
    frame_size: int = 64             # px, square frames
    m_per_px: float = 0.75           # world metres per pixel
    ego_row: float = 48.0            # px row of the ego (3/4 down: mostly look-ahead)
    line_half_width_px: float = 0.55 # half width of painted lines, px

    # episode
    start_offset: float = 5.0        # m, ego spawn arclength

    @property
    def drivable_curvature(self) -> float:
        """Upper |curvature| bound the vehicle can follow at full lock."""
        import math

        return math.tan(self.steer_max) / self.wheelbase
