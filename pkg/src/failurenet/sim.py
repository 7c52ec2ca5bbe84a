"""Vehicle simulation: kinematic bicycle, pure-pursuit tracking, failure injectors.

A scenario drives one vehicle around a closed route at 50 Hz and records a
trajectory log. Failure modes perturb the command stream (periodic control
noise, speeding, scripted reckless bursts) or the tracked geometry (shifted
lane centerline); everything downstream sees only poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .track import Route, TrackMap, shift_centerline, wrap_angle

__all__ = [
    "FailureMode",
    "Pose",
    "VehicleState",
    "ControlCommand",
    "VehicleParams",
    "ControllerConfig",
    "FailureConfig",
    "TrajectoryLog",
    "step_vehicle",
    "track_control",
    "HoldNoise",
    "periodic_noise",
    "inject_control_failure",
    "speeding_override",
    "RecklessPolicy",
    "run_scenario",
    "write_log",
    "read_log",
    "estimate_lane_offset",
    "shift_centerline",
]


class FailureMode(str, Enum):
    NOMINAL = "nominal"
    PERIODIC = "periodic"
    LANE_SHIFT = "lane_shift"
    SPEEDING = "speeding"
    RECKLESS = "reckless"


FAILURE_MODES = [m for m in FailureMode if m is not FailureMode.NOMINAL]


@dataclass(frozen=True)
class Pose:
    t: float
    x: float
    y: float
    theta: float  # heading, wrapped to (-pi, pi]


@dataclass(frozen=True)
class VehicleState:
    pose: Pose
    v: float  # actual forward speed, m/s
    delta: float  # actual steering angle, rad, left positive


@dataclass(frozen=True)
class ControlCommand:
    v_cmd: float
    delta_cmd: float  # clamping happens in the actuator step, not here


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.26  # m
    delta_max: float = 0.4  # rad
    v_max: float = 0.8  # m/s
    tau: float = 0.2  # first-order actuator time constant, s; 0 = instant


@dataclass(frozen=True)
class ControllerConfig:
    target_speed: float = 0.3  # m/s
    lookahead: float = 0.35  # m


@dataclass(frozen=True)
class FailureConfig:
    """All injector knobs in one place. Only the fields of the chosen mode matter."""

    mode: FailureMode = FailureMode.NOMINAL
    steer_amp: float = 0.15  # rad, amplitude of the periodic steering term
    steer_period: float = 4.0  # s
    speed_hold: float = 2.0  # s, hold time of the piecewise-constant speed term
    speed_lo: float = -0.15  # m/s, lower draw bound for the hold noise
    speed_hi: float = 0.15
    lane_shift: float = 0.1  # m, full shift parameter; centerline moves half of it
    speeding_speed: float = 0.5  # m/s, override target
    reckless_rate: float = 0.3  # bursts per second while idle
    reckless_burst_min: float = 0.5  # s
    reckless_burst_max: float = 2.0
    reckless_ou_tau: float = 0.5  # s, OU time constant for the steering burst
    reckless_ou_sigma: float = 0.35  # rad / sqrt(s)
    reckless_factor_min: float = 0.4  # speed multiplier draw bounds per burst
    reckless_factor_max: float = 1.8

    def __post_init__(self) -> None:
        if self.speed_lo > self.speed_hi:
            raise ValueError(f"speed noise bounds inverted: [{self.speed_lo}, {self.speed_hi}]")
        if self.steer_period <= 0 or self.speed_hold <= 0:
            raise ValueError("injector periods must be positive")
        if self.lane_shift < 0:
            raise ValueError("lane_shift must be non-negative")
        if self.reckless_burst_min > self.reckless_burst_max:
            raise ValueError("reckless burst bounds inverted")

    @property
    def expected_burst_fraction(self) -> float:
        """Stationary time fraction spent in bursts for the reckless process."""
        mean_burst = 0.5 * (self.reckless_burst_min + self.reckless_burst_max)
        if self.reckless_rate <= 0:
            return 0.0
        return mean_burst / (1.0 / self.reckless_rate + mean_burst)


@dataclass
class TrajectoryLog:
    """One scenario recording at the simulation rate.

    samples has shape (N, 6) with columns (t, x, y, theta, v, delta).
    events holds (t, tag) pairs for mask-zone transitions. truncated marks
    logs cut short because the vehicle left the map.
    """

    vehicle_id: str
    mode: FailureMode
    dt: float
    samples: np.ndarray
    events: list[tuple[float, str]] = field(default_factory=list)
    truncated: bool = False

    @property
    def duration(self) -> float:
        return self.samples.shape[0] * self.dt


def step_vehicle(state: VehicleState, cmd: ControlCommand, dt: float, params: VehicleParams) -> VehicleState:
    """Advance the kinematic bicycle one step.

    Motion integrates the current actuator values (midpoint rule on the
    heading), then the actuators relax toward the command through a
    first-order lag and are clamped to their limits.
    """
    vals = (state.pose.x, state.pose.y, state.pose.theta, state.v, state.delta, cmd.v_cmd, cmd.delta_cmd, dt)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite state or command: state={state}, cmd={cmd}, dt={dt}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")

    omega = state.v / params.wheelbase * math.tan(state.delta)
    theta_mid = state.pose.theta + 0.5 * omega * dt
    x = state.pose.x + state.v * math.cos(theta_mid) * dt
    y = state.pose.y + state.v * math.sin(theta_mid) * dt
    theta = wrap_angle(state.pose.theta + omega * dt)

    if params.tau <= 0.0:
        v, delta = cmd.v_cmd, cmd.delta_cmd
    else:
        alpha = min(dt / params.tau, 1.0)
        v = state.v + (cmd.v_cmd - state.v) * alpha
        delta = state.delta + (cmd.delta_cmd - state.delta) * alpha
    v = min(max(v, 0.0), params.v_max)
    delta = min(max(delta, -params.delta_max), params.delta_max)

    return VehicleState(pose=Pose(state.pose.t + dt, x, y, theta), v=v, delta=delta)


def track_control(state: VehicleState, route: Route, cfg: ControllerConfig, params: VehicleParams) -> ControlCommand:
    """Pure pursuit: steer at the point `lookahead` ahead of the projection.

    Positive steering turns left. A vehicle offset to the left of the route
    therefore receives a negative (rightward) command. Open routes command
    zero speed once the projection reaches the end.
    """
    s, _, _ = route.project((state.pose.x, state.pose.y))
    if not route.closed and s >= route.length - 1e-9:
        return ControlCommand(0.0, 0.0)
    target = route.point_at(s + cfg.lookahead)
    dx = target[0] - state.pose.x
    dy = target[1] - state.pose.y
    ct, st = math.cos(state.pose.theta), math.sin(state.pose.theta)
    lx = ct * dx + st * dy  # target in the vehicle frame
    ly = -st * dx + ct * dy
    alpha = math.atan2(ly, lx)
    ld = math.hypot(dx, dy)
    if ld < 1e-9:
        return ControlCommand(cfg.target_speed, 0.0)
    delta_cmd = math.atan2(2.0 * params.wheelbase * math.sin(alpha), ld)
    return ControlCommand(cfg.target_speed, delta_cmd)


class HoldNoise:
    """Piecewise-constant draws from U[lo, hi], changing every `period` seconds.

    Values are drawn lazily but indexed by hold slot, so the sequence is a
    pure function of the seed regardless of query pattern.
    """

    def __init__(self, lo: float, hi: float, period: float, rng: np.random.Generator):
        self.lo = lo
        self.hi = hi
        self.period = period
        self._rng = rng
        self._values: list[float] = []

    def value(self, t: float) -> float:
        k = int(math.floor(t / self.period + 1e-9))
        while len(self._values) <= k:
            self._values.append(float(self._rng.uniform(self.lo, self.hi)))
        return self._values[k]


def periodic_noise(t: float, cfg: FailureConfig, hold: HoldNoise) -> tuple[float, float]:
    """The periodic control fault terms: (steering offset, speed offset) at time t."""
    eps_delta = cfg.steer_amp * math.sin(2.0 * math.pi * t / cfg.steer_period)
    eps_v = hold.value(t)
    return eps_delta, eps_v


def inject_control_failure(cmd: ControlCommand, eps_delta: float, eps_v: float) -> ControlCommand:
    return ControlCommand(cmd.v_cmd + eps_v, cmd.delta_cmd + eps_delta)


def speeding_override(cmd: ControlCommand, cfg: FailureConfig) -> ControlCommand:
    """Speeding touches only the speed target; steering passes through."""
    return ControlCommand(cfg.speeding_speed, cmd.delta_cmd)


class RecklessPolicy:
    """Scripted stand-in for a human driving erratically on purpose.

    An alternating renewal process: idle gaps are exponential with the
    configured rate, bursts last U[min, max] seconds. During a burst the
    steering command gets an Ornstein-Uhlenbeck perturbation and the speed
    command is multiplied by a per-burst factor. Fully reproducible from
    the generator passed in.
    """

    def __init__(self, cfg: FailureConfig, rng: np.random.Generator):
        self.cfg = cfg
        self._rng = rng
        self._burst_end = -1.0
        self._factor = 1.0
        self._ou = 0.0
        self.steps_total = 0
        self.steps_in_burst = 0

    def in_burst(self, t: float) -> bool:
        return t < self._burst_end

    def apply(self, t: float, dt: float, cmd: ControlCommand) -> ControlCommand:
        self.steps_total += 1
        if not self.in_burst(t):
            p_start = 1.0 - math.exp(-self.cfg.reckless_rate * dt)
            if self._rng.uniform() < p_start:
                self._burst_end = t + self._rng.uniform(self.cfg.reckless_burst_min, self.cfg.reckless_burst_max)
                self._factor = self._rng.uniform(self.cfg.reckless_factor_min, self.cfg.reckless_factor_max)
                self._ou = 0.0
        if not self.in_burst(t):
            return cmd
        self.steps_in_burst += 1
        tau = self.cfg.reckless_ou_tau
        sig = self.cfg.reckless_ou_sigma
        self._ou += (-self._ou / tau) * dt + sig * math.sqrt(dt) * self._rng.standard_normal()
        return ControlCommand(cmd.v_cmd * self._factor, cmd.delta_cmd + self._ou)

    @property
    def burst_fraction(self) -> float:
        return self.steps_in_burst / self.steps_total if self.steps_total else 0.0


def run_scenario(
    track_map: TrackMap,
    cfg: FailureConfig,
    duration: float,
    seed: int,
    route_name: str | None = None,
    params: VehicleParams = VehicleParams(),
    ctrl: ControllerConfig = ControllerConfig(),
    dt: float = 0.02,
    vehicle_id: str = "veh0",
) -> TrajectoryLog:
    """Drive one vehicle for `duration` seconds and record every step.

    The route is a seeded choice among the map's routes unless named. Under
    LANE_SHIFT the tracked centerline is displaced by half the configured
    shift along the left normal; the log still reports world-frame poses.
    Leaving the map bounds truncates the log and flags it.
    """
    rng = np.random.default_rng(seed)
    names = sorted(track_map.routes)
    if route_name is None:
        route_name = names[int(rng.integers(len(names)))]
    route = track_map.routes[route_name]
    if cfg.mode is FailureMode.LANE_SHIFT and cfg.lane_shift > 0.0:
        shifted = shift_centerline(route.points, cfg.lane_shift / 2.0, closed=route.closed)
        route = Route(route.name + "+shift", shifted, closed=route.closed)

    start = route.point_at(0.0)
    state = VehicleState(
        pose=Pose(0.0, float(start[0]), float(start[1]), route.heading_at(0.0)),
        v=ctrl.target_speed,
        delta=0.0,
    )
    hold = HoldNoise(cfg.speed_lo, cfg.speed_hi, cfg.speed_hold, rng)
    reckless = RecklessPolicy(cfg, rng)

    n_steps = int(round(duration / dt))
    samples = np.empty((n_steps, 6), dtype=float)
    events: list[tuple[float, str]] = []
    truncated = False
    in_mask = track_map.zone_of((state.pose.x, state.pose.y)) == "masked"

    n_written = 0
    for i in range(n_steps):
        t = i * dt
        xy = (state.pose.x, state.pose.y)
        if not track_map.in_bounds(xy):
            truncated = True
            break
        masked_now = track_map.zone_of(xy) == "masked"
        if masked_now != in_mask:
            events.append((t, "entered_mask" if masked_now else "exited_mask"))
            in_mask = masked_now
        samples[i] = (t, state.pose.x, state.pose.y, state.pose.theta, state.v, state.delta)
        n_written = i + 1

        cmd = track_control(state, route, ctrl, params)
        if cfg.mode is FailureMode.PERIODIC:
            eps_d, eps_v = periodic_noise(t, cfg, hold)
            cmd = inject_control_failure(cmd, eps_d, eps_v)
        elif cfg.mode is FailureMode.SPEEDING:
            cmd = speeding_override(cmd, cfg)
        elif cfg.mode is FailureMode.RECKLESS:
            cmd = reckless.apply(t, dt, cmd)
        state = step_vehicle(state, cmd, dt, params)

    return TrajectoryLog(
        vehicle_id=vehicle_id,
        mode=cfg.mode,
        dt=dt,
        samples=samples[:n_written],
        events=events,
        truncated=truncated,
    )


LOG_HEADER = "t,x,y,theta,v,delta,mode,vehicle_id"


def write_log(path: str | Path, log: TrajectoryLog) -> Path:
    """Columnar text format, one row per integration sample, 9 significant digits."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(LOG_HEADER + "\n")
        mode = log.mode.value
        vid = log.vehicle_id
        for row in log.samples:
            fields = ",".join(f"{v:.9g}" for v in row)
            fh.write(f"{fields},{mode},{vid}\n")
    return path


def read_log(path: str | Path) -> TrajectoryLog:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise ValueError(f"{path}: unexpected log header {header!r}")
        rows = []
        mode = FailureMode.NOMINAL
        vid = "veh0"
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}: malformed row {line!r}")
            rows.append([float(v) for v in parts[:6]])
            mode = FailureMode(parts[6])
            vid = parts[7]
    if not rows:
        raise ValueError(f"{path}: log has no samples")
    samples = np.asarray(rows, dtype=float)
    dts = np.diff(samples[:, 0])
    dt = float(dts[0]) if len(dts) else 0.02
    return TrajectoryLog(vehicle_id=vid, mode=mode, dt=dt, samples=samples)


def estimate_lane_offset(log: TrajectoryLog, reference: Route, span: float = 0.3, tol: float = 0.02) -> float:
    """Mean signed lateral offset from a reference route over its straight parts.

    Left of travel is positive. Samples whose projection falls on curved
    sections of the reference are ignored.
    """
    offsets = []
    for row in log.samples:
        s, lateral, _ = reference.project(row[1:3])
        if reference.curvature_flat(s, span=span, tol=tol):
            offsets.append(lateral)
    if not offsets:
        raise ValueError("no straight-segment samples to estimate an offset from")
    return float(np.mean(offsets))
