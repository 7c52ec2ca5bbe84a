"""Live intersection manager.

Listens on a TCP endpoint for newline-terminated ASCII messages, keeps a
ring buffer of the most recent L poses per vehicle, runs the loaded
detector on each full buffer once per evaluation tick, and sends warnings
to every other vehicle inside the approach annulus when a buffer scores
above the warning threshold. Vehicles inside the central mask disc are
never evaluated; a buffer below L poses never produces a verdict.

The core state machine (IntersectionManager) is socket-free and driven by
an injectable clock so replays are deterministic; ManagerServer adds the
TCP and wall-clock plumbing.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rnn
from .data import featurize_values, resample_poses
from .sim import FailureConfig, FailureMode, run_scenario
from .track import TrackMap, build_default_map

__all__ = [
    "ProtocolError",
    "parse_message",
    "format_pose",
    "format_warn",
    "format_status",
    "format_err",
    "WarningEvent",
    "VehicleSession",
    "ManagerConfig",
    "IntersectionManager",
    "ManagerServer",
    "ReplayResult",
    "run_replay",
]

ERR_PARSE = 1
ERR_UNKNOWN_COMMAND = 2
ERR_INCOMPATIBLE = 3

SESSION_EXPIRY_S = 10.0


class ProtocolError(Exception):
    def __init__(self, code: int, text: str):
        super().__init__(text)
        self.code = code
        self.text = text


def _parse_float(token: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ProtocolError(ERR_PARSE, f"bad number {token!r}") from None
    if not np.isfinite(value):
        raise ProtocolError(ERR_PARSE, f"non-finite number {token!r}")
    return value


def parse_message(line: str):
    """Parse one wire line into a ("pose", ...) or ("query", id) tuple."""
    parts = line.strip().split()
    if not parts:
        raise ProtocolError(ERR_PARSE, "empty message")
    cmd = parts[0]
    if cmd == "POSE":
        if len(parts) != 6:
            raise ProtocolError(ERR_PARSE, f"POSE needs 5 fields, got {len(parts) - 1}")
        vid = parts[1]
        t, x, y, theta = (_parse_float(p) for p in parts[2:])
        return ("pose", vid, t, x, y, theta)
    if cmd == "QUERY":
        if len(parts) != 2:
            raise ProtocolError(ERR_PARSE, f"QUERY needs 1 field, got {len(parts) - 1}")
        return ("query", parts[1])
    raise ProtocolError(ERR_UNKNOWN_COMMAND, f"unknown command {cmd!r}")


def format_pose(vehicle_id: str, t: float, x: float, y: float, theta: float) -> str:
    return f"POSE {vehicle_id} {t:.17g} {x:.17g} {y:.17g} {theta:.17g}"


def format_warn(target_id: str, offending_id: str, z_hat: float, t: float) -> str:
    return f"WARN {target_id} {offending_id} {z_hat:.17g} {t:.17g}"


def format_status(vehicle_id: str, zone: str, buffer_len: int) -> str:
    return f"STATUS {vehicle_id} {zone} {buffer_len}"


def format_err(code: int, text: str) -> str:
    return f"ERR {code} {text}"


@dataclass(frozen=True)
class WarningEvent:
    target_id: str
    offending_id: str
    z_hat: float
    t: float


@dataclass
class VehicleSession:
    vehicle_id: str
    capacity: int
    buffer: deque = field(default_factory=deque)
    last_verdict: float | None = None
    zone: str = "outside"
    dropped: int = 0
    last_heard: float = 0.0

    def push(self, t: float, x: float, y: float, theta: float) -> bool:
        """Append a pose; non-increasing timestamps are dropped and counted."""
        if self.buffer and t <= self.buffer[-1][0]:
            self.dropped += 1
            return False
        self.buffer.append((t, x, y, theta))
        while len(self.buffer) > self.capacity:
            self.buffer.popleft()
        return True

    def window_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        arr = np.asarray(self.buffer, dtype=np.float64)
        return arr[:, 0], arr[:, 1:4]


@dataclass
class ManagerConfig:
    checkpoint: str | Path
    z_bar: float = 0.5
    host: str = "127.0.0.1"
    port: int = 0
    eval_interval: float = 1.0  # seconds between detector sweeps
    window_len: int | None = None  # must match the checkpoint when given
    track_map: TrackMap | None = None
    event_log: str | Path | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.z_bar < 1.0):
            raise ValueError("warning threshold must be inside (0, 1)")
        if self.eval_interval <= 0:
            raise ValueError("eval interval must be positive")


class IntersectionManager:
    """Socket-free session table plus detector sweep logic.

    The clock is injected (sim time for replays, time.monotonic for the
    live server) and only gates session expiry; verdict and event
    timestamps always come from the pose stream so logs are reproducible.
    """

    def __init__(self, model: rnn.FailureNet, track_map: TrackMap | None = None, z_bar: float = 0.5):
        if not (0.0 < z_bar < 1.0):
            raise ValueError("warning threshold must be inside (0, 1)")
        self.model = model
        self.track_map = track_map if track_map is not None else build_default_map()
        self.z_bar = z_bar
        self.sessions: dict[str, VehicleSession] = {}
        self.event_lines: list[str] = []

    # -- ingestion ---------------------------------------------------------

    def handle_line(self, line: str, now: float) -> list[str]:
        """Process one client line; returns reply lines for that client."""
        try:
            msg = parse_message(line)
        except ProtocolError as exc:
            return [format_err(exc.code, exc.text)]
        if msg[0] == "pose":
            _, vid, t, x, y, theta = msg
            self.ingest_pose(vid, t, x, y, theta, now)
            return []
        _, vid = msg
        session = self.sessions.get(vid)
        if session is None:
            return [format_status(vid, "unknown", 0)]
        return [format_status(vid, session.zone, len(session.buffer))]

    def ingest_pose(self, vid: str, t: float, x: float, y: float, theta: float, now: float) -> VehicleSession:
        session = self.sessions.get(vid)
        if session is None:
            session = VehicleSession(vehicle_id=vid, capacity=self.model.window_len)
            self.sessions[vid] = session
        session.push(t, x, y, theta)
        session.zone = self.track_map.zone_of((x, y))
        session.last_heard = now
        return session

    # -- evaluation --------------------------------------------------------

    def expire_sessions(self, now: float) -> list[str]:
        gone = [vid for vid, s in self.sessions.items() if now - s.last_heard > SESSION_EXPIRY_S]
        for vid in gone:
            del self.sessions[vid]
        return gone

    def evaluate_vehicle(self, session: VehicleSession) -> float | None:
        """z_hat for one session, or None when buffer short or masked."""
        if len(session.buffer) < self.model.window_len:
            return None
        if session.zone == "masked":
            return None
        _, poses = session.window_arrays()
        feats = featurize_values(poses, self.model.feature_mode)
        z_hat = float(rnn.failurenet_forward(self.model, feats))
        session.last_verdict = z_hat
        return z_hat

    def broadcast_warnings(self, verdicts: dict[str, float]) -> list[WarningEvent]:
        """One event per offender per distinct other vehicle in the annulus."""
        events: list[WarningEvent] = []
        for vid, z_hat in verdicts.items():
            if z_hat <= self.z_bar:
                continue
            t_latest = self.sessions[vid].buffer[-1][0]
            for other_id, other in sorted(self.sessions.items()):
                if other_id == vid or other.zone != "approaching":
                    continue
                events.append(WarningEvent(target_id=other_id, offending_id=vid, z_hat=z_hat, t=t_latest))
        return events

    def evaluate_all(self, now: float) -> tuple[dict[str, float], list[WarningEvent]]:
        """One detector sweep: expiry, verdicts, warnings, event log lines."""
        self.expire_sessions(now)
        verdicts: dict[str, float] = {}
        for vid in sorted(self.sessions):
            z_hat = self.evaluate_vehicle(self.sessions[vid])
            if z_hat is not None:
                verdicts[vid] = z_hat
        events = self.broadcast_warnings(verdicts)
        warned_by: dict[str, list[str]] = {vid: [] for vid in verdicts}
        for ev in events:
            warned_by[ev.offending_id].append(ev.target_id)
        if verdicts:
            for vid, z_hat in verdicts.items():
                session = self.sessions[vid]
                t_latest = session.buffer[-1][0]
                targets = ",".join(warned_by[vid]) if warned_by[vid] else "-"
                self.event_lines.append(
                    f"{t_latest:.17g} {vid} {z_hat:.17g} {session.zone} warned:{targets}"
                )
        else:
            self.event_lines.append(f"{now:.3f} - - - warned:-")
        return verdicts, events


class _ClientHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        server: "_InnerServer" = self.server  # type: ignore[assignment]
        for raw in self.rfile:
            try:
                line = raw.decode("ascii")
            except UnicodeDecodeError:
                self._send(format_err(ERR_PARSE, "non-ascii bytes"))
                continue
            if not line.strip():
                continue
            with server.lock:
                replies = server.manager.handle_line(line, server.clock())
                stripped = line.strip().split()
                if stripped and stripped[0] == "POSE" and len(stripped) == 6 and not replies:
                    server.routes[stripped[1]] = self
            for reply in replies:
                self._send(reply)

    def _send(self, line: str) -> None:
        try:
            self.wfile.write((line + "\n").encode("ascii"))
            self.wfile.flush()
        except OSError:
            pass


class _InnerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, manager: IntersectionManager, clock):
        super().__init__(addr, _ClientHandler)
        self.manager = manager
        self.clock = clock
        self.lock = threading.Lock()
        self.routes: dict[str, _ClientHandler] = {}


class ManagerServer:
    """TCP front end: threaded client handling plus a periodic eval sweep."""

    def __init__(self, config: ManagerConfig, model: rnn.FailureNet | None = None):
        self.config = config
        if model is None:
            model = rnn.load_model(config.checkpoint)
        if config.window_len is not None and config.window_len != model.window_len:
            raise RuntimeError(
                f"configured window length {config.window_len} does not match "
                f"checkpoint window length {model.window_len}"
            )
        track_map = config.track_map if config.track_map is not None else build_default_map()
        self.manager = IntersectionManager(model, track_map, config.z_bar)
        try:
            self._server = _InnerServer((config.host, config.port), self.manager, time.monotonic)
        except OSError as exc:
            raise RuntimeError(f"cannot listen on {config.host}:{config.port}: {exc}") from exc
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._log_fh = open(config.event_log, "a") if config.event_log else None
        self._log_lock = threading.Lock()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> "ManagerServer":
        accept = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        sweep = threading.Thread(target=self._sweep_loop, daemon=True)
        self._threads = [accept, sweep]
        for t in self._threads:
            t.start()
        return self

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.config.eval_interval):
            self.sweep()

    def sweep(self) -> list[WarningEvent]:
        """One evaluation pass; also routes WARN lines to connected targets."""
        with self._server.lock:
            n_before = len(self.manager.event_lines)
            _, events = self.manager.evaluate_all(self._server.clock())
            new_lines = self.manager.event_lines[n_before:]
            for ev in events:
                handler = self._server.routes.get(ev.target_id)
                if handler is not None:
                    handler._send(format_warn(ev.target_id, ev.offending_id, ev.z_hat, ev.t))
        if self._log_fh is not None:
            with self._log_lock:
                for line in new_lines:
                    self._log_fh.write(line + "\n")
                self._log_fh.flush()
        return events

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()
        for t in self._threads:
            t.join(timeout=2.0)
        if self._log_fh is not None:
            with self._log_lock:
                self._log_fh.flush()
                self._log_fh.close()
                self._log_fh = None

    def __enter__(self) -> "ManagerServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


# -- deterministic closed-loop replay -----------------------------------------


@dataclass
class ReplayResult:
    """Outcome of one scripted two-vehicle run against the manager."""

    mode: FailureMode
    offender_id: str
    cross_id: str
    offender_verdicts: list[tuple[float, float]]  # (pose time, z_hat)
    cross_verdicts: list[tuple[float, float]]
    # offender windows rescored outside the protocol path; must match
    # offender_verdicts bit for bit when the wire round-trip is lossless
    offline_verdicts: list[tuple[float, float]]
    accuracy: float  # offender verdicts against the mode's expected label
    n_evals: int
    warned_sweeps: int
    verdict_sweeps: int
    warning_rate: float
    events: list[WarningEvent]
    event_lines: list[str]


def run_replay(
    model: rnn.FailureNet,
    mode: FailureMode,
    duration: float = 180.0,
    seed: int = 0,
    track_map: TrackMap | None = None,
    z_bar: float = 0.5,
    ingest_rate: float = 2.0,
    eval_interval: float = 1.0,
    offender_cfg: FailureConfig | None = None,
    offender_route: str = "through_ew",
    cross_route: str = "through_sn",
    offender_id: str = "offender",
    cross_id: str = "cross",
) -> ReplayResult:
    """Drive an offender and a nominal cross-traffic vehicle in sim time.

    Poses stream through the wire format (so parsing is exercised) at
    ingest_rate; the manager sweeps at eval_interval boundaries using the
    simulated clock, which makes the whole run reproducible bit for bit.
    Masked and short-buffer cycles produce no verdict and are excluded
    from the accuracy denominator.
    """
    tm = track_map if track_map is not None else build_default_map()
    cfg = offender_cfg if offender_cfg is not None else FailureConfig(mode=mode)
    if cfg.mode is not mode:
        raise ValueError(f"offender config mode {cfg.mode} conflicts with replay mode {mode}")
    off_log = run_scenario(tm, cfg, duration, seed, route_name=offender_route, vehicle_id=offender_id)
    cross_log = run_scenario(
        tm,
        FailureConfig(mode=FailureMode.NOMINAL),
        duration,
        seed + 1000,
        route_name=cross_route,
        vehicle_id=cross_id,
    )
    off_times, off_poses = resample_poses(off_log, ingest_rate)
    streams = [(float(t), offender_id, p) for t, p in zip(off_times, off_poses)]
    cross_times, cross_poses = resample_poses(cross_log, ingest_rate)
    streams.extend((float(t), cross_id, p) for t, p in zip(cross_times, cross_poses))
    streams.sort(key=lambda item: (item[0], item[1]))

    mgr = IntersectionManager(model, tm, z_bar)
    expected = 0 if mode is FailureMode.NOMINAL else 1
    offender_verdicts: list[tuple[float, float]] = []
    cross_verdicts: list[tuple[float, float]] = []
    all_events: list[WarningEvent] = []
    warned_sweeps = 0
    verdict_sweeps = 0

    cursor = 0
    n_sweeps = int(round(duration / eval_interval))
    for k in range(1, n_sweeps + 1):
        boundary = k * eval_interval
        while cursor < len(streams) and streams[cursor][0] <= boundary + 1e-9:
            t, vid, pose = streams[cursor]
            replies = mgr.handle_line(format_pose(vid, t, pose[0], pose[1], pose[2]), now=t)
            if replies:
                raise RuntimeError(f"replay pose rejected: {replies[0]}")
            cursor += 1
        verdicts, events = mgr.evaluate_all(now=boundary)
        all_events.extend(events)
        if verdicts:
            verdict_sweeps += 1
            if events:
                warned_sweeps += 1
        for vid, z_hat in verdicts.items():
            t_latest = mgr.sessions[vid].buffer[-1][0]
            if vid == offender_id:
                offender_verdicts.append((t_latest, z_hat))
            else:
                cross_verdicts.append((t_latest, z_hat))

    # Rescore each verdict window from the raw resampled stream, bypassing
    # the wire format; %.17g round-trips doubles exactly, so any mismatch
    # means the session ring and the stream disagree about the window.
    off_index = {float(t): i for i, t in enumerate(off_times)}
    window_len = model.window_len
    offline_verdicts: list[tuple[float, float]] = []
    for t_v, _ in offender_verdicts:
        i = off_index[t_v]
        feats = featurize_values(off_poses[i - window_len + 1 : i + 1], model.feature_mode)
        offline_verdicts.append((t_v, float(rnn.failurenet_forward(model, feats))))

    n_evals = len(offender_verdicts)
    correct = sum(1 for _, z in offender_verdicts if (z > 0.5) == bool(expected))
    accuracy = correct / n_evals if n_evals else float("nan")
    warning_rate = warned_sweeps / verdict_sweeps if verdict_sweeps else 0.0
    return ReplayResult(
        mode=mode,
        offender_id=offender_id,
        cross_id=cross_id,
        offender_verdicts=offender_verdicts,
        cross_verdicts=cross_verdicts,
        offline_verdicts=offline_verdicts,
        accuracy=accuracy,
        n_evals=n_evals,
        warned_sweeps=warned_sweeps,
        verdict_sweeps=verdict_sweeps,
        warning_rate=warning_rate,
        events=all_events,
        event_lines=list(mgr.event_lines),
    )
