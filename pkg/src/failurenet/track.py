"""Track geometry: routes, the built-in intersection map, and centerline edits.

Coordinates are metric, world frame. Routes are dense polylines; closed
routes wrap (the last point connects back to the first). Lane centerlines
follow right-hand traffic, offset half a lane width from the road axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    w = a % TWO_PI
    if w > math.pi:
        w -= TWO_PI
    return w


def straight_points(p0, p1, spacing: float) -> np.ndarray:
    """Sample a segment from p0 to p1 at roughly `spacing`, endpoints included."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    length = float(np.hypot(*(p1 - p0)))
    n = max(1, int(math.ceil(length / spacing)))
    ts = np.linspace(0.0, 1.0, n + 1)
    return p0[None, :] + ts[:, None] * (p1 - p0)[None, :]


def arc_points(center, radius: float, a0: float, a1: float, spacing: float) -> np.ndarray:
    """Sample a circular arc from angle a0 to a1 (radians, signed sweep)."""
    center = np.asarray(center, dtype=float)
    sweep = a1 - a0
    length = abs(sweep) * radius
    n = max(2, int(math.ceil(length / spacing)))
    angles = a0 + np.linspace(0.0, 1.0, n + 1) * sweep
    return center[None, :] + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def chain(*pieces: np.ndarray, closed: bool = False, tol: float = 1e-9) -> np.ndarray:
    """Join sampled pieces end to start, dropping duplicated junction points."""
    out = [pieces[0]]
    for piece in pieces[1:]:
        prev_end = out[-1][-1]
        if np.allclose(piece[0], prev_end, atol=1e-6):
            piece = piece[1:]
        out.append(piece)
    pts = np.concatenate(out, axis=0)
    if closed and np.allclose(pts[0], pts[-1], atol=1e-6):
        pts = pts[:-1]
    diffs = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(diffs < tol):
        raise ValueError("degenerate polyline: repeated consecutive waypoints")
    return pts


@dataclass
class Route:
    """A directed polyline a vehicle can track.

    points has shape (N, 2) and omits the closing duplicate for loops.
    """

    name: str
    points: np.ndarray
    closed: bool = True
    _seg_a: np.ndarray = field(init=False, repr=False)
    _seg_d: np.ndarray = field(init=False, repr=False)
    _seg_len: np.ndarray = field(init=False, repr=False)
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"route {self.name!r} needs at least 2 waypoints, got shape {pts.shape}")
        self.points = pts
        a = pts
        b = np.roll(pts, -1, axis=0) if self.closed else pts[1:]
        if not self.closed:
            a = pts[:-1]
        d = b - a
        seg_len = np.linalg.norm(d, axis=1)
        if np.any(seg_len < 1e-9):
            raise ValueError(f"route {self.name!r} has zero-length segments")
        self._seg_a = a
        self._seg_d = d
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def _locate(self, s: float) -> tuple[int, float]:
        if self.closed:
            s = s % self.length
        else:
            s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._seg_len) - 1)
        frac = (s - self._cum[i]) / self._seg_len[i]
        return i, frac

    def point_at(self, s: float) -> np.ndarray:
        i, frac = self._locate(s)
        return self._seg_a[i] + frac * self._seg_d[i]

    def heading_at(self, s: float) -> float:
        i, _ = self._locate(s)
        d = self._seg_d[i]
        return math.atan2(d[1], d[0])

    def project(self, xy) -> tuple[float, float, float]:
        """Project a point onto the route.

        Returns (arc length of the foot point, signed lateral offset with
        left-of-travel positive, unsigned distance).
        """
        xy = np.asarray(xy, dtype=float)
        rel = xy[None, :] - self._seg_a
        t = np.einsum("ij,ij->i", rel, self._seg_d) / (self._seg_len**2)
        t = np.clip(t, 0.0, 1.0)
        foot = self._seg_a + t[:, None] * self._seg_d
        dist2 = np.einsum("ij,ij->i", xy[None, :] - foot, xy[None, :] - foot)
        i = int(np.argmin(dist2))
        s = float(self._cum[i] + t[i] * self._seg_len[i])
        v = xy - foot[i]
        d = self._seg_d[i]
        lateral = float((d[0] * v[1] - d[1] * v[0]) / self._seg_len[i])
        return s, lateral, float(math.sqrt(dist2[i]))

    def curvature_flat(self, s: float, span: float = 0.3, tol: float = 0.02) -> bool:
        """True when the heading change across [s-span, s+span] stays below tol."""
        h0 = self.heading_at(s - span)
        h1 = self.heading_at(s + span)
        return abs(wrap_angle(h1 - h0)) < tol


def shift_centerline(points: np.ndarray, shift: float, closed: bool = True) -> np.ndarray:
    """Displace every waypoint by `shift` along the local left normal.

    The local direction at a waypoint is the normalized average of its
    adjacent segment directions (wrapping for closed routes).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError(f"polyline must have shape (N>=2, 2), got {pts.shape}")
    if shift == 0.0:
        return pts.copy()
    if closed:
        nxt = np.roll(pts, -1, axis=0)
        prv = np.roll(pts, 1, axis=0)
        d_out = nxt - pts
        d_in = pts - prv
    else:
        d_seg = np.diff(pts, axis=0)
        d_out = np.vstack([d_seg, d_seg[-1]])
        d_in = np.vstack([d_seg[0], d_seg])
    for d in (d_out, d_in):
        norms = np.linalg.norm(d, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("degenerate polyline: repeated consecutive waypoints")
        d /= norms[:, None]
    avg = d_out + d_in
    norms = np.linalg.norm(avg, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate polyline: 180 degree reversal at a waypoint")
    avg /= norms[:, None]
    # left normal of direction (dx, dy) is (-dy, dx)
    normals = np.stack([-avg[:, 1], avg[:, 0]], axis=1)
    return pts + shift * normals


@dataclass
class TrackMap:
    """The drivable map: named routes plus intersection geometry."""

    routes: dict[str, Route]
    lane_width: float
    intersection_center: np.ndarray
    mask_radius: float
    enter_radius: float
    half_size: float

    def __post_init__(self) -> None:
        self.intersection_center = np.asarray(self.intersection_center, dtype=float)
        if not (0.0 < self.mask_radius < self.enter_radius):
            raise ValueError(
                f"need 0 < mask_radius < enter_radius, got {self.mask_radius} vs {self.enter_radius}"
            )
        if not self.routes:
            raise ValueError("map has no routes")
        for route in self.routes.values():
            d = np.linalg.norm(route.points - self.intersection_center[None, :], axis=1)
            if float(d.min()) > self.mask_radius:
                raise ValueError(f"route {route.name!r} never enters the intersection mask zone")

    def distance_to_center(self, xy) -> float:
        xy = np.asarray(xy, dtype=float)
        return float(np.hypot(*(xy - self.intersection_center)))

    def zone_of(self, xy) -> str:
        d = self.distance_to_center(xy)
        if d <= self.mask_radius:
            return "masked"
        if d <= self.enter_radius:
            return "approaching"
        return "outside"

    def in_bounds(self, xy) -> bool:
        xy = np.asarray(xy, dtype=float)
        return bool(np.all(np.abs(xy) <= self.half_size))


def build_default_map(
    lane_width: float = 0.3,
    mask_radius: float = 0.5,
    enter_radius: float = 1.5,
    half_size: float = 2.0,
    spacing: float = 0.05,
) -> TrackMap:
    """One four-way intersection at the origin inside a square block.

    Four closed loops, all right-hand traffic, all passing through the
    intersection: two straight-through loops (east-west and south-north),
    one with a right turn at the intersection, one with a left turn.
    Corner radii stay above the minimum turn radius of the vehicle model.
    """
    off = lane_width / 2.0  # lane centerline offset from road axis
    rc = 0.7  # ring corner radius
    rr = 0.65  # intersection right turn radius
    rl = 0.9  # intersection left turn radius
    edge = 1.85  # ring lane coordinate
    top = 1.15  # through-straight half extent

    def quarter(center, r, a0, a1):
        return arc_points(center, r, a0, a1, spacing)

    # Clockwise loop through the intersection eastbound, returning on the south ring.
    through_ew = chain(
        straight_points((-top, -off), (top, -off), spacing),
        quarter((top, -(off + rc)), rc, math.pi / 2, 0.0),
        straight_points((edge, -(off + rc)), (edge, -1.0), spacing),
        quarter((top, -1.0), rc, 0.0, -math.pi / 2),
        straight_points((top, -1.7), (-top, -1.7), spacing),
        quarter((-top, -1.0), rc, -math.pi / 2, -math.pi),
        straight_points((-edge, -1.0), (-edge, -(off + rc)), spacing),
        quarter((-top, -(off + rc)), rc, math.pi, math.pi / 2),
        closed=True,
    )

    # Same loop rotated +90 degrees: northbound through the intersection.
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    through_sn = through_ew @ rot.T

    # Small clockwise loop: eastbound approach, right turn at the intersection,
    # back around the south-west ring.
    right_sw = chain(
        straight_points((-top, -off), (-(off + rr), -off), spacing),
        quarter((-(off + rr), -(off + rr)), rr, math.pi / 2, 0.0),
        straight_points((-off, -(off + rr)), (-off, -1.0), spacing),
        quarter((-(off + rc), -1.0), rc, 0.0, -math.pi / 2),
        straight_points((-(off + rc), -1.7), (-top, -1.7), spacing),
        quarter((-top, -1.0), rc, -math.pi / 2, -math.pi),
        straight_points((-edge, -1.0), (-edge, -(off + rc)), spacing),
        quarter((-top, -(off + rc)), rc, math.pi, math.pi / 2),
        closed=True,
    )

    # Large loop: eastbound approach, left turn at the intersection onto the
    # northbound lane, clockwise around the east and south rings.
    left_ne = chain(
        straight_points((-top, -off), ((off - rl), -off), spacing),
        quarter(((off - rl), (rl - off)), rl, -math.pi / 2, 0.0),
        straight_points((off, (rl - off)), (off, 1.0), spacing),
        quarter(((off + rc), 1.0), rc, math.pi, math.pi / 2),
        straight_points(((off + rc), 1.7), (top, 1.7), spacing),
        quarter((top, 1.0), rc, math.pi / 2, 0.0),
        straight_points((edge, 1.0), (edge, -1.0), spacing),
        quarter((top, -1.0), rc, 0.0, -math.pi / 2),
        straight_points((top, -1.7), (-top, -1.7), spacing),
        quarter((-top, -1.0), rc, -math.pi / 2, -math.pi),
        straight_points((-edge, -1.0), (-edge, -(off + rc)), spacing),
        quarter((-top, -(off + rc)), rc, math.pi, math.pi / 2),
        closed=True,
    )

    routes = {
        "through_ew": Route("through_ew", through_ew),
        "through_sn": Route("through_sn", through_sn),
        "right_sw": Route("right_sw", right_sw),
        "left_ne": Route("left_ne", left_ne),
    }
    return TrackMap(
        routes=routes,
        lane_width=lane_width,
        intersection_center=np.zeros(2),
        mask_radius=mask_radius,
        enter_radius=enter_radius,
        half_size=half_size,
    )
