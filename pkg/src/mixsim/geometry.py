"""Road geometry primitives: polyline centerlines, lanes, and layouts.

Lanes are modeled as full movement paths (approach + turn + exit), so a
vehicle's route is usually a single lane.  All arc lengths are in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Point = tuple[float, float]


class Polyline:
    """Ordered 2-D polyline with cumulative arc length.

    Guarantees: at least two points, consecutive duplicates removed, and
    monotonically increasing cumulative arc length.
    """

    def __init__(self, points) -> None:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("polyline needs an (N,2) array with N >= 2")
        keep = [0]
        for i in range(1, pts.shape[0]):
            if np.hypot(*(pts[i] - pts[keep[-1]])) > 1e-9:
                keep.append(i)
        if len(keep) < 2:
            raise ValueError("polyline is degenerate (all points coincide)")
        self.pts = pts[keep]
        seg = np.diff(self.pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc length s, clamped to the polyline extent."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(i, len(self.seg_len) - 1)
        t = (s - self.cum[i]) / self.seg_len[i]
        return self.pts[i] + t * (self.pts[i + 1] - self.pts[i])

    def tangent_at(self, s: float) -> np.ndarray:
        """Unit tangent of the segment containing arc length s."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        d = self.pts[i + 1] - self.pts[i]
        return d / self.seg_len[i]

    def heading_at(self, s: float) -> float:
        t = self.tangent_at(s)
        return math.atan2(t[1], t[0])

    def project(self, point) -> tuple[float, float]:
        """Project a point onto the polyline.

        Returns (arc length of the nearest point, signed lateral offset).
        The offset sign follows the left-normal of the local tangent.
        """
        p = np.asarray(point, dtype=float)
        a = self.pts[:-1]
        d = np.diff(self.pts, axis=0)
        t = np.einsum("ij,ij->i", p - a, d) / self.seg_len**2
        t = np.clip(t, 0.0, 1.0)
        q = a + t[:, None] * d
        diff = p - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        i = int(np.argmin(d2))
        tan = d[i] / self.seg_len[i]
        lat = float(tan[0] * diff[i, 1] - tan[1] * diff[i, 0])
        return float(self.cum[i] + t[i] * self.seg_len[i]), lat

    def offset_point(self, s: float, lateral: float) -> np.ndarray:
        """Point displaced laterally (left positive) from the centerline."""
        base = self.point_at(s)
        tan = self.tangent_at(s)
        normal = np.array([-tan[1], tan[0]])
        return base + lateral * normal


def _seg_intersection(a0, a1, b0, b1) -> list[tuple[float, float]]:
    """Intersections of two segments as (ta, tb) parameter pairs.

    Collinear overlaps contribute the start of the overlap (in a-order), so
    downstream "first crossing" logic stays well defined when one route merges
    into another and the tails coincide.
    """
    da = a1 - a0
    db = b1 - b0
    denom = da[0] * db[1] - da[1] * db[0]
    diff = b0 - a0
    if abs(denom) > 1e-12:
        ta = (diff[0] * db[1] - diff[1] * db[0]) / denom
        tb = (diff[0] * da[1] - diff[1] * da[0]) / denom
        if -1e-9 <= ta <= 1 + 1e-9 and -1e-9 <= tb <= 1 + 1e-9:
            return [(min(max(ta, 0.0), 1.0), min(max(tb, 0.0), 1.0))]
        return []
    # Parallel.  Check for collinearity.
    cross = diff[0] * da[1] - diff[1] * da[0]
    if abs(cross) > 1e-9:
        return []
    len_a2 = float(np.dot(da, da))
    if len_a2 < 1e-18:
        return []
    t0 = float(np.dot(b0 - a0, da) / len_a2)
    t1 = float(np.dot(b1 - a0, da) / len_a2)
    lo, hi = min(t0, t1), max(t0, t1)
    lo = max(lo, 0.0)
    hi = min(hi, 1.0)
    if lo > hi:
        return []
    ta = lo
    # Recover tb for the overlap start point.
    q = a0 + ta * da
    len_b2 = float(np.dot(db, db))
    tb = float(np.dot(q - b0, db) / len_b2) if len_b2 > 1e-18 else 0.0
    return [(ta, min(max(tb, 0.0), 1.0))]


def first_intersection(a: Polyline, b: Polyline) -> tuple[np.ndarray, float, float] | None:
    """First crossing of two polylines in a's arc-length order.

    Returns (point, s_a, s_b) or None.  Ties on s_a resolve to the smaller
    s_b so the result is deterministic.
    """
    hits: list[tuple[float, float]] = []
    for i in range(len(a.seg_len)):
        a0, a1 = a.pts[i], a.pts[i + 1]
        for j in range(len(b.seg_len)):
            for ta, tb in _seg_intersection(a0, a1, b.pts[j], b.pts[j + 1]):
                sa = a.cum[i] + ta * a.seg_len[i]
                sb = b.cum[j] + tb * b.seg_len[j]
                hits.append((sa, sb))
    if not hits:
        return None
    # Coincident endpoints of consecutive segments produce duplicate hits at
    # the same arc length; min() keeps the earliest in (s_a, s_b) order.
    sa, sb = min(hits)
    return a.point_at(sa), sa, sb


def clearance_backoff(a: Polyline, b: Polyline, arc_a: float,
                      clearance: float, step: float = 0.5) -> float:
    """How far before arc_a path a last runs within `clearance` of path b.

    A vehicle queueing closer than this to the crossing physically blocks
    the other path.  Near-perpendicular crossings give roughly `clearance`;
    tangential merges give much more because the paths stay close for a
    long stretch.
    """
    s = arc_a - step
    while s > 0.0:
        p = a.point_at(s)
        s_b, _ = b.project(p)
        if float(np.hypot(*(p - b.point_at(s_b)))) > clearance:
            return arc_a - s
        s -= step
    return arc_a


@dataclass
class Lane:
    """A drivable movement path through the layout."""

    lane_id: str
    turn: str  # through | left | right | merge
    centerline: Polyline
    lane_type: str = "drive"
    width: float = 3.5


@dataclass
class RoadLayout:
    """Lanes plus stop lines, with per-lane stop-line arc lengths cached."""

    name: str
    lanes: dict[str, Lane]
    stop_lines: list[tuple[Point, Point]] = field(default_factory=list)
    center: Point = (0.0, 0.0)
    stop_s: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.stop_s:
            for lane_id, lane in self.lanes.items():
                self.stop_s[lane_id] = self._stop_arc(lane)

    def _stop_arc(self, lane: Lane) -> float:
        best = None
        for p0, p1 in self.stop_lines:
            seg = Polyline([p0, p1])
            hit = first_intersection(lane.centerline, seg)
            if hit is not None:
                s = hit[1]
                if best is None or s < best:
                    best = s
        if best is None:
            # No stop line crosses this lane; fall back to the point nearest
            # the layout center so signed progress stays meaningful.
            best, _ = lane.centerline.project(self.center)
        return float(best)

    def project(self, point) -> tuple[str, float, float]:
        """Nearest lane for a point: (lane_id, arc length, lateral offset).

        Distance ties break toward the lexicographically smallest lane id.
        """
        p = np.asarray(point, dtype=float)
        best: tuple[float, str, float, float] | None = None
        for lane_id in sorted(self.lanes):
            line = self.lanes[lane_id].centerline
            s, lat = line.project(p)
            dist = float(np.hypot(*(p - line.point_at(s))))
            key = (dist, lane_id, s, lat)
            if best is None or key < best:
                best = key
        if best is None:
            raise ValueError("layout has no lanes")
        return best[1], best[2], best[3]


def _arc_points(center: Point, radius: float, ang0: float, ang1: float, step_deg: float = 2.0):
    """Discretized circular arc from ang0 to ang1 (radians, signed sweep)."""
    sweep = ang1 - ang0
    n = max(2, int(abs(math.degrees(sweep)) / step_deg) + 1)
    angs = np.linspace(ang0, ang1, n)
    return [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)) for a in angs]


def standard_intersection(approach: float = 60.0, half: float = 10.0, offset: float = 5.0) -> RoadLayout:
    """Two perpendicular roads crossing at the origin.

    Right-hand traffic with lane centerlines at +-offset.  Through lanes run
    the full extent; the left-turn movements sweep a radius (half + offset)
    arc from the stop line onto the crossing road.
    """
    lanes: dict[str, Lane] = {}

    def add(lane_id: str, turn: str, pts) -> None:
        lanes[lane_id] = Lane(lane_id, turn, Polyline(pts))

    add("EB_through", "through", [(-approach, -offset), (approach, -offset)])
    add("WB_through", "through", [(approach, offset), (-approach, offset)])
    add("NB_through", "through", [(offset, -approach), (offset, approach)])
    add("SB_through", "through", [(-offset, approach), (-offset, -approach)])

    r = half + offset
    # Westbound left turn: enter at (half, offset) heading -x, exit southbound
    # along x = -offset.  Quarter-ish arc centered at (half, -half).
    wb_left = [(approach, offset)]
    wb_left += _arc_points((half, -half), r, math.pi / 2, math.pi)
    wb_left += [(-offset, -approach)]
    add("WB_left", "left", wb_left)

    eb_left = [(-approach, -offset)]
    eb_left += _arc_points((-half, half), r, -math.pi / 2, 0.0)
    eb_left += [(offset, approach)]
    add("EB_left", "left", eb_left)

    # Right turns hug the near corner with radius (half - offset).
    rr = half - offset
    eb_right = [(-approach, -offset)]
    eb_right += _arc_points((-half, -half), rr, math.pi / 2, 0.0)
    eb_right += [(-offset, -approach)]
    add("EB_right", "right", eb_right)

    wb_right = [(approach, offset)]
    wb_right += _arc_points((half, half), rr, -math.pi / 2, -math.pi)
    wb_right += [(offset, approach)]
    add("WB_right", "right", wb_right)

    stop_lines = [
        ((-half, -2 * offset), (-half, 0.0)),   # eastbound entry
        ((half, 0.0), (half, 2 * offset)),      # westbound entry
        ((0.0, -half), (2 * offset, -half)),    # northbound entry
        ((-2 * offset, half), (0.0, half)),     # southbound entry
    ]
    return RoadLayout(name="standard_intersection", lanes=lanes, stop_lines=stop_lines)


def merging_corridor(main_len: float = 220.0, ramp_gap: float = 14.0, merge_x: float = 40.0) -> RoadLayout:
    """Single main lane plus an on-ramp that blends into it tangentially."""
    x0 = -80.0
    main_pts = [(x0, 0.0), (x0 + main_len, 0.0)]

    blend_start = (-10.0, -ramp_gap)
    hermite = []
    p0 = np.array(blend_start)
    p1 = np.array([merge_x, 0.0])
    scale = float(np.hypot(*(p1 - p0)))
    m0 = np.array([scale, 0.0])
    m1 = np.array([scale, 0.0])
    for t in np.linspace(0.0, 1.0, 25):
        h00 = 2 * t**3 - 3 * t**2 + 1
        h10 = t**3 - 2 * t**2 + t
        h01 = -2 * t**3 + 3 * t**2
        h11 = t**3 - t**2
        q = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
        hermite.append((float(q[0]), float(q[1])))
    ramp_pts = [(x0, -ramp_gap)] + hermite + [(x0 + main_len, 0.0)]

    lanes = {
        "MAIN": Lane("MAIN", "through", Polyline(main_pts)),
        "RAMP": Lane("RAMP", "merge", Polyline(ramp_pts)),
    }
    stop_lines = [
        ((merge_x - 10.0, -5.0), (merge_x - 10.0, 5.0)),
        ((blend_start[0], -ramp_gap - 5.0), (blend_start[0], -ramp_gap + 5.0)),
    ]
    return RoadLayout(name="merging_corridor", lanes=lanes, stop_lines=stop_lines, center=(merge_x, 0.0))


def route_polyline(layout: RoadLayout, lane_ids: list[str]) -> Polyline:
    """Concatenate lane centerlines into a single route path."""
    pts: list[tuple[float, float]] = []
    for lane_id in lane_ids:
        if lane_id not in layout.lanes:
            raise KeyError(f"unknown lane id: {lane_id!r}")
        for p in layout.lanes[lane_id].centerline.pts:
            pts.append((float(p[0]), float(p[1])))
    return Polyline(pts)
