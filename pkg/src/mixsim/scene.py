"""Semantic scene abstraction.

Builds a compact object/process/relation description of the traffic scene
around an ego vehicle: which vehicles matter, their lane-relative motion
state, pairwise crossing conflicts with a time-coupling measure, and any
explicit intent signals.  The graph serializes to text prompts in three
formats ("opm", "raw", "simple") for downstream reasoners.
"""

from __future__ import annotations

import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Polyline, RoadLayout

log = logging.getLogger(__name__)

SPEED_FLOOR = 0.1   # m/s; below this, direction and TTC are indeterminate
ACCEL_FLOOR = 0.05  # m/s^2; below this, acceleration direction is undefined
DTTC_DEFAULT = 3.0  # s
PROXIMITY_DEFAULT = 50.0  # m

#: Sentinel for an undefined delta-TTC (either vehicle at or below the
#: speed floor).  Kept as a value rather than None so serialization and
#: comparisons stay explicit.
INDETERMINATE = float("inf")


@dataclass
class VehicleState:
    """Raw kinematic state of one vehicle in world coordinates."""

    vehicle_id: str
    x: float
    y: float
    vx: float
    vy: float
    ax: float = 0.0
    ay: float = 0.0
    phi: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def speed(self) -> float:
        return float(math.hypot(self.vx, self.vy))

    def numeric_fields(self) -> tuple[float, ...]:
        return (self.x, self.y, self.vx, self.vy, self.ax, self.ay, self.phi)


class HistoryBuffer:
    """Sliding window of timestamped vehicle states (default 3 s at 10 Hz)."""

    def __init__(self, window: float = 3.0) -> None:
        self.window = window
        self.samples: deque[tuple[float, VehicleState]] = deque()

    def push(self, t: float, state: VehicleState) -> None:
        self.samples.append((t, state))
        while self.samples and t - self.samples[0][0] > self.window + 1e-9:
            self.samples.popleft()

    def last_two(self) -> tuple[tuple[float, VehicleState], tuple[float, VehicleState]] | None:
        if len(self.samples) < 2:
            return None
        return self.samples[-2], self.samples[-1]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class ProcessState:
    """Lane-relative motion descriptor of one vehicle."""

    vehicle_id: str
    lane_id: str
    turn: str
    p: float        # signed arc distance to the stop line (negative upstream)
    v: float        # speed magnitude
    a: float        # signed acceleration along the direction of travel
    theta_v: float  # angle between velocity and lane tangent, [0, pi]
    theta_a: float  # angle between acceleration and lane tangent, [0, pi]


@dataclass
class ConflictPair:
    """A crossing of two planned paths ahead of both vehicles."""

    id_i: str
    id_j: str
    conflict_point: tuple[float, float]
    d_i: float
    d_j: float
    delta_ttc: float  # INDETERMINATE when either speed is floored
    # arc distance each vehicle must keep before the point to stay clear of
    # the other path; ~2-3 m at a crossing, >10 m on a tangential merge
    back_i: float = 0.0
    back_j: float = 0.0

    @property
    def determinate(self) -> bool:
        return math.isfinite(self.delta_ttc)


@dataclass
class IntentPair:
    """An explicit communication edge between two vehicles."""

    source: str
    target: str
    channel: str  # turn-signal | ehmi-text | voice-text
    payload: str


@dataclass
class OpmGraph:
    """Objects, processes, and relations for the selected scene subset."""

    ego_id: str
    objects: list[VehicleState]
    processes: list[ProcessState]
    conflicts: list[ConflictPair]
    intents: list[IntentPair] = field(default_factory=list)

    def object_ids(self) -> list[str]:
        return [o.vehicle_id for o in self.objects]

    def process_for(self, vehicle_id: str) -> ProcessState | None:
        for pr in self.processes:
            if pr.vehicle_id == vehicle_id:
                return pr
        return None

    def conflicts_for(self, vehicle_id: str) -> list[ConflictPair]:
        return [c for c in self.conflicts if vehicle_id in (c.id_i, c.id_j)]


@dataclass
class Route:
    """A vehicle's planned centerline path and its progress along it."""

    path: Polyline
    progress: float = 0.0
    turn: str = "through"


def compute_delta_ttc(d_i: float, v_i: float, d_j: float, v_j: float,
                      speed_floor: float = SPEED_FLOOR) -> float:
    """|d_i/v_i - d_j/v_j|, or INDETERMINATE if either speed is floored."""
    if v_i < speed_floor or v_j < speed_floor:
        return INDETERMINATE
    return abs(d_i / v_i - d_j / v_j)


def project_to_lane(state: VehicleState, layout: RoadLayout) -> tuple[str, float, float]:
    """Nearest-lane projection: (lane_id, arc length, lateral offset)."""
    return layout.project(state.position)


def _angle_between(vec: np.ndarray, tangent: np.ndarray) -> float:
    norm = float(np.hypot(*vec))
    dot = float(np.dot(vec, tangent)) / norm
    return float(math.acos(min(1.0, max(-1.0, dot))))


def compute_process_state(state: VehicleState, layout: RoadLayout,
                          speed_floor: float = SPEED_FLOOR,
                          accel_floor: float = ACCEL_FLOOR) -> ProcessState:
    """Lane-relative descriptor with floor conventions.

    Below the speed floor the travel direction is taken from the lane
    tangent and theta_v is reported as 0; the same convention applies to
    theta_a below the acceleration floor.
    """
    lane_id, s, _ = layout.project(state.position)
    lane = layout.lanes[lane_id]
    tangent = lane.centerline.tangent_at(s)
    p = s - layout.stop_s[lane_id]

    vel = np.array([state.vx, state.vy])
    speed = float(np.hypot(*vel))
    if speed >= speed_floor:
        theta_v = _angle_between(vel, tangent)
        travel_dir = vel / speed
    else:
        theta_v = 0.0
        travel_dir = tangent

    acc = np.array([state.ax, state.ay])
    acc_mag = float(np.hypot(*acc))
    if acc_mag >= accel_floor:
        theta_a = _angle_between(acc, tangent)
    else:
        theta_a = 0.0
    a_signed = float(np.dot(acc, travel_dir))

    return ProcessState(state.vehicle_id, lane_id, lane.turn, p, speed, a_signed, theta_v, theta_a)


def detect_conflicts(processes: list[ProcessState], routes: dict[str, Route],
                     speed_floor: float = SPEED_FLOOR,
                     crossings: dict | None = None) -> list[ConflictPair]:
    """One ConflictPair per unordered id pair whose routes cross ahead of both.

    The first crossing in each vehicle's own travel order is used.  Output is
    sorted by (id_i, id_j) with id_i < id_j for determinism.  `crossings` may
    carry precomputed first_intersection results keyed by (id_i, id_j) when
    the route geometry is static across many calls.
    """
    from .geometry import first_intersection

    ids = [p.vehicle_id for p in processes if p.vehicle_id in routes]
    speed = {p.vehicle_id: p.v for p in processes}
    out: list[ConflictPair] = []
    for i_idx in range(len(ids)):
        for j_idx in range(i_idx + 1, len(ids)):
            a, b = sorted((ids[i_idx], ids[j_idx]))
            ra, rb = routes[a], routes[b]
            back_a = back_b = 0.0
            if crossings is not None and (a, b) in crossings:
                hit = crossings[(a, b)]
                if hit is not None and len(hit) == 5:
                    point, s_a, s_b, back_a, back_b = hit
                    hit = (point, s_a, s_b)
            else:
                hit = first_intersection(ra.path, rb.path)
            if hit is None:
                continue
            point, s_a, s_b = hit
            d_a = s_a - ra.progress
            d_b = s_b - rb.progress
            if d_a <= 0.0 or d_b <= 0.0:
                continue
            dttc = compute_delta_ttc(d_a, speed[a], d_b, speed[b], speed_floor)
            out.append(ConflictPair(a, b, (float(point[0]), float(point[1])),
                                    d_a, d_b, dttc, back_a, back_b))
    out.sort(key=lambda c: (c.id_i, c.id_j))
    return out


def select_modeling_objects(ego: VehicleState, others: list[VehicleState],
                            routes: dict[str, Route],
                            dttc_threshold: float = DTTC_DEFAULT,
                            proximity: float = PROXIMITY_DEFAULT,
                            speed_floor: float = SPEED_FLOOR) -> list[VehicleState]:
    """Vehicles that matter to the ego's current decision.

    A vehicle is selected if (a) its route crosses the ego route ahead of
    both with a determinate delta-TTC under the threshold, or (b) its
    longitudinal distance along the ego centerline is under the proximity
    threshold.  The ego is always included (first).  Vehicles without a
    known route are skipped with a diagnostic.
    """
    if ego.vehicle_id not in routes:
        raise KeyError(f"ego {ego.vehicle_id!r} has no route")
    ego_route = routes[ego.vehicle_id]
    selected = [ego]
    for other in others:
        route = routes.get(other.vehicle_id)
        if route is None:
            log.warning("select_modeling_objects: no route for %r; skipped", other.vehicle_id)
            continue
        take = False
        from .geometry import first_intersection

        hit = first_intersection(ego_route.path, route.path)
        if hit is not None:
            _, s_e, s_o = hit
            d_e = s_e - ego_route.progress
            d_o = s_o - route.progress
            if d_e > 0.0 and d_o > 0.0:
                dttc = compute_delta_ttc(d_e, ego.speed, d_o, other.speed, speed_floor)
                if math.isfinite(dttc) and dttc < dttc_threshold:
                    take = True
        if not take:
            s_other, _ = ego_route.path.project(other.position)
            if abs(s_other - ego_route.progress) < proximity:
                take = True
        if take:
            selected.append(other)
    return selected


def build_opm_graph(ego: VehicleState, others: list[VehicleState],
                    layout: RoadLayout, routes: dict[str, Route],
                    intents: list[IntentPair] | None = None,
                    dttc_threshold: float = DTTC_DEFAULT,
                    proximity: float = PROXIMITY_DEFAULT,
                    crossings: dict | None = None) -> OpmGraph:
    """Select objects, derive processes, and attach conflicts and intents.

    Objects are ordered ego-first, then by vehicle id.  Intent edges are
    kept only when both endpoints are selected.
    """
    selected = select_modeling_objects(ego, others, routes, dttc_threshold, proximity)
    tail = sorted(selected[1:], key=lambda s: s.vehicle_id)
    objects = [selected[0]] + tail
    processes = [compute_process_state(o, layout) for o in objects]
    conflicts = detect_conflicts(processes, routes, crossings=crossings)
    ids = {o.vehicle_id for o in objects}
    kept_intents = [iv for iv in (intents or []) if iv.source in ids and iv.target in ids]
    return OpmGraph(ego.vehicle_id, objects, processes, conflicts, kept_intents)


# --- serialization ---------------------------------------------------------

def _fmt(x: float) -> str:
    # Normalize negative zero so output is byte-stable across code paths.
    v = round(x, 2) + 0.0
    return f"{v:.2f}"


def _object_line(o: VehicleState) -> str:
    return (f"vehicle {o.vehicle_id}: x={_fmt(o.x)}, y={_fmt(o.y)}, "
            f"vx={_fmt(o.vx)}, vy={_fmt(o.vy)}, ax={_fmt(o.ax)}, ay={_fmt(o.ay)}, "
            f"phi={_fmt(o.phi)}")


def _process_line(p: ProcessState) -> str:
    return (f"vehicle {p.vehicle_id}: p={_fmt(p.p)}, v={_fmt(p.v)}, a={_fmt(p.a)}, "
            f"theta_v={_fmt(p.theta_v)}, theta_a={_fmt(p.theta_a)}, "
            f"lane={p.lane_id}[{p.turn}]")


def _conflict_line(c: ConflictPair) -> str:
    dttc = "indeterminate" if not c.determinate else _fmt(c.delta_ttc)
    return (f"conflict {c.id_i}-{c.id_j}: point=({_fmt(c.conflict_point[0])},"
            f"{_fmt(c.conflict_point[1])}), d_{c.id_i}={_fmt(c.d_i)}, "
            f"d_{c.id_j}={_fmt(c.d_j)}, dTTC={dttc}")


def serialize_opm(graph: OpmGraph, fmt: str = "opm",
                  all_vehicles: list[VehicleState] | None = None,
                  histories: dict[str, HistoryBuffer] | None = None) -> str:
    """Render the scene graph as text.

    "opm": sectioned Objects/Processes/Relations form, 2-decimal numbers.
    "raw": flat comma-separated dump of every vehicle state field, including
    unselected vehicles and full histories when provided.
    "simple": key:value lines per selected vehicle, no relation section.

    Output is deterministic (byte-identical for identical graphs) and uses
    LF line endings.
    """
    if fmt == "opm":
        lines = ["Objects:"]
        lines += [_object_line(o) for o in graph.objects]
        lines.append("Processes:")
        lines += [_process_line(p) for p in graph.processes]
        lines.append("Relations:")
        lines += [_conflict_line(c) for c in graph.conflicts]
        for iv in graph.intents:
            lines.append(f'intent {iv.source}->{iv.target} [{iv.channel}]: "{iv.payload}"')
        return "\n".join(lines) + "\n"

    if fmt == "raw":
        states: list[VehicleState] = list(all_vehicles) if all_vehicles else list(graph.objects)
        nums: list[str] = []
        for st in states:
            nums.extend(_fmt(v) for v in st.numeric_fields())
            hist = (histories or {}).get(st.vehicle_id)
            if hist is not None:
                for t, past in hist.samples:
                    nums.append(_fmt(t))
                    nums.extend(_fmt(v) for v in past.numeric_fields())
        return ",".join(nums) + "\n"

    if fmt == "simple":
        lines = []
        for o, p in zip(graph.objects, graph.processes):
            lines.append(f"vehicle {o.vehicle_id}:")
            for key, val in (("x", o.x), ("y", o.y), ("vx", o.vx), ("vy", o.vy),
                             ("ax", o.ax), ("ay", o.ay), ("phi", o.phi),
                             ("p", p.p), ("v", p.v), ("a", p.a),
                             ("theta_v", p.theta_v), ("theta_a", p.theta_a)):
                lines.append(f"{key}: {_fmt(val)}")
            lines.append(f"lane: {p.lane_id}[{p.turn}]")
        return "\n".join(lines) + "\n"

    raise ValueError(f"unknown serialization format: {fmt!r}")


_KV_RE = re.compile(r"(\w+)=(-?\d+\.\d+|indeterminate)")


def parse_opm(text: str) -> dict:
    """Recover numeric fields from the "opm" serialization.

    Returns {"objects": {id: {field: value}}, "processes": {...},
    "conflicts": [{...}]}.  Used for round-trip checks and by text-only
    consumers of the prompt.
    """
    section = None
    objects: dict[str, dict] = {}
    processes: dict[str, dict] = {}
    conflicts: list[dict] = []
    for line in text.splitlines():
        if line == "Objects:":
            section = "objects"
            continue
        if line == "Processes:":
            section = "processes"
            continue
        if line == "Relations:":
            section = "relations"
            continue
        if section in ("objects", "processes") and line.startswith("vehicle "):
            head, _, rest = line.partition(":")
            vid = head.split()[1]
            fields = {k: float(v) for k, v in _KV_RE.findall(rest) if v != "indeterminate"}
            lane_m = re.search(r"lane=(\S+)\[(\w+)\]", rest)
            if lane_m:
                fields["lane_id"] = lane_m.group(1)
                fields["turn"] = lane_m.group(2)
            (objects if section == "objects" else processes)[vid] = fields
        elif section == "relations" and line.startswith("conflict "):
            head, _, rest = line.partition(":")
            pair = head.split()[1]
            id_i, _, id_j = pair.partition("-")
            entry: dict = {"id_i": id_i, "id_j": id_j}
            pt = re.search(r"point=\((-?\d+\.\d+),(-?\d+\.\d+)\)", rest)
            if pt:
                entry["point"] = (float(pt.group(1)), float(pt.group(2)))
            for k, v in _KV_RE.findall(rest):
                entry[k] = INDETERMINATE if v == "indeterminate" else float(v)
            conflicts.append(entry)
    return {"objects": objects, "processes": processes, "conflicts": conflicts}
