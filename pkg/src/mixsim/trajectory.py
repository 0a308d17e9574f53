"""Polynomial trajectory generation with Monte Carlo terminal sampling.

Motion is planned in a route-relative frame: s is arc length along the
planned path, l the lateral offset.  The longitudinal profile is a quartic
with free terminal position (5 boundary conditions); the lateral profile a
full quintic (6 conditions).  Candidate terminal states are sampled around
a per-maneuver nominal, filtered for dynamic and conflict-window
feasibility, and scored for efficiency plus comfort.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .maneuvers import Maneuver

MIN_HORIZON = 1e-6
SPEED_EPS = 0.1  # m/s of tolerated sampled-speed undershoot below zero


class DegenerateHorizonError(ValueError):
    """Raised when the requested horizon is too short to solve."""


@dataclass
class PolySegment:
    """Polynomial in relative time tau in [0, horizon]."""

    coeffs: np.ndarray
    horizon: float

    def value(self, tau):
        return np.polyval(self.coeffs[::-1], tau)

    def deriv(self, order: int):
        c = np.polynomial.polynomial.polyder(self.coeffs, order)
        return PolySegment(np.asarray(c, dtype=float), self.horizon)


def solve_longitudinal(s0: float, v0: float, a0: float,
                       v_t: float, a_t: float, horizon: float) -> PolySegment:
    """Quartic s(tau) fixing initial position/speed/accel and terminal
    speed/accel; terminal position stays free.  Solved as a 5x5 system.
    """
    if horizon < MIN_HORIZON:
        raise DegenerateHorizonError(f"horizon {horizon} below {MIN_HORIZON}")
    th = float(horizon)
    mat = np.array([
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0, 0.0],
        [0.0, 1.0, 2 * th, 3 * th**2, 4 * th**3],
        [0.0, 0.0, 2.0, 6 * th, 12 * th**2],
    ])
    rhs = np.array([s0, v0, a0, v_t, a_t], dtype=float)
    return PolySegment(np.linalg.solve(mat, rhs), th)


def solve_lateral(l0: float, vl0: float, al0: float,
                  l_t: float, vl_t: float, al_t: float, horizon: float) -> PolySegment:
    """Quintic l(tau) with full position/speed/accel boundary conditions."""
    if horizon < MIN_HORIZON:
        raise DegenerateHorizonError(f"horizon {horizon} below {MIN_HORIZON}")
    th = float(horizon)
    mat = np.array([
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [1.0, th, th**2, th**3, th**4, th**5],
        [0.0, 1.0, 2 * th, 3 * th**2, 4 * th**3, 5 * th**4],
        [0.0, 0.0, 2.0, 6 * th, 12 * th**2, 20 * th**3],
    ])
    rhs = np.array([l0, vl0, al0, l_t, vl_t, al_t], dtype=float)
    return PolySegment(np.linalg.solve(mat, rhs), th)


def boundary_residuals_longitudinal(poly: PolySegment, s0, v0, a0, v_t, a_t) -> np.ndarray:
    d1 = poly.deriv(1)
    d2 = poly.deriv(2)
    th = poly.horizon
    return np.abs(np.array([
        poly.value(0.0) - s0,
        d1.value(0.0) - v0,
        d2.value(0.0) - a0,
        d1.value(th) - v_t,
        d2.value(th) - a_t,
    ]))


def boundary_residuals_lateral(poly: PolySegment, l0, vl0, al0, l_t, vl_t, al_t) -> np.ndarray:
    d1 = poly.deriv(1)
    d2 = poly.deriv(2)
    th = poly.horizon
    return np.abs(np.array([
        poly.value(0.0) - l0,
        d1.value(0.0) - vl0,
        d2.value(0.0) - al0,
        poly.value(th) - l_t,
        d1.value(th) - vl_t,
        d2.value(th) - al_t,
    ]))


@dataclass
class StartState:
    """Route-relative kinematic start: longitudinal (s, v, a) and lateral."""

    s: float
    v: float
    a: float = 0.0
    l: float = 0.0
    vl: float = 0.0
    al: float = 0.0


@dataclass
class TerminalState:
    v_t: float
    a_t: float
    horizon: float
    l_t: float = 0.0
    vl_t: float = 0.0
    al_t: float = 0.0


@dataclass
class TrajectoryParams:
    dt: float = 0.1
    t_nominal: float = 4.0
    a_nom: float = 1.5
    b_nom: float = 2.0
    turn_cap: float = 15.0      # m/s ceiling through turning maneuvers
    sigma: float = 0.3          # multiplicative terminal noise scale
    n_samples: int = 60
    c_e: float = 0.5
    c_s: float = 0.5
    t_ref: float = 6.0
    j_max: float = 10.0
    a_max: float = 2.0          # planning acceleration ceiling
    b_hard: float = 8.0
    horizon_clamp: tuple[float, float] = (0.5, 2.0)  # x nominal
    occupancy_margin: float = 6.0   # m around a conflict point
    clear_length: float = 8.0       # m past the point before it is released
    window_buffer: float = 0.5      # s of temporal padding on opponent windows
    follow_margin: float = 4.0      # m kept behind a same-path leader
    extrapolate_cap: float = 15.0   # s of constant-speed lookahead past horizon


@dataclass
class Trajectory:
    maneuver: Maneuver
    t: np.ndarray
    s: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    jerk: np.ndarray
    l: np.ndarray
    horizon: float
    terminal: TerminalState
    fallback: bool = False

    def accel_at(self, tau: float) -> float:
        """Commanded acceleration at relative time tau (0 past the horizon)."""
        if tau >= self.horizon:
            return 0.0
        return float(np.interp(tau, self.t, self.accel))


def nominal_terminal(start: StartState, maneuver: Maneuver,
                     params: TrajectoryParams, v_desired: float = 10.0) -> TerminalState:
    """Per-maneuver nominal terminal state over the nominal horizon.

    Turning maneuvers track the desired speed under the turn cap; path
    geometry, not the speed profile, carries the turn itself.
    """
    t_n = params.t_nominal
    if maneuver is Maneuver.STRAIGHT_ACCEL:
        v_t = min(v_desired, start.v + params.a_nom * t_n)
    elif maneuver is Maneuver.STRAIGHT_DECEL:
        v_t = max(0.0, start.v - params.b_nom * t_n)
    elif maneuver is Maneuver.STRAIGHT_CONST:
        v_t = start.v
    else:
        v_t = min(params.turn_cap, start.v + params.a_nom * t_n)
    return TerminalState(v_t=v_t, a_t=0.0, horizon=t_n, l_t=0.0, vl_t=0.0, al_t=0.0)


def perturb_terminal(nominal: TerminalState, rng: np.random.Generator,
                     params: TrajectoryParams) -> TerminalState:
    """Multiplicative perturbation c*(1 + sigma*z) of each terminal component.

    Exactly three standard normals are drawn per call (speed, horizon,
    lateral), so candidate k is identical no matter how many candidates
    follow it.  Speed clamps at zero; the horizon stays within the
    configured multiple of nominal.
    """
    z = rng.standard_normal(3)
    v_t = max(0.0, nominal.v_t * (1.0 + params.sigma * z[0]))
    lo, hi = params.horizon_clamp
    horizon = nominal.horizon * (1.0 + params.sigma * z[1])
    horizon = min(max(horizon, lo * nominal.horizon), hi * nominal.horizon)
    l_t = nominal.l_t * (1.0 + params.sigma * z[2])
    return TerminalState(v_t=v_t, a_t=nominal.a_t, horizon=horizon,
                         l_t=l_t, vl_t=nominal.vl_t, al_t=nominal.al_t)


def _time_grid(horizon: float, dt: float) -> np.ndarray:
    # exactly floor(horizon/dt)+1 samples; the terminal state is enforced
    # analytically by the solver, not by landing a sample on it
    n = int(math.floor(horizon / dt + 1e-9)) + 1
    return np.arange(n, dtype=float) * dt


def build_trajectory(start: StartState, terminal: TerminalState,
                     maneuver: Maneuver, params: TrajectoryParams) -> Trajectory:
    """Solve both profiles and sample them on the dt grid."""
    lon = solve_longitudinal(start.s, start.v, start.a,
                             terminal.v_t, terminal.a_t, terminal.horizon)
    lat = solve_lateral(start.l, start.vl, start.al,
                        terminal.l_t, terminal.vl_t, terminal.al_t, terminal.horizon)
    t = _time_grid(terminal.horizon, params.dt)
    d1 = lon.deriv(1)
    d2 = lon.deriv(2)
    d3 = lon.deriv(3)
    return Trajectory(
        maneuver=maneuver,
        t=t,
        s=np.asarray(lon.value(t), dtype=float),
        speed=np.asarray(d1.value(t), dtype=float),
        accel=np.asarray(d2.value(t), dtype=float),
        jerk=np.asarray(d3.value(t), dtype=float),
        l=np.asarray(lat.value(t), dtype=float),
        horizon=terminal.horizon,
        terminal=terminal,
    )


def fallback_trajectory(start: StartState, maneuver: Maneuver,
                        params: TrajectoryParams) -> Trajectory:
    """Maximal comfortable-deceleration straight profile, flagged fallback."""
    t = _time_grid(params.t_nominal, params.dt)
    t_stop = start.v / params.b_nom if params.b_nom > 0 else math.inf
    speed = np.maximum(0.0, start.v - params.b_nom * t)
    s = np.where(
        t < t_stop,
        start.s + start.v * t - 0.5 * params.b_nom * t**2,
        start.s + (start.v * t_stop - 0.5 * params.b_nom * t_stop**2 if math.isfinite(t_stop) else 0.0),
    )
    accel = np.where(speed > 0.0, -params.b_nom, 0.0)
    terminal = TerminalState(v_t=float(speed[-1]), a_t=0.0, horizon=params.t_nominal,
                             l_t=start.l)
    return Trajectory(maneuver=maneuver, t=t, s=s, speed=speed, accel=accel,
                      jerk=np.zeros_like(t), l=np.full_like(t, start.l),
                      horizon=params.t_nominal, terminal=terminal, fallback=True)


@dataclass
class ConflictWindow:
    """Occupancy constraint at one conflict point on the ego path.

    The ego may not be inside [s_enter, s_exit] while t is inside
    [t_enter, t_exit] (relative to plan start; t_exit may be inf for a
    stalled opponent sitting on the point).
    """

    s_enter: float
    s_exit: float
    t_enter: float
    t_exit: float


def window_from_opponent(s_conflict: float, d_opp: float, v_opp: float,
                         params: TrajectoryParams,
                         speed_floor: float = 0.1,
                         ego_backoff: float = 0.0,
                         opp_backoff: float = 0.0) -> ConflictWindow | None:
    """Passage window of an opposing vehicle under constant-velocity motion.

    A stalled opponent blocks indefinitely only while its body actually
    intrudes on the ego corridor; parked at or beyond its backoff it is
    laterally clear by construction (that is what the backoff measures),
    so a queued yielder does not wall off the junction.  The backoffs
    widen the occupancy margin where the paths stay close for longer
    than the default margin covers (tangential merges).
    """
    margin = max(params.occupancy_margin, ego_backoff + 1.0)
    opp_margin = max(params.occupancy_margin, opp_backoff + 1.0)
    block = opp_backoff + 1.0 if opp_backoff > 0.0 else params.occupancy_margin
    if v_opp < speed_floor:
        if d_opp <= block:
            return ConflictWindow(s_conflict - margin, s_conflict + params.clear_length,
                                  0.0, math.inf)
        return None
    t_enter = max(0.0, (d_opp - opp_margin) / v_opp - params.window_buffer)
    t_exit = (d_opp + params.clear_length) / v_opp + params.window_buffer
    return ConflictWindow(s_conflict - margin, s_conflict + params.clear_length,
                          t_enter, t_exit)


def check_feasible(traj: Trajectory, windows: list[ConflictWindow],
                   params: TrajectoryParams,
                   leader: tuple[float, float] | None = None) -> tuple[bool, str]:
    """Dynamic box plus conflict-window occupancy.

    Occupancy is also checked on a constant-speed extrapolation past the
    horizon so short candidates cannot commit into a closing window.
    `leader` is (gap, speed) of a vehicle ahead on the same path; candidates
    may not close within the follow margin of its constant-speed position.
    """
    if np.any(traj.accel > params.a_max + 1e-9) or np.any(traj.accel < -params.b_hard - 1e-9):
        return False, "accel-box"
    if np.any(traj.speed < -SPEED_EPS):
        return False, "negative-speed"
    if leader is not None:
        gap, v_lead = leader
        bound = traj.s[0] + gap + max(v_lead, 0.0) * traj.t - params.follow_margin
        if np.any(traj.s > bound):
            return False, "leader-gap"
    if windows:
        t = traj.t
        s = traj.s
        v_end = max(0.0, float(traj.speed[-1]))
        t_need = min(params.extrapolate_cap,
                     max((w.t_exit for w in windows if math.isfinite(w.t_exit)),
                         default=0.0))
        if t_need > traj.horizon and v_end > 0.0:
            extra = np.arange(traj.horizon + params.dt, t_need + params.dt, params.dt)
            t = np.concatenate([t, extra])
            s = np.concatenate([s, s[-1] + v_end * (extra - traj.horizon)])
        for w in windows:
            inside = (s >= w.s_enter) & (s <= w.s_exit)
            during = (t >= w.t_enter) & (t <= w.t_exit)
            if np.any(inside & during):
                return False, "conflict-window"
    return True, "ok"


@dataclass
class TrajectoryScore:
    total: float
    efficiency_term: float
    comfort_term: float
    t_avg: float
    v_avg: float
    j_avg: float


def score_trajectory(traj: Trajectory, params: TrajectoryParams) -> TrajectoryScore:
    """Weighted efficiency/comfort score (lower is better).

    The comfort term integrates |jerk| by trapezoid.  The per-sample
    averages (t_avg, v_avg, j_avg) are reported as the discrete sums over
    samples for audit output; only the two weighted terms enter the total.
    """
    t = traj.t
    n = len(t)
    dt_steps = np.diff(t)
    absj = np.abs(traj.jerk)
    jerk_integral = float(np.sum(0.5 * (absj[:-1] + absj[1:]) * dt_steps))
    efficiency = params.c_e * traj.horizon / params.t_ref
    comfort = params.c_s * jerk_integral / params.j_max

    t_avg = float(np.sum(dt_steps)) / n
    dist = float(traj.s[-1] - traj.s[0])
    v_avg = dist / t_avg if t_avg > 0 else 0.0
    j_avg = float(np.sum(dt_steps * np.abs(np.diff(traj.accel)))) / n

    return TrajectoryScore(total=efficiency + comfort, efficiency_term=efficiency,
                           comfort_term=comfort, t_avg=t_avg, v_avg=v_avg, j_avg=j_avg)


def goal_time(traj: Trajectory, goal_distance: float,
              params: TrajectoryParams) -> float:
    """Time for the profile to advance goal_distance from its start.

    Past the horizon the motion is extrapolated at the terminal speed;
    profiles that never get there (braking to a stop) saturate at the
    extrapolation cap so they stay comparable among themselves.
    """
    cap = params.extrapolate_cap
    if goal_distance <= 0.0:
        return 0.0
    s_rel = traj.s - traj.s[0]
    idx = int(np.searchsorted(s_rel, goal_distance, side="left"))
    if idx < len(s_rel):
        if idx == 0:
            return 0.0
        s0, s1 = float(s_rel[idx - 1]), float(s_rel[idx])
        t0, t1 = float(traj.t[idx - 1]), float(traj.t[idx])
        if s1 <= s0:
            return min(t1, cap)
        return min(t0 + (t1 - t0) * (goal_distance - s0) / (s1 - s0), cap)
    v_end = float(traj.speed[-1])
    if v_end <= 1e-6:
        return cap
    return min(traj.horizon + (goal_distance - float(s_rel[-1])) / v_end, cap)


@dataclass
class CandidateAudit:
    index: int
    terminal: TerminalState
    feasible: bool
    reason: str
    score: float | None


@dataclass
class OptimizationResult:
    trajectory: Trajectory
    score: float
    candidates: list[CandidateAudit] = field(default_factory=list)
    fallback: bool = False


def _window_anchor(start: StartState, w: ConflictWindow,
                   params: TrajectoryParams) -> TerminalState | None:
    """Glide terminal reaching the window's near edge as it reopens.

    The sampled cloud sits around the maneuver nominal, so in a yield
    situation the smooth early-deceleration profile it needs is far out in
    the tails; this derives it directly from the window instead.  Uses the
    displacement of the polynomial speed profile, T*(v0+vT)/2 + a0*T^2/12,
    with constant-speed continuation when the reopening lies beyond the
    horizon box.
    """
    if not math.isfinite(w.t_exit):
        return None
    d_enter = w.s_enter - start.s - 0.5
    if d_enter <= 0.0:
        return None
    t_arr = w.t_exit + params.window_buffer
    horizon = min(max(t_arr, params.horizon_clamp[0] * params.t_nominal),
                  params.horizon_clamp[1] * params.t_nominal)
    if t_arr <= horizon + 1e-9:
        v_t = 2.0 * (d_enter - start.a * horizon**2 / 12.0) / horizon - start.v
    else:
        v_t = ((d_enter - start.v * horizon / 2.0 - start.a * horizon**2 / 12.0)
               / (horizon / 2.0 + (t_arr - horizon)))
    if v_t < 0.0:
        v_t = 0.0
    return TerminalState(v_t=v_t, a_t=0.0, horizon=horizon, l_t=0.0,
                         vl_t=0.0, al_t=0.0)


def optimize(start: StartState, maneuver: Maneuver,
             windows: list[ConflictWindow], params: TrajectoryParams,
             seed: int, n_samples: int | None = None,
             v_desired: float = 10.0,
             leader: tuple[float, float] | None = None,
             goal_distance: float | None = None) -> OptimizationResult:
    """Sample terminal states, keep the best feasible candidate.

    The noise stream draws a fixed number of normals per candidate index,
    so the first N candidates of a larger run are exactly the candidates
    of a smaller run with the same seed (best score is monotonically
    non-increasing in N).  With no feasible candidate, a flagged maximal
    comfortable-deceleration profile is returned.

    With goal_distance set, the efficiency term prices the time to advance
    that distance (see goal_time) instead of the bare horizon, so a
    candidate that makes real progress outranks one that merely ends
    sooner.  The term is floored at the nominal-terminal-speed schedule:
    arriving faster than the maneuver's own target pace earns nothing, so
    the comfort term alone settles speeds above it.  Candidate ranking and
    the audited scores use the same rule.
    """
    n = n_samples if n_samples is not None else params.n_samples
    rng = np.random.default_rng(seed)
    nominal = nominal_terminal(start, maneuver, params, v_desired)

    def rank(traj: Trajectory, comfort: float, total: float) -> float:
        if goal_distance is None:
            return total
        sched = goal_distance / max(nominal.v_t, 0.1)
        t_goal = max(goal_time(traj, goal_distance, params), sched)
        return params.c_e * t_goal / params.t_ref + comfort

    audits: list[CandidateAudit] = []
    best: Trajectory | None = None
    best_score = math.inf

    # pass-after glide anchors would soften a deliberate braking maneuver,
    # so they only accompany progress maneuvers
    anchors = []
    if maneuver is not Maneuver.STRAIGHT_DECEL:
        anchors = [a for w in sorted(windows, key=lambda w: w.t_exit)[:4]
                   if (a := _window_anchor(start, w, params)) is not None]
    candidates = [(k, perturb_terminal(nominal, rng, params)) for k in range(n)]
    candidates += [(n + i, a) for i, a in enumerate(anchors)]

    for k, terminal in candidates:
        try:
            traj = build_trajectory(start, terminal, maneuver, params)
        except DegenerateHorizonError:
            audits.append(CandidateAudit(k, terminal, False, "degenerate-horizon", None))
            continue
        ok, reason = check_feasible(traj, windows, params, leader)
        if not ok:
            audits.append(CandidateAudit(k, terminal, False, reason, None))
            continue
        parts = score_trajectory(traj, params)
        sc = rank(traj, parts.comfort_term, parts.total)
        audits.append(CandidateAudit(k, terminal, True, "ok", sc))
        if sc < best_score:
            best_score = sc
            best = traj

    if best is None:
        fb = fallback_trajectory(start, maneuver, params)
        parts = score_trajectory(fb, params)
        return OptimizationResult(fb, rank(fb, parts.comfort_term, parts.total),
                                  audits, fallback=True)
    return OptimizationResult(best, best_score, audits, fallback=False)
