"""Reference controllers: IDM car-following and a two-player game controller.

The IDM baseline treats the nearest conflicting vehicle as a virtual
leader sitting at the conflict point; once the opponent clears the point
the conflict pair disappears and free-road IDM resumes.  The game
controller solves a 2x2 proceed/yield matrix with the ego as leader.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .choice import idm_acceleration
from .scene import OpmGraph, ProcessState

PROCEED = "proceed"
YIELD = "yield"


@dataclass
class IdmControllerState:
    v0: float = 10.0
    t_headway: float = 1.5
    a_max: float = 2.0
    b_comf: float = 2.0
    s0: float = 2.0
    b_hard: float = 8.0
    projection: str = "conflict-gap"

    def __post_init__(self):
        for name in ("v0", "t_headway", "a_max", "b_comf", "s0", "b_hard"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be positive")


@dataclass
class GtControllerState:
    efficiency_gain: float = 1.0
    delay_cost: float = 0.5
    collision_cost: float = 10.0
    safety_margin: float = 2.0   # s of dTTC below which both-proceed collides
    a_nom: float = 1.5
    b_nom: float = 2.0
    v0: float = 10.0
    solution: str = "stackelberg"

    def __post_init__(self):
        if not (self.collision_cost > self.efficiency_gain > 0):
            raise ValueError("need collision_cost > efficiency_gain > 0")


def idm_control(ego: ProcessState, scene: OpmGraph, state: IdmControllerState) -> float:
    """Longitudinal acceleration from IDM against virtual conflict leaders.

    Each active conflict is a stop target: a virtual stationary leader at
    the conflict point, pulled back by the geometric backoff needed to
    stay clear of the crossing path.  Projecting the opponent's own speed
    onto the ego lane would read a fast crosser as a receding leader and
    erase the braking need, so the crossing counts as blocked until the
    pair actually clears.  This is what makes plain IDM slow at junctions
    and prone to mutual deadlock.
    """
    def accel_against(gap: float, v_lead: float) -> float:
        return idm_acceleration(
            ego.v, v_lead, gap,
            v0=state.v0, t_headway=state.t_headway, a_max=state.a_max,
            b_comf=state.b_comf, s0=state.s0, b_hard=state.b_hard,
        )

    a_cmd = accel_against(math.inf, ego.v)
    for pair in scene.conflicts_for(ego.vehicle_id):
        if pair.id_i == ego.vehicle_id:
            gap, back = pair.d_i, pair.back_i
        else:
            gap, back = pair.d_j, pair.back_j
        a_cmd = min(a_cmd, accel_against(gap - back, 0.0))
    return a_cmd


def _payoff(my_move: str, their_move: str, risky: bool, p: GtControllerState) -> float:
    value = p.efficiency_gain if my_move == PROCEED else -p.delay_cost
    if risky and my_move == PROCEED and their_move == PROCEED:
        value -= p.collision_cost
    return value


def gt_control(ego: ProcessState, opponent: ProcessState | None,
               state: GtControllerState,
               delta_ttc: float = math.inf) -> tuple[str, float]:
    """Leader strategy of the proceed/yield game, with its accel command.

    The ego anticipates the opponent's best response to each of its own
    moves and picks the better outcome.  Ties at either level resolve to
    yield.  Returns (move, acceleration).
    """
    risky = opponent is not None and delta_ttc < state.safety_margin

    def best_response(ego_move: str) -> str:
        br, br_pay = YIELD, _payoff(YIELD, ego_move, risky, state)
        if _payoff(PROCEED, ego_move, risky, state) > br_pay:
            br = PROCEED
        return br

    move, pay = YIELD, _payoff(YIELD, best_response(YIELD), risky, state)
    proceed_pay = _payoff(PROCEED, best_response(PROCEED), risky, state)
    if proceed_pay > pay:
        move = PROCEED

    if move == PROCEED:
        # smooth speed tracking; a bang profile would dominate the jerk metric
        accel = state.a_nom * (1.0 - (ego.v / state.v0) ** 4)
    else:
        accel = -state.b_nom if ego.v > 0.0 else 0.0
    return move, accel
