"""Canonical maneuver set shared by the choice, planning, and advisory layers."""

from __future__ import annotations

from enum import Enum


class Maneuver(Enum):
    """Discrete maneuver alternatives, in canonical (tie-break) order."""

    STRAIGHT_ACCEL = "StraightAccel"
    STRAIGHT_DECEL = "StraightDecel"
    STRAIGHT_CONST = "StraightConst"
    LEFT_TURN = "LeftTurn"
    RIGHT_TURN = "RightTurn"

    @property
    def is_straight(self) -> bool:
        return self in _STRAIGHT

    @property
    def is_turn(self) -> bool:
        return self in (Maneuver.LEFT_TURN, Maneuver.RIGHT_TURN)


MANEUVERS: tuple[Maneuver, ...] = tuple(Maneuver)

_STRAIGHT = frozenset(
    {Maneuver.STRAIGHT_ACCEL, Maneuver.STRAIGHT_DECEL, Maneuver.STRAIGHT_CONST}
)

# Maneuvers compatible with each route turn label.  A vehicle routed through a
# turn still has the straight alternatives physically available on approach,
# so only the contrary turn is treated as infeasible (hard-pruned); soft route
# penalties on the matching degree are applied separately in the choice layer.
ROUTE_FEASIBLE: dict[str, frozenset[Maneuver]] = {
    "through": _STRAIGHT,
    "merge": _STRAIGHT,
    "left": _STRAIGHT | {Maneuver.LEFT_TURN},
    "right": _STRAIGHT | {Maneuver.RIGHT_TURN},
}

# Maneuvers whose matching degree keeps its full weight for a route label.
# Anything outside this set gets the multiplicative route penalty.
ROUTE_PREFERRED: dict[str, frozenset[Maneuver]] = {
    "through": _STRAIGHT,
    "merge": _STRAIGHT,
    "left": frozenset({Maneuver.LEFT_TURN}),
    "right": frozenset({Maneuver.RIGHT_TURN}),
}


def route_pruned(turn: str) -> frozenset[Maneuver]:
    """Maneuvers that are infeasible for a route with the given turn label."""
    feasible = ROUTE_FEASIBLE.get(turn, _STRAIGHT)
    return frozenset(m for m in MANEUVERS if m not in feasible)


def maneuver_from_name(name: str) -> Maneuver:
    for m in MANEUVERS:
        if m.value == name:
            return m
    raise ValueError(f"unknown maneuver name: {name!r}")
