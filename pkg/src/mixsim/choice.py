"""Utility-based maneuver selection.

Each maneuver gets a feature vector [matching, safety, efficiency,
risky-exposure, indeterminate-exposure]; a linear utility feeds a
multinomial logit, which is then corrected for history consistency and
switching cost.  A semantic recommender can override the statistical
argmax only when it is confident and its choice is route-feasible.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .intents import GATE_THRESHOLD, IntentVector, gate_weak_intent
from .maneuvers import MANEUVERS, Maneuver, ROUTE_PREFERRED, route_pruned
from .reasoner import ReasonerRequest, ReasonerResponse
from .scene import DTTC_DEFAULT, OpmGraph, Route, serialize_opm

B_HARD = 8.0  # m/s^2, physical braking limit used for clamping

# Relative exposure of each maneuver to a crossing risk.  Deceleration is
# the refuge maneuver; full acceleration carries the whole risk.
AGGRESSIVENESS: dict[Maneuver, float] = {
    Maneuver.STRAIGHT_ACCEL: 1.0,
    Maneuver.STRAIGHT_DECEL: 0.0,
    Maneuver.STRAIGHT_CONST: 0.5,
    Maneuver.LEFT_TURN: 0.5,
    Maneuver.RIGHT_TURN: 0.5,
}

def efficiency_degree(maneuver: Maneuver, speed: float, v0: float) -> float:
    """Progress value of a maneuver at the current speed.

    Accelerating is worth the remaining headroom below the desired speed,
    holding speed is worth the fraction of it already attained, and braking
    is only worth anything while actually moving.  The spread between
    accelerate and decelerate reaches 1.0 at standstill so that the history
    and switch corrections (gamma + lambda <= 0.8) can never pin a stopped
    vehicle in a braking maneuver on a clear road.
    """
    ratio = min(speed / v0, 1.0) if v0 > 1e-9 else 0.0
    if maneuver is Maneuver.STRAIGHT_ACCEL:
        return 1.0 - ratio
    if maneuver is Maneuver.STRAIGHT_DECEL:
        return 0.3 * ratio
    if maneuver is Maneuver.STRAIGHT_CONST:
        return ratio
    return 0.3 + 0.5 * ratio


@dataclass
class UtilityParams:
    """Weights and thresholds of the choice layer."""

    beta: tuple[float, float, float, float, float] = (2.0, 1.5, 1.0, -4.5, -0.5)
    gamma: float = 0.5          # history-consistency gain
    lam: float = 0.3            # switching penalty
    route_penalty: float = 0.05  # multiplier on matching for off-route maneuvers
    confidence_gate: float = GATE_THRESHOLD
    dttc_threshold: float = DTTC_DEFAULT
    # IDM parameters for the matching-degree modulation
    idm_a_max: float = 2.0
    idm_b_comf: float = 2.0
    idm_s0: float = 2.0
    idm_t_headway: float = 1.5
    caution_gain: float = 1.25  # risk amplification for a conservative ego


def idm_acceleration(v: float, v_lead: float, gap: float, v0: float,
                     a_max: float = 2.0, b_comf: float = 2.0,
                     s0: float = 2.0, t_headway: float = 1.5,
                     b_hard: float = B_HARD) -> float:
    """Intelligent-driver-model acceleration, clamped to [-b_hard, a_max].

    A non-positive gap returns the hard-braking limit.
    """
    if gap <= 0.0:
        return -b_hard
    dv = v - v_lead
    s_star = s0 + v * t_headway + v * dv / (2.0 * math.sqrt(a_max * b_comf))
    s_star = max(s_star, 0.0)
    a = a_max * (1.0 - (v / v0) ** 4 - (s_star / gap) ** 2)
    return float(min(max(a, -b_hard), a_max))


@dataclass
class ManeuverFeatures:
    """Per-maneuver feature rows in canonical maneuver order."""

    matrix: np.ndarray  # (5, 5): matching, safety, efficiency, risky, indet
    risky: bool
    indeterminate: bool

    def flat(self) -> np.ndarray:
        """Scenario descriptor used for history-consistency comparisons."""
        return self.matrix.reshape(-1)


def build_features(scene: OpmGraph, route_turn: str, ego_intent: IntentVector,
                   other_intents: dict[str, IntentVector],
                   leader: tuple[float, float] | None,
                   params: UtilityParams, v0: float = 10.0) -> ManeuverFeatures:
    """Assemble the feature matrix from the scene and gated intents.

    leader is (gap, lead speed) for the nearest on-path vehicle ahead, or
    None on a free road.
    """
    ego_conflicts = scene.conflicts_for(scene.ego_id)
    risky_flag = any(c.determinate and c.delta_ttc < params.dttc_threshold
                     for c in ego_conflicts)

    # Risk level: worst determinate conflict scaled into (0, 1].  An
    # indeterminate coupling (someone near standstill) cannot be timed at
    # all, so it commands maximal caution outright.
    r = 0.0
    indet_r = 0.0
    for c in ego_conflicts:
        if not c.determinate:
            indet_r = 1.0
        elif c.delta_ttc < params.dttc_threshold:
            r = max(r, 1.0 - c.delta_ttc / params.dttc_threshold)
    r = max(r, indet_r)
    if ego_intent.style == "conservative":
        r = min(1.0, r * params.caution_gain)

    ego_urgent = ego_intent.task == "emergency"
    opp_urgent = any(iv.task == "emergency" for iv in other_intents.values())

    ego_process = scene.process_for(scene.ego_id)
    ego_speed = ego_process.v if ego_process else 0.0

    m_map = None
    if leader is not None:
        gap, v_lead = leader
        a_idm = idm_acceleration(ego_speed, v_lead, gap, v0, params.idm_a_max,
                                 params.idm_b_comf, params.idm_s0,
                                 params.idm_t_headway)
        m_map = min(max((a_idm + B_HARD) / (params.idm_a_max + B_HARD), 0.0), 1.0)

    preferred = ROUTE_PREFERRED.get(route_turn, ROUTE_PREFERRED["through"])
    rows = []
    for m in MANEUVERS:
        matching = 1.0
        if m_map is not None:
            if m is Maneuver.STRAIGHT_ACCEL:
                matching *= m_map
            elif m is Maneuver.STRAIGHT_DECEL:
                matching *= 1.0 - m_map
            elif m is Maneuver.STRAIGHT_CONST:
                matching *= 1.0 - abs(2.0 * m_map - 1.0)
        if m not in preferred:
            matching *= params.route_penalty

        aggr = AGGRESSIVENESS[m]
        safety = 1.0 - r * aggr

        eff = efficiency_degree(m, ego_speed, v0)
        if ego_urgent:
            if m is Maneuver.STRAIGHT_ACCEL:
                eff += 0.1
            elif m is Maneuver.STRAIGHT_CONST:
                eff += 0.05
        if opp_urgent and ego_conflicts and m is Maneuver.STRAIGHT_DECEL:
            # Yielding to an urgent opponent resolves the conflict sooner.
            eff += 0.2
        eff = min(eff, 1.0)

        rows.append([matching, safety, eff,
                     (1.0 if risky_flag else 0.0) * aggr,
                     indet_r * aggr])

    return ManeuverFeatures(np.asarray(rows, dtype=float), risky_flag, indet_r > 0.0)


def logit_probs(utilities) -> np.ndarray:
    """Max-subtracted multinomial logit; sums to 1 and is shift-invariant."""
    v = np.asarray(utilities, dtype=float)
    ex = np.exp(v - np.max(v))
    return ex / ex.sum()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def history_consistency(current: np.ndarray, past: list[np.ndarray]) -> float:
    """Best cosine similarity between the current descriptor and history.

    Empty history contributes 0, as do zero-norm vectors.
    """
    if not past:
        return 0.0
    return max(cosine_similarity(current, p) for p in past)


def apply_corrections(utilities: np.ndarray, consistency: np.ndarray,
                      prev: Maneuver | None, params: UtilityParams) -> np.ndarray:
    """V~ = V + gamma*D - lambda*[switch]; no switch cost on the first pick."""
    v = np.asarray(utilities, dtype=float) + params.gamma * np.asarray(consistency, dtype=float)
    if prev is not None:
        penalty = np.full(len(MANEUVERS), params.lam)
        penalty[MANEUVERS.index(prev)] = 0.0
        v = v - penalty
    return v


@dataclass
class ChoiceDistribution:
    utilities: np.ndarray
    consistency: np.ndarray
    corrected: np.ndarray
    probs: np.ndarray

    def argmax(self) -> Maneuver:
        # np.argmax takes the first maximum, which is canonical order.
        return MANEUVERS[int(np.argmax(self.probs))]


def corrected_probs(features: ManeuverFeatures, ctx: "DecisionContext",
                    params: UtilityParams) -> ChoiceDistribution:
    utilities = features.matrix @ np.asarray(params.beta, dtype=float)
    current = features.flat()
    consistency = np.array([
        history_consistency(current, list(ctx.history[m])) for m in MANEUVERS
    ])
    corrected = apply_corrections(utilities, consistency, ctx.prev, params)
    return ChoiceDistribution(utilities, consistency, corrected, logit_probs(corrected))


class DecisionContext:
    """Rolling per-maneuver history of scenario descriptors plus the last pick."""

    def __init__(self, maxlen: int = 50) -> None:
        self.prev: Maneuver | None = None
        self.history: dict[Maneuver, deque[np.ndarray]] = {
            m: deque(maxlen=maxlen) for m in MANEUVERS
        }
        self.decision_count = 0

    def update(self, chosen: Maneuver, descriptor: np.ndarray) -> None:
        self.history[chosen].append(np.array(descriptor, dtype=float))
        self.prev = chosen
        self.decision_count += 1


@dataclass
class Decision:
    final: Maneuver
    distribution: ChoiceDistribution
    response: ReasonerResponse | None
    question: str | None
    audit: dict


def decide(scene: OpmGraph, route: Route, ego_intent: IntentVector,
           other_intents: dict[str, IntentVector], saliency: np.ndarray | None,
           ctx: DecisionContext, params: UtilityParams, reasoner,
           leader: tuple[float, float] | None = None, v0: float = 10.0,
           scene_fmt: str = "opm", t: float = 0.0) -> Decision:
    """One full decision tick.

    Intents are gated before use.  The recommender's choice wins only when
    its confidence clears the gate and the maneuver is feasible for the
    route; otherwise the corrected statistical argmax stands.
    """
    gated_ego = gate_weak_intent(ego_intent, params.confidence_gate)
    gated_others = {k: gate_weak_intent(v, params.confidence_gate)
                    for k, v in other_intents.items()}

    features = build_features(scene, route.turn, gated_ego, gated_others,
                              leader, params, v0)
    dist = corrected_probs(features, ctx, params)

    scene_text = serialize_opm(scene, scene_fmt)
    if saliency is not None and len(saliency) == len(scene.objects):
        lines = [f"{o.vehicle_id}={score:.2f}"
                 for o, score in zip(scene.objects, saliency)]
        scene_text += "Saliency: " + ", ".join(lines) + "\n"

    req = ReasonerRequest(scene_text, [float(p) for p in dist.probs],
                          gated_ego, list(gated_others.values()))
    response: ReasonerResponse | None
    try:
        response = reasoner.recommend(req)
    except Exception:  # pragma: no cover - recommenders are expected to degrade internally
        response = None

    pruned = route_pruned(route.turn)
    statistical = dist.argmax()
    if (response is not None and response.confidence >= params.confidence_gate
            and response.chosen_maneuver not in pruned):
        final = response.chosen_maneuver
        source = "reasoner"
    else:
        final = statistical
        source = "statistical"

    question = None
    if gated_ego.all_unknown and gated_ego.confidence < params.confidence_gate:
        from .intents import confirmatory_question

        question = confirmatory_question(gated_ego, scene, params.confidence_gate)

    audit = {
        "t": t,
        "utilities": [float(x) for x in dist.utilities],
        "consistency": [float(x) for x in dist.consistency],
        "corrected": [float(x) for x in dist.corrected],
        "probs": [float(x) for x in dist.probs],
        "statistical": statistical.value,
        "reasoner_chosen": response.chosen_maneuver.value if response else None,
        "reasoner_confidence": response.confidence if response else None,
        "source": source,
        "final": final.value,
        "risky": features.risky,
        "indeterminate": features.indeterminate,
    }

    ctx.update(final, features.flat())
    return Decision(final, dist, response, question, audit)


def find_leader(scene: OpmGraph, route: Route,
                max_gap: float = 80.0, corridor: float = 2.0,
                stall_speed: float = 0.5, align: float = 0.5) -> tuple[float, float] | None:
    """Nearest vehicle ahead in the ego corridor: (gap, speed) or None.

    Moving traffic counts as a leader only when its velocity roughly
    follows the ego path (cosine >= align); a crossing vehicle sweeps
    the corridor for a moment and vacates on its own, and treating it
    as a car to follow produces phantom emergency braking.  A stalled
    body blocks regardless of heading and reads as a zero-speed leader.
    """
    best: tuple[float, float] | None = None
    for obj in scene.objects[1:]:
        s, lat = route.path.project(obj.position)
        gap = s - route.progress
        if abs(lat) > corridor or not (0.0 < gap <= max_gap):
            continue
        speed = obj.speed
        if speed < stall_speed:
            cand = (gap, 0.0)
        else:
            tan = route.path.tangent_at(s)
            cos = (obj.vx * tan[0] + obj.vy * tan[1]) / speed
            if cos < align:
                continue
            cand = (gap, speed * cos)
        if best is None or cand[0] < best[0]:
            best = cand
    return best
