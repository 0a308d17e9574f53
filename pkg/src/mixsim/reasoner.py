"""Semantic advisory layer: a deterministic rule-based recommender plus an
optional HTTP backend speaking the same request/response schema.

The statistical choice layer consults the recommender each decision tick;
low-confidence recommendations are ignored downstream, so the rule table
only asserts itself in clearly-signaled situations.
"""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field

import requests

from .ehmi import template_for
from .intents import IntentVector
from .maneuvers import MANEUVERS, Maneuver, maneuver_from_name, route_pruned
from .scene import DTTC_DEFAULT, parse_opm

log = logging.getLogger(__name__)

ENV_URL = "MIXSIM_REASONER_URL"
DEFAULT_TIMEOUT = 2.0
PRUNE_FLOOR = 0.02
CONFIDENT = 0.7


@dataclass
class ReasonerRequest:
    scene_text: str
    candidate_probs: list[float]
    ego_intent: IntentVector
    other_intents: list[IntentVector] = field(default_factory=list)
    template_id: str = "crossing-v1"

    def to_wire(self) -> dict:
        return {
            "scene_text": self.scene_text,
            "candidate_probs": list(self.candidate_probs),
            "ego_intent": _intent_wire(self.ego_intent),
            "other_intents": [_intent_wire(iv) for iv in self.other_intents],
            "template_id": self.template_id,
        }


@dataclass
class ReasonerResponse:
    chosen_maneuver: Maneuver
    pruned: list[Maneuver]
    confidence: float
    rationale_text: str
    ehmi_text: str = ""

    def to_wire(self) -> dict:
        return {
            "chosen_maneuver": self.chosen_maneuver.value,
            "pruned": [m.value for m in self.pruned],
            "confidence": self.confidence,
            "rationale_text": self.rationale_text,
            "ehmi_text": self.ehmi_text,
        }


def _intent_wire(iv: IntentVector) -> dict:
    return {"style": iv.style, "action": iv.action, "task": iv.task,
            "confidence": iv.confidence}


def _validate_probs(probs) -> list[float]:
    vals = [float(p) for p in probs]
    if len(vals) != len(MANEUVERS):
        raise ValueError(f"candidate_probs must have {len(MANEUVERS)} entries")
    if any(p < 0 or not p == p for p in vals):
        raise ValueError("candidate_probs must be non-negative and finite")
    if abs(sum(vals) - 1.0) > 1e-6:
        raise ValueError("candidate_probs must sum to 1")
    return vals


_LANE_TAG = re.compile(r"lane=\S+\[(\w+)\]")


class MockReasoner:
    """Deterministic rule-table recommender.

    Scene understanding is text-only: risky conflicts are read from the
    Relations section of the prompt when one exists, and the ego route's
    turn label from the first process line.  Formats omitting that
    structure (raw, simple) degrade gracefully to the statistical argmax.
    """

    def __init__(self, dttc_threshold: float = DTTC_DEFAULT,
                 prune_floor: float = PRUNE_FLOOR) -> None:
        self.dttc_threshold = dttc_threshold
        self.prune_floor = prune_floor

    def recommend(self, req: ReasonerRequest) -> ReasonerResponse:
        probs = _validate_probs(req.candidate_probs)
        base = MANEUVERS[max(range(len(probs)), key=lambda i: (probs[i], -i))]

        parsed = parse_opm(req.scene_text)
        risky = any(
            c.get("dTTC", float("inf")) < self.dttc_threshold
            for c in parsed["conflicts"]
        )
        # a conflict whose timing cannot be resolved (opponent at standstill)
        # still blocks the ego; a yield signal turns it into a usable gap
        stalled = any(
            math.isinf(c.get("dTTC", 0.0)) for c in parsed["conflicts"]
        )
        ego_turn = None
        if parsed["processes"]:
            first = next(iter(parsed["processes"].values()))
            ego_turn = first.get("turn")

        opp_yielding = any(
            iv.confidence >= CONFIDENT and iv.action == "decelerating"
            for iv in req.other_intents
        )
        opp_ambiguous = any(
            iv.confidence >= CONFIDENT and iv.action == "unknown"
            for iv in req.other_intents
        )
        ego_urgent = (req.ego_intent.task == "emergency"
                      and req.ego_intent.confidence >= CONFIDENT)

        if (risky or stalled) and opp_yielding:
            # a ceded gap is taken, not returned: never answer a yield signal
            # with another yield
            if stalled:
                # the opponent is standing still for us; lingering inside the
                # conflict zone is worse than clearing it promptly
                chosen = Maneuver.STRAIGHT_ACCEL
            else:
                allowed = [m for m in MANEUVERS if m is not Maneuver.STRAIGHT_DECEL]
                if ego_turn:
                    blocked = route_pruned(ego_turn)
                    allowed = [m for m in allowed if m not in blocked]
                chosen = max(allowed,
                             key=lambda m: (probs[MANEUVERS.index(m)], -MANEUVERS.index(m)))
            conf = 0.85
            rationale = "Opposing vehicle has signaled yielding; proceeding through the gap."
        elif risky and opp_ambiguous:
            chosen, conf = Maneuver.STRAIGHT_DECEL, 0.9
            rationale = ("Conflict is imminent and the opposing intent is unclear; "
                         "slowing down until it resolves.")
        elif ego_urgent and not risky:
            chosen, conf = Maneuver.STRAIGHT_ACCEL, 0.8
            rationale = "Trip is urgent and no risky conflict is present; passing through promptly."
        else:
            chosen, conf = base, 0.6
            rationale = "No overriding semantic cue; keeping the statistically preferred maneuver."

        pruned: set[Maneuver] = set()
        if ego_turn:
            pruned |= route_pruned(ego_turn)
        pruned |= {m for m, p in zip(MANEUVERS, probs) if p < self.prune_floor}
        pruned.discard(chosen)

        return ReasonerResponse(
            chosen_maneuver=chosen,
            pruned=sorted(pruned, key=lambda m: MANEUVERS.index(m)),
            confidence=conf,
            rationale_text=rationale,
            ehmi_text=template_for(chosen),
        )


class ExternalReasoner:
    """HTTP backend with a strict reply schema and mock fallback.

    Any transport error, timeout, or schema violation falls back to the
    local rule table with a diagnostic, so the decision loop never stalls.
    """

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT,
                 fallback: MockReasoner | None = None) -> None:
        self.url = url
        self.timeout = timeout
        self.fallback = fallback or MockReasoner()

    def recommend(self, req: ReasonerRequest) -> ReasonerResponse:
        try:
            http = requests.post(self.url, json=req.to_wire(), timeout=self.timeout)
            http.raise_for_status()
            return self._parse_reply(http.json())
        except Exception as exc:  # noqa: BLE001 - every failure degrades the same way
            log.warning("external reasoner failed (%s); using local rules", exc)
            return self.fallback.recommend(req)

    @staticmethod
    def _parse_reply(raw: dict) -> ReasonerResponse:
        if not isinstance(raw, dict):
            raise ValueError("reply is not an object")
        chosen = maneuver_from_name(raw["chosen_maneuver"])
        pruned = [maneuver_from_name(name) for name in raw.get("pruned", [])]
        if chosen in pruned:
            raise ValueError("chosen maneuver appears in pruned list")
        confidence = float(raw["confidence"])
        if not 0.0 <= confidence <= 1.0:
            raise ValueError("confidence outside [0,1]")
        rationale = raw.get("rationale_text", "")
        if not isinstance(rationale, str):
            raise ValueError("rationale_text must be a string")
        ehmi = raw.get("ehmi_text", "")
        if not isinstance(ehmi, str):
            raise ValueError("ehmi_text must be a string")
        return ReasonerResponse(chosen, pruned, confidence, rationale, ehmi)


def make_reasoner(env: dict | None = None):
    """Mock by default; HTTP-backed when the URL env var is set."""
    env = env if env is not None else os.environ
    url = env.get(ENV_URL, "").strip()
    if url:
        return ExternalReasoner(url)
    return MockReasoner()
