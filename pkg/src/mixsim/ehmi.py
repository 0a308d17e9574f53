"""External HMI message templating with a hard character budget."""

from __future__ import annotations

from dataclasses import dataclass

from .maneuvers import Maneuver

BUDGET = 120
ELLIPSIS = "..."

TEMPLATES: dict[Maneuver, str] = {
    Maneuver.STRAIGHT_ACCEL: "I am speeding up to pass first.",
    Maneuver.STRAIGHT_DECEL: "I am slowing down; please go ahead.",
    Maneuver.STRAIGHT_CONST: "I am keeping my speed; please proceed with caution.",
    Maneuver.LEFT_TURN: "I am turning left; please watch for me.",
    Maneuver.RIGHT_TURN: "I am turning right; please watch for me.",
}


@dataclass
class EhmiMessage:
    t: float
    source: str
    text: str
    trigger: str  # decision | clarification | reasoner

    def as_dict(self) -> dict:
        return {"t": self.t, "source": self.source, "text": self.text,
                "trigger": self.trigger}


def truncate_message(text: str, budget: int = BUDGET) -> str:
    """Clip an over-budget draft at a word boundary and add an ellipsis."""
    if len(text) <= budget:
        return text
    cut = text[: budget - len(ELLIPSIS)]
    space = cut.rfind(" ")
    if space > 0:
        cut = cut[:space]
    return cut.rstrip() + ELLIPSIS


def template_for(maneuver: Maneuver) -> str:
    return TEMPLATES[maneuver]


def ehmi_render(decision: Maneuver, reasoner_text: str | None = None,
                question: str | None = None, budget: int = BUDGET) -> tuple[str, str]:
    """Produce the broadcast text for a decision.

    A pending clarification question takes precedence; otherwise reasoner
    text is used when present and within budget, falling back to the
    per-maneuver template.  The result is always budget-clipped.

    Returns (text, trigger).
    """
    if question:
        return truncate_message(question, budget), "clarification"
    if reasoner_text and len(reasoner_text) <= budget:
        return reasoner_text, "reasoner"
    return truncate_message(template_for(decision), budget), "decision"
