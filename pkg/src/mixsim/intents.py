"""Intent estimation: saliency scoring, explicit-signal parsing, and gating.

The intent vector has three categorical fields plus a scalar confidence.
Fields rank task > action > style when merging conflicting evidence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .scene import HistoryBuffer, IntentPair, OpmGraph

log = logging.getLogger(__name__)

STYLES = ("aggressive", "balanced", "conservative", "unknown")
ACTIONS = ("steering-left", "steering-right", "accelerating", "decelerating",
           "cruising", "unknown")
TASKS = ("emergency", "commuting", "official", "leisure", "unknown")

GATE_THRESHOLD = 0.7

CONFIRMATORY_QUESTION = "Do you want me to accelerate to pass through?"
PROACTIVE_QUERY = "Do you intend to pass first?"


@dataclass(frozen=True)
class IntentVector:
    style: str = "unknown"
    action: str = "unknown"
    task: str = "unknown"
    confidence: float = 0.0

    def __post_init__(self) -> None:
        if self.style not in STYLES:
            raise ValueError(f"bad style: {self.style!r}")
        if self.action not in ACTIONS:
            raise ValueError(f"bad action: {self.action!r}")
        if self.task not in TASKS:
            raise ValueError(f"bad task: {self.task!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0,1]: {self.confidence}")

    @property
    def all_unknown(self) -> bool:
        return self.style == "unknown" and self.action == "unknown" and self.task == "unknown"


UNKNOWN_INTENT = IntentVector()


@dataclass
class AttentionWeights:
    """Key/value projection used by the saliency score."""

    d_k: int
    K: np.ndarray  # (d_k, d_k)
    V: np.ndarray  # (d_k,)

    @classmethod
    def from_dict(cls, raw: dict) -> "AttentionWeights":
        d_k = int(raw["d_k"])
        K = np.asarray(raw["K"], dtype=float).reshape(d_k, d_k)
        V = np.asarray(raw["V"], dtype=float).reshape(d_k)
        return cls(d_k, K, V)

    @classmethod
    def load(cls, path: str) -> "AttentionWeights":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "AttentionWeights":
        raw = json.loads(
            resources.files("mixsim.data").joinpath("attention_weights.json").read_text()
        )
        return cls.from_dict(raw)


def build_queries(graph: OpmGraph, histories: dict[str, HistoryBuffer] | None = None) -> np.ndarray:
    """Per-vehicle query rows aligned with graph.objects.

    Features: [position delta over last sample step, speed delta, accel
    magnitude, distance to ego, speed relative to ego].  Deltas are zero
    when fewer than two history samples exist.
    """
    ego = graph.objects[0]
    rows = []
    for obj in graph.objects:
        pos_delta = 0.0
        speed_delta = 0.0
        hist = (histories or {}).get(obj.vehicle_id)
        if hist is not None:
            pair = hist.last_two()
            if pair is not None:
                (_, prev), (_, cur) = pair
                pos_delta = float(np.hypot(cur.x - prev.x, cur.y - prev.y))
                speed_delta = cur.speed - prev.speed
        accel_mag = float(math.hypot(obj.ax, obj.ay))
        rel_dist = float(np.hypot(obj.x - ego.x, obj.y - ego.y))
        rel_speed = obj.speed - ego.speed
        rows.append([pos_delta, speed_delta, accel_mag, rel_dist, rel_speed])
    return np.asarray(rows, dtype=float)


def attention_saliency(queries: np.ndarray, weights: AttentionWeights) -> np.ndarray:
    """Softmax-normalized importance of each vehicle.

    Per-vehicle logit is (q K^T) . V / sqrt(d_k); the softmax runs across
    vehicles, so the result is a probability vector summing to 1.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    if q.shape[1] != weights.d_k:
        raise ValueError(f"query dim {q.shape[1]} != d_k {weights.d_k}")
    logits = (q @ weights.K.T) @ weights.V / math.sqrt(weights.d_k)
    logits = logits - np.max(logits)
    ex = np.exp(logits)
    return ex / ex.sum()


class _KeywordTable:
    def __init__(self, raw: dict) -> None:
        self.version = raw.get("version", 1)
        self.signals: dict[str, dict] = raw["signals"]
        self.keywords: list[dict] = raw["keywords"]

    @classmethod
    def default(cls) -> "_KeywordTable":
        raw = json.loads(
            resources.files("mixsim.data").joinpath("keyword_intents.json").read_text()
        )
        return cls(raw)


_TABLE: _KeywordTable | None = None


def _table() -> _KeywordTable:
    global _TABLE
    if _TABLE is None:
        _TABLE = _KeywordTable.default()
    return _TABLE


def parse_explicit_intent(channel: str, payload: str) -> IntentVector:
    """Map an explicit signal to an intent vector via the keyword table.

    Unmatched input returns the all-unknown vector with confidence 0.
    For each field the strongest matching entry wins; the vector confidence
    is the maximum across matches.
    """
    fields: dict[str, tuple[str, float]] = {}
    confidence = 0.0

    def apply(entry: dict) -> None:
        nonlocal confidence
        f, v, c = entry["field"], entry["value"], float(entry["confidence"])
        if f not in fields or c > fields[f][1]:
            fields[f] = (v, c)
        confidence = max(confidence, c)

    if channel == "turn-signal":
        # the channel carries every discrete lamp; bare "left"/"right" are
        # shorthand for the corresponding turn-signal entry
        entry = _table().signals.get(payload)
        if entry is None and not payload.endswith("-turn-signal"):
            entry = _table().signals.get(f"{payload}-turn-signal")
        if entry is not None:
            apply(entry)
        else:
            log.debug("unrecognized turn-signal payload: %r", payload)
    elif channel in ("ehmi-text", "voice-text"):
        text = payload.lower()
        for entry in _table().keywords:
            if entry["pattern"] in text:
                apply(entry)
    else:
        log.debug("unknown intent channel: %r", channel)

    return IntentVector(
        style=fields.get("style", ("unknown", 0.0))[0],
        action=fields.get("action", ("unknown", 0.0))[0],
        task=fields.get("task", ("unknown", 0.0))[0],
        confidence=confidence,
    )


def parse_intent_pair(pair: IntentPair) -> IntentVector:
    return parse_explicit_intent(pair.channel, pair.payload)


def gate_weak_intent(iv: IntentVector, threshold: float = GATE_THRESHOLD) -> IntentVector:
    """Suppress fields of a low-confidence intent (strict less-than).

    The original confidence is preserved on the gated vector for logging.
    """
    if iv.confidence < threshold:
        return IntentVector(confidence=iv.confidence)
    return iv


_FIELD_PRIORITY = ("task", "action", "style")  # highest first


def query_ego_intent(passenger_input: str, prior: IntentVector) -> IntentVector:
    """Update the ego intent from free-form passenger input.

    Field-wise merge: a parsed non-unknown value fills an unknown prior
    field outright; against a known prior value the higher-confidence
    source wins.  On exact confidence ties the fresher input wins for the
    higher-priority fields (task, action) and the prior is kept for style.
    Empty input returns the prior unchanged.
    """
    if not passenger_input.strip():
        return prior
    parsed = parse_explicit_intent("voice-text", passenger_input)
    if parsed.all_unknown:
        return prior

    merged = {f: getattr(prior, f) for f in _FIELD_PRIORITY}
    adopted = False
    for f in _FIELD_PRIORITY:
        new_val = getattr(parsed, f)
        if new_val == "unknown":
            continue
        prior_val = getattr(prior, f)
        if prior_val == "unknown" or parsed.confidence > prior.confidence:
            merged[f] = new_val
            adopted = True
        elif parsed.confidence == prior.confidence and f in ("task", "action"):
            merged[f] = new_val
            adopted = True
    conf = max(prior.confidence, parsed.confidence) if adopted else prior.confidence
    return IntentVector(style=merged["style"], action=merged["action"],
                        task=merged["task"], confidence=conf)


def confirmatory_question(iv: IntentVector, scene: OpmGraph,
                          threshold: float = GATE_THRESHOLD) -> str | None:
    """Clarification prompt when the ego intent is weak and a conflict exists.

    A weak intent is one carrying no usable field (all unknown below the
    gate threshold).  Returns None when no clarification is needed.
    """
    weak = iv.all_unknown and iv.confidence < threshold
    if weak and scene.conflicts_for(scene.ego_id):
        return CONFIRMATORY_QUESTION
    return None


def intents_toward(graph: OpmGraph, target_id: str) -> dict[str, IntentVector]:
    """Parsed + gated intents from each source vehicle toward a target."""
    out: dict[str, IntentVector] = {}
    for pair in graph.intents:
        if pair.target != target_id and pair.target != "*":
            continue
        parsed = parse_intent_pair(pair)
        prev = out.get(pair.source)
        if prev is None or parsed.confidence > prev.confidence:
            out[pair.source] = parsed
    return {k: gate_weak_intent(v) for k, v in out.items()}
