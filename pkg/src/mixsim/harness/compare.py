"""Serialization-format comparison on randomized two-vehicle scenes.

Each scene is rendered in the three prompt formats and fed to the local
rule-based recommender with identical candidate probabilities, so any
decision difference is attributable to the scene text alone.  With an
endpoint configured, per-request latency and agreement against the local
labels are measured as well.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..choice import DecisionContext, UtilityParams, build_features, corrected_probs
from ..geometry import route_polyline, standard_intersection
from ..intents import UNKNOWN_INTENT, gate_weak_intent, parse_intent_pair, query_ego_intent
from ..reasoner import MockReasoner, ReasonerRequest
from ..scene import (HistoryBuffer, IntentPair, OpmGraph, Route, VehicleState,
                     build_opm_graph, serialize_opm)

FORMATS = ("opm", "raw", "simple")

URGENT_UTTERANCE = "I am in a hurry and hope to pass through as soon as possible."
OPP_URGENT_TEXT = "Emergency, heading to the hospital."

# signaling events are momentary; most random snapshots catch none
P_BRAKE_FLASH = 0.03
P_OPP_URGENT = 0.02
P_EGO_URGENT = 0.01
P_TURNING_EGO = 0.7


@dataclass
class SceneSample:
    graph: OpmGraph
    all_states: list[VehicleState]
    histories: dict[str, HistoryBuffer]
    route_turn: str
    ego_intent: object
    other_intents: dict
    probs: list[float]


def _state_on(route, vid: str, s: float, v: float) -> VehicleState:
    pos = route.point_at(s)
    tan = route.tangent_at(s)
    return VehicleState(vid, float(pos[0]), float(pos[1]),
                        float(v * tan[0]), float(v * tan[1]), 0.0, 0.0,
                        float(np.arctan2(tan[1], tan[0])))


def generate_scene(rng: np.random.Generator, layout=None) -> SceneSample:
    layout = layout if layout is not None else standard_intersection()
    turning = rng.random() < P_TURNING_EGO
    ego_lane = "WB_left" if turning else "WB_through"
    ego_path = route_polyline(layout, [ego_lane])
    opp_path = route_polyline(layout, ["EB_through"])
    far_path = route_polyline(layout, ["NB_through"])

    ego_s = float(rng.uniform(5.0, 55.0))
    opp_s = float(rng.uniform(10.0, 60.0))
    ego_v = float(rng.uniform(3.0, 12.0))
    opp_v = float(rng.uniform(3.0, 12.0))

    ego = _state_on(ego_path, "CAV", ego_s, ego_v)
    opp = _state_on(opp_path, "HDV", opp_s, opp_v)
    far = _state_on(far_path, "TRK", 5.0, 8.0)

    routes = {
        "CAV": Route(ego_path, ego_s, "left" if turning else "through"),
        "HDV": Route(opp_path, opp_s, "through"),
        "TRK": Route(far_path, 5.0, "through"),
    }

    intents: list[IntentPair] = []
    if rng.random() < P_BRAKE_FLASH:
        intents.append(IntentPair("HDV", "CAV", "turn-signal", "brake-flash"))
    if rng.random() < P_OPP_URGENT:
        intents.append(IntentPair("HDV", "CAV", "v2v", OPP_URGENT_TEXT))

    graph = build_opm_graph(ego, [opp, far], layout, routes, intents)

    histories: dict[str, HistoryBuffer] = {}
    for st in (ego, opp, far):
        buf = HistoryBuffer()
        for k in (2, 1, 0):
            past = VehicleState(st.vehicle_id, st.x - st.vx * 0.1 * k,
                                st.y - st.vy * 0.1 * k, st.vx, st.vy,
                                st.ax, st.ay, st.phi)
            buf.push(-0.1 * k, past)
        histories[st.vehicle_id] = buf

    utterance = URGENT_UTTERANCE if rng.random() < P_EGO_URGENT else ""
    ego_intent = gate_weak_intent(query_ego_intent(utterance, UNKNOWN_INTENT))
    other_intents = {
        iv.source: gate_weak_intent(parse_intent_pair(iv))
        for iv in graph.intents if iv.target == "CAV"
    }

    params = UtilityParams()
    feats = build_features(graph, routes["CAV"].turn, ego_intent, other_intents,
                           None, params, v0=1.25 * ego_v)
    dist = corrected_probs(feats, DecisionContext(), params)
    probs = [float(p) for p in dist.probs]
    return SceneSample(graph, [ego, opp, far], histories,
                       routes["CAV"].turn, ego_intent, other_intents, probs)


def _count_sections(text: str) -> dict:
    objects = processes = relations = 0
    section = None
    for line in text.splitlines():
        stripped = line.strip()
        if stripped in ("Objects:", "Processes:", "Relations:"):
            section = stripped[:-1].lower()
        elif stripped.startswith("- "):
            if section == "objects":
                objects += 1
            elif section == "processes":
                processes += 1
            elif section == "relations":
                relations += 1
    return {"objects": objects, "processes": processes, "relations": relations}


def compare_formats(n_scenes: int = 200, seed: int = 0,
                    endpoint: str | None = None,
                    dttc_threshold: float = 3.0) -> dict:
    rng = np.random.default_rng(seed)
    layout = standard_intersection()
    mock = MockReasoner(dttc_threshold=dttc_threshold)

    lengths = {f: [] for f in FORMATS}
    counts = {f: {"objects": 0, "processes": 0, "relations": 0} for f in FORMATS}
    decisions = {f: [] for f in FORMATS}
    latencies: list[float] = []
    endpoint_hits = 0
    endpoint_total = 0
    steps_seen: list[int] = []

    for _ in range(n_scenes):
        sample = generate_scene(rng, layout)
        texts = {
            "opm": serialize_opm(sample.graph, "opm"),
            "raw": serialize_opm(sample.graph, "raw", all_vehicles=sample.all_states,
                                 histories=sample.histories),
            "simple": serialize_opm(sample.graph, "simple"),
        }
        for fmt in FORMATS:
            lengths[fmt].append(len(texts[fmt]))
            for key, val in _count_sections(texts[fmt]).items():
                counts[fmt][key] += val
            req = ReasonerRequest(texts[fmt], sample.probs, sample.ego_intent,
                                  list(sample.other_intents.values()))
            decisions[fmt].append(mock.recommend(req).chosen_maneuver)

        if endpoint:
            import requests

            req = ReasonerRequest(texts["opm"], sample.probs, sample.ego_intent,
                                  list(sample.other_intents.values()))
            t0 = time.perf_counter()
            try:
                resp = requests.post(endpoint, json=req.to_wire(), timeout=10.0)
                resp.raise_for_status()
                raw = resp.json()
                latencies.append((time.perf_counter() - t0) * 1000.0)
                endpoint_total += 1
                if raw.get("chosen_maneuver") == decisions["opm"][-1].value:
                    endpoint_hits += 1
                if isinstance(raw.get("reasoning_steps"), int):
                    steps_seen.append(raw["reasoning_steps"])
            except Exception:
                endpoint_total += 1

    agree = float(np.mean([a is b for a, b in zip(decisions["opm"], decisions["simple"])]))
    report = {
        "scenes": n_scenes,
        "agreement_opm_simple": agree,
        "formats": {
            fmt: {
                "mean_length": float(np.mean(lengths[fmt])),
                "objects": counts[fmt]["objects"] / n_scenes,
                "processes": counts[fmt]["processes"] / n_scenes,
                "relations": counts[fmt]["relations"] / n_scenes,
            }
            for fmt in FORMATS
        },
    }
    if endpoint:
        report["endpoint"] = {
            "url": endpoint,
            "requests": endpoint_total,
            "latency_ms_mean": float(np.mean(latencies)) if latencies else None,
            "accuracy_vs_local": (endpoint_hits / endpoint_total) if endpoint_total else None,
            "reasoning_steps": (float(np.mean(steps_seen)) if steps_seen else "N/A"),
        }
    return report


def format_report(report: dict) -> str:
    lines = [f"scenes: {report['scenes']}",
             f"decision agreement (opm vs simple): {report['agreement_opm_simple']:.1%}",
             f"{'format':<8} {'mean_len':>9} {'objects':>8} {'processes':>10} {'relations':>10}"]
    for fmt, cell in report["formats"].items():
        lines.append(f"{fmt:<8} {cell['mean_length']:>9.1f} {cell['objects']:>8.2f} "
                     f"{cell['processes']:>10.2f} {cell['relations']:>10.2f}")
    ep = report.get("endpoint")
    if ep:
        lat = f"{ep['latency_ms_mean']:.1f} ms" if ep["latency_ms_mean"] is not None else "n/a"
        acc = f"{ep['accuracy_vs_local']:.1%}" if ep["accuracy_vs_local"] is not None else "n/a"
        lines.append(f"endpoint {ep['url']}: latency {lat}, agreement-with-local {acc}, "
                     f"reasoning steps {ep['reasoning_steps']}")
    return "\n".join(lines)
