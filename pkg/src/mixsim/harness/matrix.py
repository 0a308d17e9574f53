"""Cross-product batch experiments: controllers x speed classes x repetitions.

Each (speed, rep) cell draws one human-driver style and speed jitter from
the master seed, and every controller is evaluated against that same
draw, so per-cell comparisons are paired.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..simulation import (HDV_STYLES, MetricsRecord, build_merging_scenario,
                          build_standard_scenario, run_episode)

DEFAULT_CONTROLLERS = ("idm", "gt", "proposed")
DEFAULT_SPEEDS = (6.0, 8.0, 10.0)
DEFAULT_REPS = 30


@dataclass
class MatrixResult:
    records: list[MetricsRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _rep_draws(speeds, reps: int, seed: int) -> dict:
    """Per-(speed, rep) HDV style, speed jitter, and episode seed."""
    rng = np.random.default_rng(seed)
    draws = {}
    for speed in speeds:
        for rep in range(reps):
            style = str(rng.choice(HDV_STYLES))
            factor = float(rng.uniform(0.9, 1.1))
            ep_seed = int(rng.integers(0, 2**31 - 1))
            draws[(speed, rep)] = (style, factor, ep_seed)
    return draws


def run_matrix(controllers=DEFAULT_CONTROLLERS, speeds=DEFAULT_SPEEDS,
               reps: int = DEFAULT_REPS, seed: int = 7,
               geometry: str = "intersection",
               audit_sink: list | None = None) -> MatrixResult:
    builder = build_standard_scenario if geometry == "intersection" else build_merging_scenario
    draws = _rep_draws(speeds, reps, seed)
    records: list[MetricsRecord] = []
    for controller in controllers:
        for speed in speeds:
            for rep in range(reps):
                style, factor, ep_seed = draws[(speed, rep)]
                doc = builder(speed_class=speed, controller=controller,
                              seed=ep_seed, hdv_style=style,
                              hdv_speed_factor=factor)
                run_id = f"{controller}-{speed:g}-{rep:02d}"
                _, rec = run_episode(doc, run_id=run_id, speed_class=speed,
                                     audit_sink=audit_sink)
                records.append(rec)
    return MatrixResult(records=records, summary=summarize(records))


def summarize(records: list[MetricsRecord]) -> dict:
    """Per-(controller, speed) means and standard deviations."""
    cells: dict[tuple[str, float], list[MetricsRecord]] = {}
    for rec in records:
        cells.setdefault((rec.controller, rec.speed_class), []).append(rec)
    out = {}
    for key in sorted(cells):
        rows = cells[key]
        speeds = [r.avg_speed for r in rows]
        jerks = [r.avg_jerk for r in rows]
        confl = [r.avg_conflict_duration for r in rows]
        out[key] = {
            "n": len(rows),
            "avg_speed_mean": float(np.mean(speeds)),
            "avg_speed_std": float(np.std(speeds)),
            "avg_jerk_mean": float(np.mean(jerks)),
            "avg_jerk_std": float(np.std(jerks)),
            "avg_conflict_duration_mean": float(np.mean(confl)),
            "avg_conflict_duration_std": float(np.std(confl)),
            "collisions": sum(1 for r in rows if r.collision),
        }
    return out


def write_csv(records: list[MetricsRecord], path: str | Path | None = None) -> str:
    """Fixed-column CSV; returns the text (and writes it when path given)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricsRecord.COLUMNS)
    for rec in records:
        row = []
        for val in rec.as_row():
            if isinstance(val, bool):
                row.append("true" if val else "false")
            elif isinstance(val, float):
                row.append(f"{val:.6f}" if math.isfinite(val) else "inf")
            else:
                row.append(val)
        writer.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def format_summary(summary: dict) -> str:
    header = (f"{'controller':<10} {'speed':>5} {'n':>3} "
              f"{'avg_speed':>16} {'avg_jerk':>16} {'conflict_dur':>16} {'coll':>4}")
    lines = [header, "-" * len(header)]
    for (controller, speed), cell in sorted(summary.items()):
        lines.append(
            f"{controller:<10} {speed:>5g} {cell['n']:>3} "
            f"{cell['avg_speed_mean']:>7.3f} ±{cell['avg_speed_std']:<7.3f} "
            f"{cell['avg_jerk_mean']:>7.3f} ±{cell['avg_jerk_std']:<7.3f} "
            f"{cell['avg_conflict_duration_mean']:>7.3f} ±{cell['avg_conflict_duration_std']:<7.3f} "
            f"{cell['collisions']:>4}"
        )
    return "\n".join(lines)
