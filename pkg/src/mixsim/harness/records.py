"""Session records for live double-blind episodes, stored as JSON lines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

ROLES = ("human", "model")
GUESSES = ("human", "machine")


@dataclass
class SessionRecord:
    session_id: str
    role: str
    started_at: float
    ended_at: float | None = None
    trace_path: str | None = None
    guess: str | None = None
    confidence: int | None = None
    naturalness: int | None = None
    aborted: bool = False

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        for name in ("confidence", "naturalness"):
            val = getattr(self, name)
            if val is not None and (not isinstance(val, int) or not 1 <= val <= 5):
                raise ValueError(f"{name} must be an integer in [1, 5]")
        if self.guess is not None and self.guess not in GUESSES:
            raise ValueError(f"guess must be one of {GUESSES}")


def append_record(path: str | Path, record: SessionRecord) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[SessionRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(SessionRecord(**json.loads(line)))
    return out
