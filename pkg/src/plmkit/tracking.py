"""Append-only JSONL experiment tracking.

One run writes one run-<id>.jsonl file; each line is a self-contained event
flushed immediately so a crashed run still leaves a readable record.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO


@dataclass
class TrackingEvent:
    step: int
    kind: str  # "config" | "train" | "eval" | "checkpoint" | "diagnostic"
    values: dict = field(default_factory=dict)
    timestamp: float = 0.0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "kind": self.kind,
            "values": self.values,
            "timestamp": self.timestamp,
        }


class TrackingWriter:
    """Writes events for one run; steps must never decrease."""

    def __init__(self, tracking_dir: str | Path, run_id: str):
        d = Path(tracking_dir)
        d.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.path = d / f"run-{run_id}.jsonl"
        self._fh: IO[str] | None = open(self.path, "a", encoding="utf-8")
        self._last_step = -1

    def log(self, step: int, kind: str, **values) -> TrackingEvent:
        if self._fh is None:
            raise ValueError("tracking writer is closed")
        if step < self._last_step:
            raise ValueError(f"step {step} decreased below {self._last_step}")
        self._last_step = step
        ev = TrackingEvent(step, kind, values, time.time())
        self._fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")
        self._fh.flush()
        return ev

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "TrackingWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_run(path: str | Path) -> list[TrackingEvent]:
    events = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path} line {lineno}: invalid JSON: {e}") from e
            events.append(
                TrackingEvent(d["step"], d["kind"], d.get("values", {}), d.get("timestamp", 0.0))
            )
    return events


def metric_curve(events: list[TrackingEvent], metric: str, kind: str = "eval") -> list[tuple[int, float]]:
    """(step, value) points for one metric, in log order."""
    return [
        (ev.step, float(ev.values[metric]))
        for ev in events
        if ev.kind == kind and metric in ev.values
    ]
