"""Append-only JSON-lines metric stream."""

from __future__ import annotations

import json
import time


class MetricsWriter:
    """One JSON object per line, flushed immediately so a crashed run keeps
    everything logged up to the failure."""

    def __init__(self, path, stage: str):
        self.path = path
        self.stage = stage
        self._f = open(path, "a", encoding="utf-8")

    def log(self, step: int, **values) -> None:
        rec = {"stage": self.stage, "step": int(step)}
        for k, v in values.items():
            rec[k] = float(v) if hasattr(v, "__float__") else v
        rec["wall_time"] = time.time()
        self._f.write(json.dumps(rec, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def strip_wall_time(records: list[dict]) -> list[dict]:
    """Timing is the one legitimately nondeterministic field; drop it when
    comparing streams from paired runs."""
    return [{k: v for k, v in r.items() if k != "wall_time"}
            for r in records]
