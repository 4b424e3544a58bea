"""Line-delimited metrics: one {step, stage, metric, value} object per line."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator


class MetricsLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, stage: str, step: int, metric: str, value: float) -> None:
        value = float(value)
        rec = {"step": int(step), "stage": stage, "metric": metric,
               "value": value if math.isfinite(value) else str(value)}
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def truncate(self, stage: str, after_step: int) -> None:
        """Drop records of ``stage`` logged after ``after_step`` (used when resuming)."""
        if not self.path.exists():
            return
        keep = [r for r in read_metrics(self.path) if not (r["stage"] == stage and r["step"] > after_step)]
        with self.path.open("w") as fh:
            for r in keep:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> Iterator[dict]:
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def series(path: str | Path, stage: str, metric: str) -> tuple[list[int], list[float]]:
    steps, values = [], []
    for r in read_metrics(path):
        if r["stage"] == stage and r["metric"] == metric:
            steps.append(r["step"])
            values.append(float(r["value"]))
    return steps, values
