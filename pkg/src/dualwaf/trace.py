"""Per-parameter attention degrees from the fusion block's attention weights."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class IoFailure(OSError):
    pass


@dataclass
class AttentionRecord:
    heads: np.ndarray                      # [H, n, n], rows are distributions
    labels: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return 0 if self.heads.size == 0 else self.heads.shape[-1]

    @classmethod
    def empty(cls) -> "AttentionRecord":
        return cls(np.zeros((0, 0, 0)), [])


@dataclass
class TraceReport:
    degrees: np.ndarray
    ranking: list[int]
    heatmap: np.ndarray
    labels: list[str] = field(default_factory=list)

    @property
    def top(self) -> int | None:
        return self.ranking[0] if self.ranking else None

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "degrees": [float(x) for x in self.degrees],
            "ranking": list(self.ranking),
            "heatmap": self.heatmap.tolist(),
        }


def head_average(rec: AttentionRecord) -> np.ndarray:
    if rec.n == 0:
        return np.zeros((0, 0))
    return np.asarray(rec.heads, dtype=np.float64).mean(axis=0)


def attention_degrees(avg: np.ndarray) -> np.ndarray:
    """Column means: how much attention each parameter receives over all queries."""
    avg = np.asarray(avg, dtype=np.float64)
    if avg.size == 0:
        return np.zeros(0)
    return avg.mean(axis=0)


def rank_parameters(degrees: np.ndarray, heatmap: np.ndarray | None = None,
                    labels: list[str] | None = None) -> TraceReport:
    degrees = np.asarray(degrees, dtype=np.float64)
    # stable sort on the negated degrees keeps lower indices first on ties
    ranking = [int(i) for i in np.argsort(-degrees, kind="stable")]
    if heatmap is None:
        heatmap = np.zeros((len(degrees), len(degrees)))
    return TraceReport(degrees, ranking, np.asarray(heatmap, dtype=np.float64), list(labels or []))


def trace(rec: AttentionRecord) -> TraceReport:
    """head_average -> attention_degrees -> rank_parameters."""
    avg = head_average(rec)
    return rank_parameters(attention_degrees(avg), avg, rec.labels)


def emit_heatmap(report: TraceReport, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (labelled matrix) and ``<path>.json`` (degrees, ranking)."""
    path = Path(path)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    n = len(report.degrees)
    labels = report.labels or [f"P{i + 1}" for i in range(n)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([""] + labels)
            for label, row in zip(labels, report.heatmap):
                w.writerow([label] + [repr(float(x)) for x in row])
        payload = report.to_dict()
        payload["labels"] = labels
        if n == 0:
            payload["note"] = "request has no payload parameters"
        json_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(str(e)) from e
    return csv_path, json_path
