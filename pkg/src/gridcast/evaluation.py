"""Scoring: per-city MSE with equal city weights, the naive-average baseline,
and report emission.

The metric nests as: per instance, the mean squared error over all
6 x H x W x 8 elements; per city, the mean over its instances; aggregate,
the mean over cities. ``unit`` scale scores [0,1]-space values as they
are; ``byte`` scale multiplies by 255 and clamps predictions to [0,255]
first, so for in-range predictions byte == 255^2 * unit exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

INPUT_FRAME_COUNT = 12
LEAD_COUNT = 6

Instance = tuple[np.ndarray, np.ndarray]  # (prediction, truth), both (6,H,W,8)


def naive_average_predict(input_frames: np.ndarray) -> np.ndarray:
    """Predict every lead time as the per-pixel mean of the 12 input frames."""
    if input_frames.ndim != 4 or input_frames.shape[0] != INPUT_FRAME_COUNT:
        raise ValueError(
            f"expected (12,H,W,C) input frames, got {input_frames.shape}"
        )
    mean = input_frames.astype(np.float64).mean(axis=0)
    return np.broadcast_to(mean, (LEAD_COUNT, *mean.shape)).copy()


def instance_mse(pred: np.ndarray, truth: np.ndarray, scale: str = "unit") -> float:
    """Mean squared error over every element of one instance."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if scale == "unit":
        p = pred.astype(np.float64)
        t = truth.astype(np.float64)
    elif scale == "byte":
        p = np.clip(pred.astype(np.float64) * 255.0, 0.0, 255.0)
        t = truth.astype(np.float64) * 255.0
    else:
        raise ValueError(f"unknown scale {scale!r}, expected 'unit' or 'byte'")
    d = p - t
    return float(np.mean(d * d))


def score_city(instances: Sequence[Instance], scale: str = "unit") -> float:
    """Equal-weighted mean of instance MSEs for one city."""
    if not instances:
        raise ValueError("cannot score a city with no test instances")
    return float(np.mean([instance_mse(p, t, scale) for p, t in instances]))


@dataclass
class EvalRow:
    method: str
    city_id: str
    regime: str
    mse: float
    n_instances: int
    seed_list: tuple[int, ...] = ()


@dataclass
class EvalReport:
    """Per-city scores plus their equal-weight aggregate."""

    method: str
    per_city: dict[str, float]
    n_instances: dict[str, int]
    regime: str = "in_covid"
    seed_list: tuple[int, ...] = ()
    scale: str = "unit"

    @property
    def aggregate(self) -> float:
        return float(np.mean(list(self.per_city.values())))

    def rows(self) -> list[EvalRow]:
        out = [
            EvalRow(self.method, city, self.regime, mse, self.n_instances[city], self.seed_list)
            for city, mse in self.per_city.items()
        ]
        out.append(
            EvalRow(
                self.method,
                "ALL",
                self.regime,
                self.aggregate,
                sum(self.n_instances.values()),
                self.seed_list,
            )
        )
        return out


def evaluate(
    city_instances: Mapping[str, Sequence[Instance]],
    scale: str = "unit",
    method: str = "model",
    regime: str = "in_covid",
    seed_list: tuple[int, ...] = (),
) -> EvalReport:
    """Score predictions for several cities and aggregate with equal weights."""
    if not city_instances:
        raise ValueError("empty test split: no cities to evaluate")
    per_city = {}
    counts = {}
    for city, instances in city_instances.items():
        per_city[city] = score_city(instances, scale)
        counts[city] = len(instances)
    return EvalReport(method, per_city, counts, regime, seed_list, scale)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("method", "city", "regime", "mse", "n_instances", "seed_list")


def write_report_csv(path: str | Path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            for row in report.rows():
                writer.writerow(
                    [
                        row.method,
                        row.city_id,
                        row.regime,
                        repr(row.mse),
                        row.n_instances,
                        " ".join(str(s) for s in row.seed_list),
                    ]
                )


def format_report_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table, one aggregate line per method plus per-city lines."""
    rows = [("method", "city", "regime", "mse", "n")]
    for report in reports:
        for row in report.rows():
            rows.append(
                (row.method, row.city_id, row.regime, f"{row.mse:.6f}", str(row.n_instances))
            )
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def read_report_csv(path: str | Path) -> list[EvalRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            seeds = tuple(int(s) for s in rec["seed_list"].split()) if rec["seed_list"] else ()
            rows.append(
                EvalRow(
                    rec["method"],
                    rec["city"],
                    rec["regime"],
                    float(rec["mse"]),
                    int(rec["n_instances"]),
                    seeds,
                )
            )
    return rows
