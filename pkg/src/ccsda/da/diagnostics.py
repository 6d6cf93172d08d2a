"""Per-run assimilation diagnostics: misfits, call counts, timings."""
from __future__ import annotations

import csv
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STAGES = ("prior", "posterior")


def box_stats(values: np.ndarray) -> dict:
    q = np.quantile(np.asarray(values, dtype=float), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


@dataclass
class DaDiagnostics:
    method: str
    monitor_cells: list[tuple[int, int]]
    times: list[int]
    d_obs: np.ndarray
    prior_predictions: np.ndarray | None = None
    posterior_predictions: np.ndarray | None = None
    forward_calls: dict[str, int] = field(default_factory=lambda: {"hf": 0, "surrogate": 0})
    gradient_calls: int = 0
    timings: dict[str, float] = field(default_factory=dict)
    alphas: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    flagged_members: list[int] = field(default_factory=list)
    cost_history: np.ndarray | None = None
    posterior_members: list[int] | None = None

    @contextmanager
    def timed(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - start

    @property
    def wall_clock(self) -> float:
        return float(sum(self.timings.values()))

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def predictions(self, stage: str) -> np.ndarray:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        pred = self.prior_predictions if stage == "prior" else self.posterior_predictions
        if pred is None:
            raise ValueError(f"no {stage} predictions recorded")
        return pred

    def misfits(self, stage: str) -> np.ndarray:
        """Prediction minus observation, shape (n_members, n_times, n_points)."""
        pred = self.predictions(stage)
        shape = (len(pred), len(self.times), len(self.monitor_cells))
        return (pred - self.d_obs[None, :]).reshape(shape)

    def median_abs_misfit(self, stage: str) -> np.ndarray:
        """Median over members and times of |misfit|, one value per monitoring point."""
        m = np.abs(self.misfits(stage))
        return np.median(m.reshape(-1, m.shape[-1]), axis=0)

    def rmse(self, stage: str) -> float:
        return float(np.sqrt(np.mean(self.misfits(stage) ** 2)))

    def point_box_stats(self, stage: str) -> list[dict]:
        m = np.abs(self.misfits(stage))
        return [box_stats(m[:, :, k]) for k in range(m.shape[-1])]

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "n_members": int(len(self.prior_predictions)) if self.prior_predictions is not None else 0,
            "monitor_cells": [list(c) for c in self.monitor_cells],
            "n_obs": int(self.d_obs.size),
            "forward_calls": dict(self.forward_calls),
            "gradient_calls": int(self.gradient_calls),
            "timings_s": {k: round(v, 6) for k, v in sorted(self.timings.items())},
            "alphas": [float(a) for a in self.alphas],
            "warnings": list(self.warnings),
            "flagged_members": list(self.flagged_members),
        }
        for stage in STAGES:
            try:
                out[stage] = {
                    "rmse": self.rmse(stage),
                    "median_abs_misfit": [float(v) for v in self.median_abs_misfit(stage)],
                    "box": self.point_box_stats(stage),
                }
            except ValueError:
                continue
        if self.cost_history is not None:
            hist = self.cost_history
            finite = np.isfinite(hist[:, 0]) & np.isfinite(np.nanmin(hist, axis=1))
            reduced = np.nanmin(hist, axis=1) < hist[:, 0]
            out["cost"] = {
                "initial_median": float(np.median(hist[finite, 0])) if finite.any() else None,
                "final_median": float(np.median(np.nanmin(hist[finite], axis=1)))
                if finite.any() else None,
                "fraction_reduced": float(np.mean(reduced & finite)),
            }
        return out

    def write_json(self, path, extra: dict | None = None, include_timings: bool = True) -> None:
        data = self.to_dict()
        if not include_timings:
            data.pop("timings_s")
        if extra:
            data.update(extra)
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def write_misfits_csv(self, path) -> None:
        """One row per stage, member and monitoring point with mean |misfit| over time."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "member", "point", "mean_abs_misfit", "mean_misfit"])
            for stage in STAGES:
                try:
                    m = self.misfits(stage)
                except ValueError:
                    continue
                ids = self.posterior_members if stage == "posterior" and self.posterior_members \
                    is not None else range(len(m))
                for row, member in zip(m, ids):
                    for k in range(m.shape[-1]):
                        writer.writerow([stage, member, k, f"{np.mean(np.abs(row[:, k])):.6f}",
                                         f"{np.mean(row[:, k]):.6f}"])


def read_misfits_csv(path) -> dict[str, np.ndarray]:
    """Per-stage (n_rows,) arrays of point index and mean |misfit|."""
    rows: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["stage"], []).append((int(rec["point"]), float(rec["mean_abs_misfit"])))
    return {k: np.array(v) for k, v in rows.items()}
