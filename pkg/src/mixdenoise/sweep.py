"""Config sweeps over one axis, with per-cell runs and an aggregate CSV.

A sweep runs the base config once per (axis value, seed) cell, records
when each run first drives the excess risk (eval loss minus the closed-
form oracle risk) under a threshold, and aggregates the results.  Cells
are independent and may run in a worker pool; the aggregate order is
always (value, seed), never completion order.
"""

from __future__ import annotations

import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .patterns import imbalanced_proportions
from .runio import ConfigError, dump_json, fmt, train_config_from_doc, write_run_outputs
from .schedule import TimeSet
from .training import EvalRecord, TrainConfig, run_training

AXES = ("K", "pi_min", "tset_mode", "P")

AGGREGATE_COLUMNS = ("axis", "value", "seed", "status", "steps_to_threshold",
                     "final_excess_risk", "final_eval_loss", "r_oracle_closed")


@dataclass(frozen=True)
class SweepSpec:
    base: TrainConfig
    axis: str
    values: tuple
    seeds: tuple[int, ...]
    threshold_factor: float = 0.1

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError("axis", f"must be one of {AXES}")
        if len(self.values) == 0:
            raise ConfigError("values", "must be nonempty")
        if len(self.seeds) == 0:
            raise ConfigError("seeds", "need at least one seed")
        if self.threshold_factor <= 0:
            raise ConfigError("threshold_factor", "must be positive")
        for value in self.values:
            apply_axis(self.base, self.axis, value)  # validate early


def sweep_spec_from_doc(doc: dict) -> SweepSpec:
    base = train_config_from_doc(doc.get("base") or {})
    seeds = doc.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    return SweepSpec(
        base=base,
        axis=str(doc.get("axis", "")),
        values=tuple(doc.get("values", ())),
        seeds=tuple(int(s) for s in seeds),
        threshold_factor=float(doc.get("threshold_factor", 0.1)),
    )


def apply_axis(base: TrainConfig, axis: str, value) -> TrainConfig:
    """Materialize one cell config from the base config."""
    if axis == "K":
        return replace(base, data=replace(base.data, K=int(value)))
    if axis == "pi_min":
        pi = imbalanced_proportions(base.data.M, float(value))
        return replace(base, data=base.data.with_proportions(pi))
    if axis == "P":
        return replace(base, P=int(value))
    if axis == "tset_mode":
        T = base.sched.T
        modes = {"full": TimeSet.full(T),
                 "first40": TimeSet.first_fraction(T, 0.4),
                 "last40": TimeSet.last_fraction(T, 0.4)}
        if value not in modes:
            raise ConfigError("values", f"unknown tset_mode {value!r}")
        return replace(base, tset=modes[value])
    raise ConfigError("axis", f"unknown axis {axis!r}")


def steps_to_threshold(records: list[EvalRecord], threshold_factor: float) -> float:
    """First eval step whose excess risk is under the threshold, else +inf."""
    for rec in records:
        if rec.excess_risk <= threshold_factor * rec.r_oracle_closed:
            return float(rec.step)
    return float("inf")


def run_sweep(spec: SweepSpec, out_dir, threads: int = 1) -> list[dict]:
    """Run every cell, write per-cell run dirs plus aggregate.csv."""
    cells = [(value, seed) for value in spec.values for seed in spec.seeds]
    cells_dir = os.path.join(out_dir, "cells")
    os.makedirs(cells_dir, exist_ok=True)

    def run_cell(cell):
        value, seed = cell
        cfg = replace(apply_axis(spec.base, spec.axis, value), master_seed=seed)
        cell_dir = os.path.join(cells_dir, f"{spec.axis}={value}-seed{seed}")
        os.makedirs(cell_dir, exist_ok=True)
        try:
            params, records = run_training(cfg)
            write_run_outputs(cell_dir, cfg, params, records)
            final = records[-1]
            return {
                "axis": spec.axis, "value": value, "seed": seed, "status": "ok",
                "steps_to_threshold": steps_to_threshold(records, spec.threshold_factor),
                "final_excess_risk": final.excess_risk,
                "final_eval_loss": final.eval_loss,
                "r_oracle_closed": final.r_oracle_closed,
            }
        except Exception as exc:  # record the failure, keep sweeping
            with open(os.path.join(cell_dir, "error.txt"), "w") as fh:
                fh.write(traceback.format_exc())
            return {
                "axis": spec.axis, "value": value, "seed": seed,
                "status": f"error: {type(exc).__name__}",
                "steps_to_threshold": None, "final_excess_risk": None,
                "final_eval_loss": None, "r_oracle_closed": None,
            }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    write_aggregate_csv(os.path.join(out_dir, "aggregate.csv"), rows)
    dump_json(os.path.join(out_dir, "sweep.json"), {
        "axis": spec.axis, "values": list(spec.values), "seeds": list(spec.seeds),
        "threshold_factor": spec.threshold_factor,
    })
    return rows


def aggregate_row_str(row: dict) -> str:
    parts = []
    for col in AGGREGATE_COLUMNS:
        val = row[col]
        if col in ("axis", "status", "value"):
            parts.append(str(val))
        elif col == "seed":
            parts.append(str(int(val)))
        else:
            parts.append("" if val is None else fmt(val))
    return ",".join(parts)


def write_aggregate_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(AGGREGATE_COLUMNS) + "\r\n")
        for row in rows:
            fh.write(aggregate_row_str(row) + "\r\n")


def median_steps_by_value(rows: list[dict]) -> dict:
    """Median steps-to-threshold per axis value, over seeds."""
    out = {}
    values = []
    for row in rows:
        if row["value"] not in values:
            values.append(row["value"])
    for value in values:
        steps = [row["steps_to_threshold"] for row in rows
                 if row["value"] == value and row["status"] == "ok"]
        out[value] = float(np.median(steps)) if steps else float("inf")
    return out
