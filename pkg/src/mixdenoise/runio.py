"""Run configs, run directories, and trace serialization.

A training run is configured by one JSON document and produces one
run directory:

    config.json     resolved config (seed included), reproduces the run
    trace.jsonl     one JSON object per evaluation record
    summary.csv     fixed-column summary of the trace
    checkpoint.json final model parameters

Summary CSV columns are stable:
step,eval_loss,eval_loss_se,r_oracle,r_bayes_mc,score_err,attn_same_mass_median,vt_gap_max.
Floats are written with ``repr`` (shortest round-trip form), so identical
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import fields

import numpy as np

from .patterns import mixture_params_from_json, mixture_params_to_json
from .schedule import TimeSet, schedule_from_json, schedule_to_json
from .training import EvalRecord, TrainConfig

SUMMARY_COLUMNS = ("step", "eval_loss", "eval_loss_se", "r_oracle", "r_bayes_mc",
                   "score_err", "attn_same_mass_median", "vt_gap_max")

# summary column -> EvalRecord field
_COLUMN_FIELDS = {
    "step": "step",
    "eval_loss": "eval_loss",
    "eval_loss_se": "eval_loss_se",
    "r_oracle": "r_oracle_closed",
    "r_bayes_mc": "r_bayes_mc",
    "score_err": "score_err",
    "attn_same_mass_median": "attn_same_mass_median",
    "vt_gap_max": "vt_gap_max",
}


class ConfigError(ValueError):
    """Invalid run configuration, with the offending field named."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


def _require(doc: dict, key: str, kind, field_name: str | None = None):
    name = field_name or key
    if key not in doc:
        raise ConfigError(name, "missing")
    try:
        return kind(doc[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def tset_from_doc(doc, T: int) -> TimeSet:
    """Parse the time-set field: 'full', mode dicts, or explicit indices."""
    if doc is None or doc == "full":
        return TimeSet.full(T)
    if isinstance(doc, str):
        if doc == "first40":
            return TimeSet.first_fraction(T, 0.4)
        if doc == "last40":
            return TimeSet.last_fraction(T, 0.4)
        raise ConfigError("tset", f"unknown shorthand {doc!r}")
    if isinstance(doc, dict):
        mode = doc.get("mode", "full")
        if mode == "full":
            return TimeSet.full(T)
        if mode == "first_fraction":
            return TimeSet.first_fraction(T, float(doc["fraction"]))
        if mode == "last_fraction":
            return TimeSet.last_fraction(T, float(doc["fraction"]))
        if mode == "explicit":
            return TimeSet(tuple(int(i) for i in doc["indices"]))
        raise ConfigError("tset.mode", f"unknown mode {mode!r}")
    raise ConfigError("tset", f"cannot parse {doc!r}")


def tset_to_doc(tset: TimeSet, T: int):
    if tset.indices == tuple(range(1, T + 1)):
        return "full"
    return {"mode": "explicit", "indices": list(tset.indices)}


def train_config_from_doc(doc: dict, seed_override: int | None = None) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    try:
        data = mixture_params_from_json(_require(doc, "data", dict))
    except ConfigError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError("data", str(exc)) from exc
    try:
        sched = schedule_from_json(_require(doc, "schedule", dict))
    except ConfigError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError("schedule", str(exc)) from exc
    tset = tset_from_doc(doc.get("tset"), sched.T)
    seed = seed_override if seed_override is not None else int(doc.get("master_seed", 0))
    try:
        return TrainConfig(
            data=data,
            P=_require(doc, "P", int),
            sched=sched,
            tset=tset,
            eta=_require(doc, "eta", float),
            steps=_require(doc, "steps", int),
            batch=_require(doc, "batch", int),
            eval_every=int(doc.get("eval_every", 100)),
            eval_size=int(doc.get("eval_size", 256)),
            master_seed=seed,
            eta_w=None if doc.get("eta_w") is None else float(doc["eta_w"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("<train>", str(exc)) from exc


def train_config_to_doc(cfg: TrainConfig) -> dict:
    doc = {
        "data": mixture_params_to_json(cfg.data),
        "P": cfg.P,
        "schedule": schedule_to_json(cfg.sched),
        "tset": tset_to_doc(cfg.tset, cfg.sched.T),
        "eta": cfg.eta,
        "steps": cfg.steps,
        "batch": cfg.batch,
        "eval_every": cfg.eval_every,
        "eval_size": cfg.eval_size,
        "master_seed": cfg.master_seed,
    }
    if cfg.eta_w is not None:
        doc["eta_w"] = cfg.eta_w
    return doc


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def dump_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def fmt(value) -> str:
    """Stable scalar formatting: ints as-is, floats via repr, None empty."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_trace_jsonl(path, records: list[EvalRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_trace_jsonl(path) -> list[EvalRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(EvalRecord(**json.loads(line)))
    return records


def summary_rows(records: list[EvalRecord]) -> list[str]:
    rows = [",".join(SUMMARY_COLUMNS)]
    for rec in records:
        rows.append(",".join(fmt(getattr(rec, _COLUMN_FIELDS[c])) for c in SUMMARY_COLUMNS))
    return rows


def write_summary_csv(path, records: list[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(summary_rows(records)) + "\r\n")


def make_run_dir(out_dir, name: str) -> str:
    """Create a fresh directory; never reuses or mutates an existing one."""
    os.makedirs(out_dir, exist_ok=True)
    candidate = os.path.join(out_dir, name)
    suffix = 1
    while os.path.exists(candidate):
        suffix += 1
        candidate = os.path.join(out_dir, f"{name}-{suffix}")
    os.makedirs(candidate)
    return candidate


def write_run_outputs(run_dir, cfg: TrainConfig, params, records: list[EvalRecord]) -> None:
    from .model import save_checkpoint

    dump_json(os.path.join(run_dir, "config.json"), train_config_to_doc(cfg))
    write_trace_jsonl(os.path.join(run_dir, "trace.jsonl"), records)
    write_summary_csv(os.path.join(run_dir, "summary.csv"), records)
    save_checkpoint(os.path.join(run_dir, "checkpoint.json"), params,
                    step=records[-1].step if records else 0)


def load_run(run_dir) -> tuple[TrainConfig, "object", int, list[EvalRecord]]:
    """Read back (config, params, step, records) from a run directory."""
    from .model import load_checkpoint

    cfg = train_config_from_doc(load_json(os.path.join(run_dir, "config.json")))
    params, step = load_checkpoint(os.path.join(run_dir, "checkpoint.json"))
    trace_path = os.path.join(run_dir, "trace.jsonl")
    records = read_trace_jsonl(trace_path) if os.path.exists(trace_path) else []
    return cfg, params, step, records
