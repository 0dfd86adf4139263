"""Session fixtures for the long training runs shared by acceptance tests.

Everything here is deterministic: fixtures run fixed configs with fixed
seeds, so repeated sessions produce identical artifacts.
"""

import json
import os

import numpy as np
import pytest

from mixdenoise import TimeSet, linear_schedule, run_training
from mixdenoise.patterns import (MixtureParams, build_pattern_set, imbalanced_proportions,
                                 uniform_proportions)
from mixdenoise.training import TrainConfig

DESK = dict(d=32, M=4, K=2, rho=0.3, P=64, T=10, alpha1=0.98, alphaT=0.95,
            eta=0.5, steps=2000, batch=128, eval_every=100, eval_size=256)


def desk_config(seed: int, *, M=None, K=None, pi=None, steps=None, batch=None,
                eval_size=None, eta=None) -> TrainConfig:
    M = DESK["M"] if M is None else M
    K = DESK["K"] if K is None else K
    patterns = build_pattern_set(DESK["d"], M, float(DESK["d"]), seed=123)
    pi = uniform_proportions(M) if pi is None else np.asarray(pi)
    data = MixtureParams(patterns=patterns, pi_tilde=pi, K=K, rho=DESK["rho"])
    T = DESK["T"]
    return TrainConfig(
        data=data, P=DESK["P"], sched=linear_schedule(T, DESK["alpha1"], DESK["alphaT"]),
        tset=TimeSet.full(T), eta=DESK["eta"] if eta is None else eta,
        steps=DESK["steps"] if steps is None else steps,
        batch=DESK["batch"] if batch is None else batch,
        eval_every=DESK["eval_every"],
        eval_size=DESK["eval_size"] if eval_size is None else eval_size,
        master_seed=seed,
    )


@pytest.fixture(scope="session")
def desk_runs():
    """The three-seed desk-scale convergence runs (slow)."""
    out = []
    for seed in (0, 1, 2):
        params, records = run_training(desk_config(seed))
        out.append((desk_config(seed), params, records))
    return out


@pytest.fixture(scope="session")
def mechanism_run():
    """Eight-pattern desk-scale run used for the attention-mechanism probes."""
    cfg = desk_config(0, M=8, K=4, steps=1500, eval_size=192)
    params, records = run_training(cfg)
    return cfg, params, records


@pytest.fixture(scope="session")
def imbalanced_run(tmp_path_factory):
    """Rare-pattern training run, exercised through the CLI for checkpoints."""
    from mixdenoise.cli import main

    root = tmp_path_factory.mktemp("imbalanced")
    config = {
        "data": {"d": DESK["d"], "M": DESK["M"], "K": DESK["K"], "rho": DESK["rho"],
                 "pi_tilde": {"min": 0.01}, "norm_sq": None, "pattern_seed": 123},
        "P": DESK["P"],
        "schedule": {"kind": "linear", "T": DESK["T"], "alpha1": DESK["alpha1"],
                     "alphaT": DESK["alphaT"]},
        "tset": "full",
        "eta": DESK["eta"], "steps": DESK["steps"], "batch": DESK["batch"],
        "eval_every": DESK["eval_every"], "eval_size": DESK["eval_size"],
        "master_seed": 0,
    }
    cfg_path = root / "imbalanced.json"
    cfg_path.write_text(json.dumps(config))
    assert main(["train", "--config", str(cfg_path), "--out", str(root),
                 "--name", "run"]) == 0
    return os.path.join(str(root), "run")


def run_cli_sweep(tmp_path_factory, name, axis, values, seeds, steps, tag):
    from mixdenoise.cli import main

    root = tmp_path_factory.mktemp(tag)
    doc = {
        "base": {
            "data": {"d": DESK["d"], "M": DESK["M"], "K": DESK["K"], "rho": DESK["rho"],
                     "pi_tilde": "uniform", "norm_sq": None, "pattern_seed": 123},
            "P": DESK["P"],
            "schedule": {"kind": "linear", "T": DESK["T"], "alpha1": DESK["alpha1"],
                         "alphaT": DESK["alphaT"]},
            "tset": "full",
            "eta": DESK["eta"], "steps": steps, "batch": 64,
            "eval_every": 25, "eval_size": 64, "master_seed": 0,
        },
        "axis": axis, "values": values, "seeds": seeds, "threshold_factor": 0.1,
    }
    cfg_path = root / f"{name}.json"
    cfg_path.write_text(json.dumps(doc))
    assert main(["sweep", "--config", str(cfg_path), "--out", str(root),
                 "--name", name, "--threads", "2"]) == 0
    return os.path.join(str(root), name)


@pytest.fixture(scope="session")
def component_count_sweep(tmp_path_factory):
    return run_cli_sweep(tmp_path_factory, "ksweep", "K", [1, 2, 3], [0, 1, 2],
                         steps=700, tag="ksweep")


@pytest.fixture(scope="session")
def timestep_sweep(tmp_path_factory):
    return run_cli_sweep(tmp_path_factory, "tsweep", "tset_mode",
                         ["first40", "last40"], [0, 1, 2], steps=700, tag="tsweep")
