"""Command-line harness: train, sweep, eval-shift, diag, repro-fig3, verify.

Every command is a pure function of (config, seed) to output files; output
directories are run-stamped and never mutated after creation.  Exit codes:
0 success, 2 invalid config, 3 training divergence, 1 other failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .diagnostics import attention_diagnostics, mean_estimation_error
from .patterns import sample_data, uniform_proportions
from .rng import STREAM_EVAL, seed_seq, stream
from .runio import (ConfigError, dump_json, fmt, load_json, load_run, make_run_dir,
                    summary_rows, train_config_from_doc, write_run_outputs)
from .sweep import (AGGREGATE_COLUMNS, aggregate_row_str, run_sweep, steps_to_threshold,
                    sweep_spec_from_doc)
from .training import DivergenceError, evaluate, run_training

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def cmd_train(args) -> int:
    doc = load_json(args.config)
    cfg = train_config_from_doc(doc, seed_override=args.seed)
    name = args.name or f"train-seed{cfg.master_seed}"
    run_dir = make_run_dir(args.out, name)
    params, records = run_training(cfg, threads=args.threads)
    write_run_outputs(run_dir, cfg, params, records)
    final = records[-1]
    print(f"run dir: {run_dir}")
    print(f"final step {final.step}: eval_loss={final.eval_loss:.6f} "
          f"r_oracle={final.r_oracle_closed:.6f} excess={final.excess_risk:.6f} "
          f"score_err={final.score_err:.6f} vt_gap={final.vt_gap_max:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = sweep_spec_from_doc(load_json(args.config))
    out_dir = make_run_dir(args.out, args.name or f"sweep-{spec.axis}")
    rows = run_sweep(spec, out_dir, threads=args.threads)
    print(f"sweep dir: {out_dir}")
    for row in rows:
        print(f"  {spec.axis}={row['value']} seed={row['seed']} [{row['status']}] "
              f"steps_to_threshold={row['steps_to_threshold']}")
    return EXIT_OK


def cmd_eval_shift(args) -> int:
    run_dir = args.checkpoint
    cfg, params, step, _records = load_run(run_dir)
    if params.d != cfg.data.d or params.T != cfg.sched.T:
        raise ConfigError("checkpoint", "checkpoint dimensions do not match config")
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.eval_size is not None:
        cfg = replace(cfg, eval_size=args.eval_size)
    if args.pi_prime == "uniform":
        pi_prime = uniform_proportions(cfg.data.M)
    elif args.pi_prime == "train":
        pi_prime = None
    else:
        pi_prime = np.asarray([float(x) for x in args.pi_prime.split(",")])
    record = evaluate(params, cfg, seed_seq(cfg.master_seed, STREAM_EVAL, step),
                      pi_prime=pi_prime, P_eval=args.p_eval, step=step)
    doc = record.to_dict()
    doc["excess_risk"] = record.excess_risk
    doc["pi_prime"] = "train" if pi_prime is None else [float(x) for x in pi_prime]
    doc["P_eval"] = cfg.P if args.p_eval is None else args.p_eval
    if args.out_file:
        dump_json(args.out_file, doc)
    print(f"eval_loss={record.eval_loss!r} excess_risk={record.excess_risk!r} "
          f"score_err={record.score_err!r}")
    return EXIT_OK


def cmd_diag(args) -> int:
    cfg, params, step, _ = load_run(args.checkpoint)
    gen = stream(cfg.master_seed if args.seed is None else args.seed, STREAM_EVAL, step, 0)
    sample = sample_data(cfg.data, cfg.P, gen)
    E = gen.standard_normal((cfg.data.d, cfg.P))
    lines = ["t,token,label,same_mass,uniformity_dev,qk_same_mean,qk_cross_mean_abs,mean_est_err"]
    for t in cfg.tset:
        diag = attention_diagnostics(params, sample, E, t, cfg.sched)
        mest = mean_estimation_error(params, sample, E, t, cfg.sched, cfg.data.patterns)
        for p in range(cfg.P):
            lines.append(",".join([
                str(t), str(p), str(int(sample.y[p])),
                fmt(diag.same_mass[p]), fmt(diag.uniformity_dev[p]),
                fmt(diag.qk_same_mean), fmt(diag.qk_cross_mean_abs), fmt(mest),
            ]))
    out_path = args.out_file or os.path.join(args.checkpoint, f"diag-step{step}.csv")
    with open(out_path, "w", newline="") as fh:
        fh.write("\r\n".join(lines) + "\r\n")
    print(f"wrote {out_path}")
    return EXIT_OK


# Desk-scale presets for the five-panel reproduction bundle.  The base
# problem is small enough for laptop runs; the loss-curve panel evaluates
# at a larger token count so the two reference risks sit close together.
_FIG3_DATA = {"d": 32, "M": 4, "K": 2, "rho": 0.3, "pi_tilde": "uniform",
              "norm_sq": None, "pattern_seed": 123}
_FIG3_SCHED = {"kind": "linear", "T": 10, "alpha1": 0.98, "alphaT": 0.95}
_FIG3_TRAIN = {"data": _FIG3_DATA, "P": 64, "schedule": _FIG3_SCHED, "tset": "full",
               "eta": 0.5, "steps": 600, "batch": 64, "eval_every": 25,
               "eval_size": 64, "master_seed": 0}
_FIG3_PANEL_A_EVAL_P = 256
_FIG3_SWEEP_STEPS = 500
_FIG3_SWEEP_SEEDS = [0, 1]


def _fig3_panel_a(out_dir, threads: int) -> None:
    cfg = train_config_from_doc(_FIG3_TRAIN)
    run_dir = os.path.join(out_dir, "panel_a_run")
    os.makedirs(run_dir)
    params, records = run_training(cfg, threads=threads)
    # Re-evaluate the trace checkpoints at the wider eval token count for
    # the reference-risk comparison; the trained model is P-agnostic.
    final = evaluate(params, cfg, seed_seq(cfg.master_seed, STREAM_EVAL, records[-1].step),
                     P_eval=_FIG3_PANEL_A_EVAL_P, step=records[-1].step)
    write_run_outputs(run_dir, cfg, params, records)
    lines_a = ["step,eval_loss,score_err,r_oracle,r_bayes_mc"]
    lines_e = ["step,attn_same_mass_median,attn_same_mass_p10,attn_same_mass_p90"]
    for rec in records:
        lines_a.append(",".join([str(rec.step), fmt(rec.eval_loss), fmt(rec.score_err),
                                 fmt(rec.r_oracle_closed), fmt(rec.r_bayes_mc)]))
        lines_e.append(",".join([str(rec.step), fmt(rec.attn_same_mass_median),
                                 fmt(rec.attn_same_mass_p10), fmt(rec.attn_same_mass_p90)]))
    with open(os.path.join(out_dir, "panel_a.csv"), "w", newline="") as fh:
        fh.write("\r\n".join(lines_a) + "\r\n")
    with open(os.path.join(out_dir, "panel_e.csv"), "w", newline="") as fh:
        fh.write("\r\n".join(lines_e) + "\r\n")
    dump_json(os.path.join(out_dir, "panel_a_wide_eval.json"), {
        "P_eval": _FIG3_PANEL_A_EVAL_P,
        "eval_loss": final.eval_loss,
        "r_oracle_closed": final.r_oracle_closed,
        "r_bayes_mc": final.r_bayes_mc,
        "r_bayes_mc_se": final.r_bayes_mc_se,
        "score_err": final.score_err,
        "attn_same_mass_median": final.attn_same_mass_median,
    })


def _fig3_sweep(out_dir, panel: str, axis: str, values, threads: int) -> None:
    doc = {"base": dict(_FIG3_TRAIN, steps=_FIG3_SWEEP_STEPS),
           "axis": axis, "values": values, "seeds": _FIG3_SWEEP_SEEDS}
    spec = sweep_spec_from_doc(doc)
    sweep_dir = os.path.join(out_dir, f"{panel}_sweep")
    os.makedirs(sweep_dir)
    rows = run_sweep(spec, sweep_dir, threads=threads)
    with open(os.path.join(out_dir, f"{panel}.csv"), "w", newline="") as fh:
        fh.write(",".join(AGGREGATE_COLUMNS) + "\r\n")
        for row in rows:
            fh.write(aggregate_row_str(row) + "\r\n")


def cmd_repro_fig3(args) -> int:
    out_dir = make_run_dir(args.out, args.name or "fig3")
    _fig3_panel_a(out_dir, args.threads)
    _fig3_sweep(out_dir, "panel_b", "K", [1, 2, 3], args.threads)
    _fig3_sweep(out_dir, "panel_c", "pi_min", [0.25, 0.1, 0.01], args.threads)
    _fig3_sweep(out_dir, "panel_d", "tset_mode", ["full", "first40", "last40"], args.threads)
    print(f"fig3 bundle: {out_dir}")
    return EXIT_OK


def _verify_train_dir(run_dir) -> bool:
    from .runio import read_trace_jsonl

    records = read_trace_jsonl(os.path.join(run_dir, "trace.jsonl"))
    expected = "\r\n".join(summary_rows(records)) + "\r\n"
    with open(os.path.join(run_dir, "summary.csv"), newline="") as fh:
        actual = fh.read()
    if expected != actual:
        print("summary.csv does not match trace.jsonl", file=sys.stderr)
        return False
    return True


def _verify_sweep_dir(run_dir) -> bool:
    from .runio import read_trace_jsonl

    meta = load_json(os.path.join(run_dir, "sweep.json"))
    with open(os.path.join(run_dir, "aggregate.csv"), newline="") as fh:
        actual_rows = fh.read().strip("\r\n").split("\r\n")
    expected_rows = [",".join(AGGREGATE_COLUMNS)]
    for value in meta["values"]:
        for seed in meta["seeds"]:
            cell_dir = os.path.join(run_dir, "cells", f"{meta['axis']}={value}-seed{seed}")
            trace_path = os.path.join(cell_dir, "trace.jsonl")
            if not os.path.exists(trace_path):
                expected_rows.append(None)  # error cell: checked by prefix below
                continue
            records = read_trace_jsonl(trace_path)
            final = records[-1]
            expected_rows.append(aggregate_row_str({
                "axis": meta["axis"], "value": value, "seed": seed, "status": "ok",
                "steps_to_threshold": steps_to_threshold(records, meta["threshold_factor"]),
                "final_excess_risk": final.excess_risk,
                "final_eval_loss": final.eval_loss,
                "r_oracle_closed": final.r_oracle_closed,
            }))
    if len(actual_rows) != len(expected_rows):
        print("aggregate.csv row count mismatch", file=sys.stderr)
        return False
    for got, want in zip(actual_rows, expected_rows):
        if want is None:
            if ",error" not in got:
                print(f"expected an error row, found: {got}", file=sys.stderr)
                return False
        elif got != want:
            print(f"aggregate row mismatch:\n  file: {got}\n  rebuilt: {want}", file=sys.stderr)
            return False
    return True


def cmd_verify(args) -> int:
    run_dir = args.run
    if os.path.exists(os.path.join(run_dir, "aggregate.csv")):
        ok = _verify_sweep_dir(run_dir)
    elif os.path.exists(os.path.join(run_dir, "summary.csv")):
        ok = _verify_train_dir(run_dir)
    else:
        print(f"{run_dir} is not a run or sweep directory", file=sys.stderr)
        return EXIT_CONFIG
    print("verified OK" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixdenoise",
                                     description="attention-denoiser training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="path to config JSON")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default="runs", help="output directory root")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("--name", default=None, help="run directory name")

    p_train = sub.add_parser("train", help="run one training config")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run a one-axis config sweep")
    common(p_sweep, seed=False)  # per-cell seeds come from the sweep spec
    p_sweep.set_defaults(func=cmd_sweep)

    p_shift = sub.add_parser("eval-shift", help="evaluate a checkpoint under shifted proportions")
    p_shift.add_argument("--checkpoint", required=True, help="run directory with checkpoint.json")
    p_shift.add_argument("--pi-prime", default="uniform",
                         help="'uniform', 'train', or comma-separated probabilities")
    p_shift.add_argument("--p-eval", type=int, default=None, help="tokens per evaluation datum")
    p_shift.add_argument("--eval-size", type=int, default=None)
    p_shift.add_argument("--seed", type=int, default=None)
    p_shift.add_argument("--out-file", default=None, help="write the report JSON here")
    p_shift.set_defaults(func=cmd_eval_shift)

    p_diag = sub.add_parser("diag", help="dump per-token attention diagnostics for a checkpoint")
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.add_argument("--out-file", default=None)
    p_diag.set_defaults(func=cmd_diag)

    p_fig3 = sub.add_parser("repro-fig3", help="regenerate the five-panel results bundle")
    p_fig3.add_argument("--out", default="runs")
    p_fig3.add_argument("--threads", type=int, default=1)
    p_fig3.add_argument("--name", default=None)
    p_fig3.set_defaults(func=cmd_repro_fig3)

    p_verify = sub.add_parser("verify", help="recompute derived CSVs and compare")
    p_verify.add_argument("--run", required=True, help="run or sweep directory")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
