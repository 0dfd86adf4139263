"""Gradient-descent training of the attention denoiser on fresh batches.

Each step draws a fresh batch of data and noise (an unbiased Monte-Carlo
surrogate for the population objective), averages the per-sample analytic
gradients, and applies plain gradient descent with one shared step size
(an optional separate step size for W can be configured).

Reproducibility contract: a run is a pure function of its config.  Data
for training step s comes from streams keyed by (master_seed, TRAIN, s),
evaluation data for the record at step s from (master_seed, EVAL, s), and
parameter init from (master_seed, INIT).  Batch work is chunked with a
fixed chunk size and reduced in chunk order, so worker count changes
wall-clock time only, never results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import diagnostics
from .model import CHUNK, Gradients, ModelParams, batch_loss_gradients
from .oracles import (RiskReport, _gamma_stack, _mean_se, _mmse_from_gamma,
                      _stack_coeffs, oracle_risk_closed)
from .patterns import MixtureParams, sample_data
from .rng import STREAM_EVAL, STREAM_INIT, STREAM_TRAIN, child_generators, seed_seq
from .schedule import NoiseSchedule, TimeSet, time_averaged_snr


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, message: str):
        super().__init__(f"diverged at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on."""

    data: MixtureParams
    P: int
    sched: NoiseSchedule
    tset: TimeSet
    eta: float
    steps: int
    batch: int
    eval_every: int = 100
    eval_size: int = 256
    master_seed: int = 0
    eta_w: float | None = None  # optional separate step size for W

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.eta_w is not None and self.eta_w <= 0:
            raise ValueError("eta_w must be positive")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.P < 1:
            raise ValueError("P must be at least 1")
        if self.eval_every < 1 or self.eval_size < 1:
            raise ValueError("eval_every and eval_size must be at least 1")
        self.tset.validate_for(self.sched.T)


@dataclass(frozen=True)
class EvalRecord:
    """One evaluation snapshot; the JSONL trace stores these verbatim."""

    step: int
    train_loss: float | None
    eval_loss: float
    eval_loss_se: float
    r_oracle_closed: float
    r_oracle_mc: float
    r_oracle_mc_se: float
    r_bayes_mc: float
    r_bayes_mc_se: float
    score_err: float
    score_err_se: float
    snr: float
    attn_same_mass_median: float
    attn_same_mass_p10: float
    attn_same_mass_p90: float
    uniformity_median: float
    uniformity_p90: float
    qk_same_mean: float
    qk_cross_mean_abs: float
    mean_est_err_median: float
    vt_gap_max: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def risk_report(self) -> RiskReport:
        return RiskReport(
            eval_loss=self.eval_loss, eval_loss_se=self.eval_loss_se,
            r_oracle_closed=self.r_oracle_closed,
            r_oracle_mc=self.r_oracle_mc, r_oracle_mc_se=self.r_oracle_mc_se,
            r_bayes_mc=self.r_bayes_mc, r_bayes_mc_se=self.r_bayes_mc_se,
            score_err=self.score_err, score_err_se=self.score_err_se,
            snr=self.snr,
        )

    @property
    def excess_risk(self) -> float:
        return self.eval_loss - self.r_oracle_closed


@dataclass
class TrainTrace:
    """Eval records in step order, plus the final parameters."""

    records: list[EvalRecord] = field(default_factory=list)

    def append(self, record: EvalRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("trace records must be strictly ordered by step")
        self.records.append(record)


def init_params(d: int, T: int, seed) -> ModelParams:
    """Zero attention matrix; output scales drawn iid Normal(0, 1/d)."""
    gen = _as_generator(seed)
    return ModelParams(W=np.zeros((d, d)), v=gen.standard_normal(T) / math.sqrt(d))


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _sample_batch(data: MixtureParams, P: int, n: int, source):
    """n data/noise draws from index-keyed child streams: (n,d,P) arrays."""
    X0 = np.empty((n, data.d, P))
    E = np.empty((n, data.d, P))
    samples = []
    for i, gen in enumerate(child_generators(source, n)):
        s = sample_data(data, P, gen)
        X0[i] = s.x0
        E[i] = gen.standard_normal((data.d, P))
        samples.append(s)
    return X0, E, samples


def _apply_update(params: ModelParams, grads: Gradients, cfg: TrainConfig) -> ModelParams:
    eta_w = cfg.eta if cfg.eta_w is None else cfg.eta_w
    return ModelParams(W=params.W - eta_w * grads.dW, v=params.v - cfg.eta * grads.dv)


def _step(params: ModelParams, cfg: TrainConfig, source, pool=None,
          step_index: int = 0) -> tuple[ModelParams, float]:
    X0, E, _ = _sample_batch(cfg.data, cfg.P, cfg.batch, source)
    loss, grads = batch_loss_gradients(params, X0, E, cfg.sched, cfg.tset, pool=pool)
    if not np.isfinite(loss):
        raise DivergenceError(step_index, f"batch loss is {loss!r}")
    if not (np.all(np.isfinite(grads.dW)) and np.all(np.isfinite(grads.dv))):
        raise DivergenceError(step_index, "non-finite gradient")
    return _apply_update(params, grads, cfg), loss


def train_step(params: ModelParams, cfg: TrainConfig, rng) -> ModelParams:
    """One gradient-descent update on a fresh batch drawn from ``rng``."""
    new_params, _ = _step(params, cfg, rng)
    return new_params


def evaluate(params: ModelParams, cfg: TrainConfig, rng, *, pi_prime=None,
             P_eval: int | None = None, predictor=None, pool=None,
             step: int = 0, train_loss: float | None = None) -> EvalRecord:
    """Monte-Carlo evaluation on fresh held-out data.

    Estimates the denoising loss, the oracle and posterior-mean reference
    risks, the score-matching error, and the attention diagnostics, each
    with standard errors over ``cfg.eval_size`` fresh data.  ``pi_prime``
    evaluates under shifted mixture proportions on the same patterns;
    ``predictor(Xt_stack, ts, sample)`` substitutes an arbitrary denoiser
    for the model output (used to sanity-check against the oracles).
    """
    data = cfg.data if pi_prime is None else cfg.data.with_proportions(pi_prime)
    P = cfg.P if P_eval is None else int(P_eval)
    d = data.d
    W, v = params.W, params.v
    ts, ab, sab, var, coef = _stack_coeffs(data.rho, cfg.sched, cfg.tset)
    nt = ts.size
    means = data.patterns.means
    gens = child_generators(rng, cfg.eval_size)
    spans = [(i, min(i + CHUNK, cfg.eval_size)) for i in range(0, cfg.eval_size, CHUNK)]

    def work(span):
        a, b = span
        out = {k: [] for k in ("loss", "oracle", "bayes", "score", "mass",
                               "unif", "mest", "qk_same", "qk_cross")}
        for i in range(a, b):
            gen = gens[i]
            sample = sample_data(data, P, gen)
            E = gen.standard_normal((d, P))
            Xt = (sab[:, None, None] * sample.x0[None]
                  + np.sqrt(1.0 - ab)[:, None, None] * E[None])
            logits = (Xt.swapaxes(1, 2) @ (W @ Xt)) / d
            A = _softmax_copy(logits)
            if predictor is None:
                f = v[ts - 1][:, None, None] * (Xt - Xt @ A)
            else:
                f = predictor(Xt, ts, sample)
            out["loss"].append(np.mean(np.sum((f - E[None]) ** 2, axis=(1, 2))) / (d * P))
            MY = means[sample.y].T
            oest = coef[:, None, None] * (Xt - sab[:, None, None] * MY[None])
            out["oracle"].append(np.mean(np.sum((E[None] - oest) ** 2, axis=(1, 2))) / (d * P))
            gamma, _ = _gamma_stack(Xt, sab, var, data)
            best = _mmse_from_gamma(Xt, gamma, sab, coef, means)
            out["bayes"].append(np.mean(np.sum((E[None] - best) ** 2, axis=(1, 2))) / (d * P))
            out["score"].append(
                np.mean(np.sum((f - best) ** 2, axis=(1, 2)) / (1.0 - ab)) / (d * P))
            same = sample.y[:, None] == sample.y[None, :]
            out["mass"].append((A * same[None]).sum(axis=1).ravel())
            out["unif"].append(_uniformity_stack(A, sample.y).ravel())
            approx = Xt @ A
            out["mest"].extend(
                np.sum((sab[:, None, None] * MY[None] - approx) ** 2, axis=(1, 2)) / (d * P))
            qs, qc = _qk_sums(logits, same)
            out["qk_same"].append(qs)
            out["qk_cross"].append(qc)
        return out

    results = list(pool.map(work, spans)) if pool is not None else [work(s) for s in spans]
    merged = {k: [] for k in results[0]}
    for r in results:
        for k, vals in r.items():
            merged[k].extend(vals)

    eval_loss, eval_se = _mean_se(merged["loss"])
    r_or_mc, r_or_se = _mean_se(merged["oracle"])
    r_bayes, r_bayes_se = _mean_se(merged["bayes"])
    score, score_se = _mean_se(merged["score"])
    mass = np.concatenate(merged["mass"])
    unif = np.concatenate(merged["unif"])
    qk_same = np.array(merged["qk_same"], dtype=np.float64)
    qk_cross = np.array(merged["qk_cross"], dtype=np.float64)
    qk_same_mean = float(qk_same[:, 0].sum() / max(1.0, qk_same[:, 1].sum()))
    qk_cross_mean = float(qk_cross[:, 0].sum() / max(1.0, qk_cross[:, 1].sum()))

    return EvalRecord(
        step=step, train_loss=train_loss,
        eval_loss=eval_loss, eval_loss_se=eval_se,
        r_oracle_closed=oracle_risk_closed(data.rho, cfg.sched, cfg.tset),
        r_oracle_mc=r_or_mc, r_oracle_mc_se=r_or_se,
        r_bayes_mc=r_bayes, r_bayes_mc_se=r_bayes_se,
        score_err=score, score_err_se=score_se,
        snr=time_averaged_snr(cfg.sched, cfg.tset),
        attn_same_mass_median=float(np.median(mass)),
        attn_same_mass_p10=float(np.percentile(mass, 10)),
        attn_same_mass_p90=float(np.percentile(mass, 90)),
        uniformity_median=float(np.median(unif)),
        uniformity_p90=float(np.percentile(unif, 90)),
        qk_same_mean=qk_same_mean,
        qk_cross_mean_abs=qk_cross_mean,
        mean_est_err_median=float(np.median(merged["mest"])),
        vt_gap_max=diagnostics.vt_gap(params, data.rho, cfg.sched),
    )


def _softmax_copy(logits: np.ndarray) -> np.ndarray:
    a = logits - logits.max(axis=1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=1, keepdims=True)
    return a


def _uniformity_stack(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Max pairwise ratio deviation among same-label weights, per (t, query)."""
    nt, P, _ = A.shape
    out = np.zeros((nt, P))
    for u in np.unique(y):
        idx = np.flatnonzero(y == u)
        if idx.size == 1:
            continue
        sub = A[:, idx][:, :, idx]          # (nt, |class|, |class| queries)
        wmax = sub.max(axis=1)
        wmin = sub.min(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dev = np.where(wmin > 0, wmax / wmin - 1.0, np.inf)
        out[:, idx] = dev
    return out


def _qk_sums(logits: np.ndarray, same: np.ndarray):
    """(sum, count) of same-pattern products and cross-pattern |products|."""
    nt, P, _ = logits.shape
    off = ~np.eye(P, dtype=bool)
    same_off = same & off
    cross = ~same
    qs = (float(logits[:, same_off].sum()), float(nt * same_off.sum()))
    qc = (float(np.abs(logits[:, cross]).sum()), float(nt * cross.sum()))
    return qs, qc


def run_training(cfg: TrainConfig, *, threads: int = 1, on_eval=None):
    """Run the full loop; returns (final params, list of EvalRecords).

    Evaluates at step 0, every ``eval_every`` updates, and at the final
    step.  ``on_eval(record)`` fires as records are produced.
    """
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        params = init_params(cfg.data.d, cfg.sched.T, seed_seq(cfg.master_seed, STREAM_INIT))
        trace = TrainTrace()

        def snapshot(step, train_loss):
            rec = evaluate(params, cfg, seed_seq(cfg.master_seed, STREAM_EVAL, step),
                           pool=pool, step=step, train_loss=train_loss)
            trace.append(rec)
            if on_eval is not None:
                on_eval(rec)

        snapshot(0, None)
        last_loss = None
        for s in range(cfg.steps):
            params, last_loss = _step(params, cfg, seed_seq(cfg.master_seed, STREAM_TRAIN, s),
                                      pool=pool, step_index=s)
            done = s + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                snapshot(done, last_loss)
        return params, trace.records
    finally:
        if pool is not None:
            pool.shutdown()
