"""Mechanistic probes of a trained denoiser.

After training, attention should route almost all of each query's weight
onto keys sharing the query's pattern, spread nearly uniformly among them
(so the attended average is a low-variance estimate of the pattern mean),
and the output scales v_t should sit at the shrinkage coefficient of the
known-means estimator.  These probes quantify each piece on a recorded
(sample, noise, step) triple so traces are replayable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, attention_matrix
from .patterns import PatternSet, Sample
from .schedule import NoiseSchedule, forward_noise
from .validation import as_matrix, readonly


@dataclass(frozen=True)
class AttentionDiag:
    """Per-query attention statistics of one noised datum."""

    same_mass: np.ndarray        # weight on keys sharing the query's pattern
    uniformity_dev: np.ndarray   # max ratio deviation among those weights
    qk_same_mean: float
    qk_cross_mean_abs: float

    def __post_init__(self):
        object.__setattr__(self, "same_mass", readonly(self.same_mass))
        object.__setattr__(self, "uniformity_dev", np.asarray(self.uniformity_dev, dtype=np.float64))
        if self.same_mass.min() < -1e-12 or self.same_mass.max() > 1.0 + 1e-12:
            raise ValueError("same_mass entries must lie in [0, 1]")
        if np.nanmin(self.uniformity_dev) < 0:
            raise ValueError("uniformity_dev must be nonnegative")


def same_pattern_mass(A, y) -> np.ndarray:
    """Per query p, the total attention weight on keys with label y[p]."""
    A = as_matrix(A, "A")
    y = np.asarray(y, dtype=np.int64)
    if y.size != A.shape[0] or A.shape[0] != A.shape[1]:
        raise ValueError("A must be P x P with one label per token")
    same = y[:, None] == y[None, :]
    return (A * same).sum(axis=0)


def uniformity_deviation(A, y) -> np.ndarray:
    """Per query p, max |w_i/w_j - 1| over same-label key weights w.

    Singleton classes give 0 by convention.  A same-label weight that has
    underflowed to exactly 0 makes the ratio undefined; those entries are
    flagged as +inf.
    """
    A = as_matrix(A, "A")
    y = np.asarray(y, dtype=np.int64)
    P = y.size
    out = np.zeros(P)
    for u in np.unique(y):
        idx = np.flatnonzero(y == u)
        if idx.size == 1:
            continue
        sub = A[np.ix_(idx, idx)]
        wmax = sub.max(axis=0)
        wmin = sub.min(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[idx] = np.where(wmin > 0, wmax / wmin - 1.0, np.inf)
    return out


def qk_separation(W, Xt, y) -> tuple[float, float]:
    """Mean query-key product within patterns vs. |mean| across patterns.

    Statistics of x_j^T W x_i / d over ordered token pairs with i != j
    (each unordered pair contributes both directions, which leaves the
    means unchanged): the plain mean over same-pattern pairs and the mean
    absolute value over cross-pattern pairs.
    """
    W = as_matrix(W, "W")
    Xt = as_matrix(Xt, "Xt", rows=W.shape[0])
    y = np.asarray(y, dtype=np.int64)
    P = Xt.shape[1]
    if y.size != P:
        raise ValueError("one label per token required")
    prods = (Xt.T @ W @ Xt) / W.shape[0]
    same = (y[:, None] == y[None, :]) & ~np.eye(P, dtype=bool)
    cross = y[:, None] != y[None, :]
    if not same.any():
        raise ValueError("no same-pattern pair present")
    if not cross.any():
        raise ValueError("no cross-pattern pair present")
    return float(prods[same].mean()), float(np.abs(prods[cross]).mean())


def mean_estimation_error(params: ModelParams, sample: Sample, E, t: int,
                          sched: NoiseSchedule, patterns: PatternSet) -> float:
    """How far the attended token average sits from the true pattern means.

    ||sqrt(abar_t) M_Y - X^t A||_F^2 / (d P) for the recorded noise draw,
    with M_Y the per-token mean matrix read off ``patterns`` and the
    sample's labels.
    """
    Xt = forward_noise(sample.x0, t, E, sched)
    A = attention_matrix(params.W, Xt)
    MY = patterns.mean_matrix(sample.y)
    d, P = Xt.shape
    resid = np.sqrt(sched.abar(t)) * MY - Xt @ A
    return float(np.sum(resid ** 2) / (d * P))


def vt_gap(params: ModelParams, rho: float, sched: NoiseSchedule) -> float:
    """Largest gap between v_t and the known-means shrinkage coefficient."""
    ab = sched.alpha_bar
    target = np.sqrt(1.0 - ab) / (1.0 - ab + rho * rho * ab)
    n = min(params.T, sched.T)
    return float(np.abs(params.v[:n] - target[:n]).max())


def attention_diagnostics(params: ModelParams, sample: Sample, E, t: int,
                          sched: NoiseSchedule) -> AttentionDiag:
    """All attention probes for one recorded (sample, noise, step) triple.

    Samples whose tokens all share one pattern have no cross-pattern pair;
    the query-key statistics are NaN there.
    """
    Xt = forward_noise(sample.x0, t, E, sched)
    A = attention_matrix(params.W, Xt)
    try:
        qk_same, qk_cross = qk_separation(params.W, Xt, sample.y)
    except ValueError:
        qk_same, qk_cross = float("nan"), float("nan")
    return AttentionDiag(
        same_mass=same_pattern_mass(A, sample.y),
        uniformity_dev=uniformity_deviation(A, sample.y),
        qk_same_mean=qk_same,
        qk_cross_mean_abs=qk_cross,
    )
