"""One-layer softmax-attention denoiser: forward pass, loss, and gradients.

The model maps a token matrix X (d x P) at diffusion step t to

    f(X, t) = v_t * (X - X A),      A = colsoftmax(X^T W X / d),

where column p of A is the attention of query token p over all key tokens.
The training objective is the per-dimension noise-prediction error

    loss = mean_{t in tset} ||f(X^t, t) - E||_F^2 / (d P),

with X^t the forward-noised tokens.  Gradients are computed by a
hand-derived backward pass (no autodiff); the chain rule through the
column softmax gives, per step t,

    dL/dW = -(2 v_t / (d^2 P)) * X (G - A diag(1^T G)) X^T,   G = A * (X^T R),
    dL/dv_t = (2 / (d P)) * <R, X - X A>,                     R = f - E,

each divided by |tset|.  Everything runs in float64, and the softmax uses
per-column max subtraction.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule, TimeSet
from .validation import as_matrix, check_timestep, readonly

# Batches are always processed in fixed-size chunks and reduced in chunk
# order, so results are bit-identical no matter how many workers run.
CHUNK = 16


@dataclass(frozen=True)
class ModelParams:
    """Attention matrix W (d x d) and one output scale v_t per step."""

    W: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W", readonly(self.W))
        object.__setattr__(self, "v", readonly(self.v))
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ValueError("W must be square")
        if self.v.ndim != 1:
            raise ValueError("v must be a vector")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.v))):
            raise ValueError("model parameters contain non-finite entries")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def T(self) -> int:
        return self.v.size


@dataclass(frozen=True)
class Gradients:
    dW: np.ndarray
    dv: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.dW)) and np.all(np.isfinite(self.dv))):
            raise ValueError("gradients contain non-finite entries")


def attention_matrix(W, X) -> np.ndarray:
    """Column-stochastic attention A = colsoftmax(X^T W X / d).

    A[i, p] is the weight query p puts on key i; every column sums to 1.
    """
    W = as_matrix(W, "W")
    X = as_matrix(X, "X", rows=W.shape[0])
    logits = (X.T @ W @ X) / W.shape[0]
    logits -= logits.max(axis=0, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=0, keepdims=True)
    return logits


def forward(params: ModelParams, X, t: int) -> np.ndarray:
    """Model output v_t * (X - X A) at 1-based step t."""
    check_timestep(t, params.T)
    X = as_matrix(X, "X", rows=params.d)
    A = attention_matrix(params.W, X)
    return params.v[t - 1] * (X - X @ A)


def _colsoftmax_batch(logits: np.ndarray) -> np.ndarray:
    # logits[b, i, p]: key i, query p; softmax over keys (axis 1), in place.
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def _chunk_loss_grads(W, v, X0, E, alpha_bar, tset, want_grads=True):
    """Sum (not mean) of per-sample losses and gradients over one chunk.

    X0, E: (B, d, P).  Returning sums lets callers reduce chunks in a fixed
    order and divide once, which keeps results identical across worker
    counts.
    """
    B, d, P = X0.shape
    nt = len(tset)
    norm = d * P * nt
    loss = 0.0
    dW = np.zeros_like(W) if want_grads else None
    dv = np.zeros(v.size) if want_grads else None
    for t in tset:
        ab = alpha_bar[t - 1]
        Xt = np.sqrt(ab) * X0 + np.sqrt(1.0 - ab) * E
        XtT = Xt.swapaxes(1, 2)
        A = _colsoftmax_batch((XtT @ (W @ Xt)) / d)
        D = Xt - Xt @ A
        vt = v[t - 1]
        R = vt * D - E
        loss += np.einsum("bdp,bdp->", R, R) / norm
        if not want_grads:
            continue
        dv[t - 1] = 2.0 * np.einsum("bdp,bdp->", R, D) / norm
        G = A * (XtT @ R)
        H = G - A * G.sum(axis=1, keepdims=True)
        XH = Xt @ H
        # sum_b XH_b @ Xt_b^T as one GEMM over the flattened batch
        dW -= (2.0 * vt / (d * norm)) * (
            XH.transpose(1, 0, 2).reshape(d, B * P) @ XtT.reshape(B * P, d)
        )
    if want_grads:
        return loss, dW, dv
    return loss


def sample_loss(params: ModelParams, x0, E, sched: NoiseSchedule, tset: TimeSet) -> float:
    """Per-dimension denoising loss of one datum, averaged over the time set."""
    x0 = as_matrix(x0, "x0", rows=params.d)
    E = as_matrix(E, "E", rows=x0.shape[0], cols=x0.shape[1])
    tset.validate_for(min(sched.T, params.T))
    return float(_chunk_loss_grads(params.W, params.v, x0[None], E[None],
                                   sched.alpha_bar, tset.indices, want_grads=False))


def sample_gradients(params: ModelParams, x0, E, sched: NoiseSchedule, tset: TimeSet) -> Gradients:
    """Exact analytic gradient of ``sample_loss`` with respect to (W, v)."""
    x0 = as_matrix(x0, "x0", rows=params.d)
    E = as_matrix(E, "E", rows=x0.shape[0], cols=x0.shape[1])
    tset.validate_for(min(sched.T, params.T))
    _, dW, dv = _chunk_loss_grads(params.W, params.v, x0[None], E[None],
                                  sched.alpha_bar, tset.indices)
    return Gradients(dW=dW, dv=dv)


def attention_stack(W, Xt_stack: np.ndarray) -> np.ndarray:
    """Attention matrices for a stack of token matrices (n, d, P)."""
    d = W.shape[0]
    return _colsoftmax_batch((Xt_stack.swapaxes(1, 2) @ (W @ Xt_stack)) / d)


def forward_stack(params: ModelParams, Xt_stack: np.ndarray, ts) -> np.ndarray:
    """Model outputs for a stack of noised matrices at 1-based steps ``ts``."""
    A = attention_stack(params.W, Xt_stack)
    vt = params.v[np.asarray(ts, dtype=np.int64) - 1]
    return vt[:, None, None] * (Xt_stack - Xt_stack @ A)


def batch_loss_gradients(params: ModelParams, X0, E, sched: NoiseSchedule, tset: TimeSet,
                         pool=None) -> tuple[float, Gradients]:
    """Mean loss and mean gradients over a batch of data.

    The batch is split into fixed-size chunks regardless of ``pool``; chunk
    results are reduced in index order, so thread count never changes the
    output bits.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if X0.ndim != 3 or X0.shape != E.shape:
        raise ValueError("X0 and E must be (B, d, P) with equal shapes")
    B = X0.shape[0]
    tset.validate_for(min(sched.T, params.T))
    spans = [(i, min(i + CHUNK, B)) for i in range(0, B, CHUNK)]

    def work(span):
        a, b = span
        return _chunk_loss_grads(params.W, params.v, X0[a:b], E[a:b],
                                 sched.alpha_bar, tset.indices)

    results = pool.map(work, spans) if pool is not None else map(work, spans)
    loss = 0.0
    dW = np.zeros_like(params.W)
    dv = np.zeros(params.T)
    for closs, cdW, cdv in results:
        loss += closs
        dW += cdW
        dv += cdv
    return loss / B, Gradients(dW=dW / B, dv=dv / B)


def save_checkpoint(path, params: ModelParams, step: int, extra: dict | None = None) -> None:
    """Write a checkpoint: JSON header plus base64 of W (row-major) then v."""
    payload = np.concatenate([params.W.ravel(order="C"), params.v])
    doc = {
        "d": params.d,
        "T": params.T,
        "step": int(step),
        "dtype": "float64",
        "data": base64.b64encode(payload.tobytes()).decode("ascii"),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, int]:
    with open(path) as fh:
        doc = json.load(fh)
    d, T = int(doc["d"]), int(doc["T"])
    payload = np.frombuffer(base64.b64decode(doc["data"]), dtype=np.float64)
    if payload.size != d * d + T:
        raise ValueError("checkpoint payload size does not match header")
    params = ModelParams(W=payload[: d * d].reshape(d, d), v=payload[d * d:])
    return params, int(doc["step"])
