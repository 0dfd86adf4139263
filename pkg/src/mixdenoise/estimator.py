"""Scikit-learn style front end for the attention denoiser.

``AttentionDenoiser`` packages the generative data spec and the training
loop behind the familiar ``fit`` / ``predict`` / ``get_params`` surface so
the model composes with scikit-learn tooling (cloning, grid search over
hyperparameters, pipelines that end in a custom step).

The estimator trains against its configured token-mixture distribution by
sampling fresh batches internally, so ``fit`` takes no design matrix;
``predict`` and ``denoise`` then apply the trained model to any noised
token matrices.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .model import attention_matrix, forward
from .patterns import MixtureParams, build_pattern_set, uniform_proportions
from .rng import STREAM_SCORE, seed_seq
from .schedule import TimeSet, linear_schedule
from .training import TrainConfig, evaluate, run_training
from .validation import as_matrix


class AttentionDenoiser(BaseEstimator):
    """One-layer softmax-attention noise predictor, trained by plain GD.

    Parameters mirror the training config: the data distribution
    (``d``, ``n_patterns``, ``k_active``, ``rho``, ``pi_tilde``), the noise
    schedule (``timesteps``, ``alpha1``, ``alpha_t``), and the optimizer
    (``eta``, ``steps``, ``batch``).  ``random_state`` seeds everything.

    Attributes set by ``fit``: ``model_`` (trained parameters), ``config_``
    (the resolved TrainConfig), ``trace_`` (evaluation records), and
    ``schedule_``.
    """

    def __init__(self, d=32, n_patterns=4, k_active=2, rho=0.3, pi_tilde=None,
                 norm_sq=None, pattern_seed=0, tokens=64, timesteps=10,
                 alpha1=0.98, alpha_t=0.95, eta=0.5, eta_w=None, steps=2000,
                 batch=128, eval_every=100, eval_size=256, random_state=0,
                 threads=1):
        self.d = d
        self.n_patterns = n_patterns
        self.k_active = k_active
        self.rho = rho
        self.pi_tilde = pi_tilde
        self.norm_sq = norm_sq
        self.pattern_seed = pattern_seed
        self.tokens = tokens
        self.timesteps = timesteps
        self.alpha1 = alpha1
        self.alpha_t = alpha_t
        self.eta = eta
        self.eta_w = eta_w
        self.steps = steps
        self.batch = batch
        self.eval_every = eval_every
        self.eval_size = eval_size
        self.random_state = random_state
        self.threads = threads

    def _build_config(self) -> TrainConfig:
        norm_sq = float(self.d) if self.norm_sq is None else float(self.norm_sq)
        patterns = build_pattern_set(self.d, self.n_patterns, norm_sq, self.pattern_seed)
        pi = (uniform_proportions(self.n_patterns) if self.pi_tilde is None
              else np.asarray(self.pi_tilde, dtype=np.float64))
        data = MixtureParams(patterns=patterns, pi_tilde=pi, K=self.k_active, rho=self.rho)
        sched = linear_schedule(self.timesteps, self.alpha1, self.alpha_t)
        return TrainConfig(
            data=data, P=self.tokens, sched=sched, tset=TimeSet.full(self.timesteps),
            eta=self.eta, eta_w=self.eta_w, steps=self.steps, batch=self.batch,
            eval_every=self.eval_every, eval_size=self.eval_size,
            master_seed=self.random_state,
        )

    def fit(self, X=None, y=None):
        """Train from the configured distribution.  ``X`` must be ``None``.

        Training optimizes the population denoising objective with fresh
        internally sampled batches, so there is no design matrix to pass.
        """
        if X is not None:
            raise ValueError("AttentionDenoiser samples its own training data; pass X=None")
        cfg = self._build_config()
        params, records = run_training(cfg, threads=self.threads)
        self.config_ = cfg
        self.schedule_ = cfg.sched
        self.model_ = params
        self.trace_ = records
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this AttentionDenoiser instance is not fitted yet")

    def predict(self, X, t: int) -> np.ndarray:
        """Predicted injected noise for noised tokens X at step t.

        X is one (d, P) matrix or a stack (n, d, P); the prediction has the
        same shape.
        """
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return forward(self.model_, X, t)
        if X.ndim == 3:
            return np.stack([forward(self.model_, x, t) for x in X])
        raise ValueError("X must be (d, P) or (n, d, P)")

    def denoise(self, X, t: int) -> np.ndarray:
        """Estimate of the clean tokens: (X - sqrt(1-abar_t) E_hat) / sqrt(abar_t)."""
        self._check_fitted()
        ab = self.schedule_.abar(t)
        return (np.asarray(X, dtype=np.float64)
                - np.sqrt(1.0 - ab) * self.predict(X, t)) / np.sqrt(ab)

    def attention(self, X, t: int = 1) -> np.ndarray:
        """Attention matrix of the trained model on tokens X."""
        self._check_fitted()
        return attention_matrix(self.model_.W, as_matrix(X, "X", rows=self.d))

    def score(self, X=None, y=None) -> float:
        """Negative held-out denoising loss on fresh evaluation data."""
        self._check_fitted()
        record = evaluate(self.model_, self.config_,
                          seed_seq(self.config_.master_seed, STREAM_SCORE))
        return -record.eval_loss
