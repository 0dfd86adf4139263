"""Forward-diffusion noise schedules and signal-to-noise summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_matrix, check_timestep, readonly


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention factors alpha_t and their cumulative products.

    ``alpha_bar[t-1]`` is the total signal retention after t steps; it is
    strictly decreasing and stays in (0, 1).
    """

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", readonly(self.alpha))
        object.__setattr__(self, "alpha_bar", readonly(self.alpha_bar))
        if self.alpha.shape != (self.T,) or self.alpha_bar.shape != (self.T,):
            raise ValueError("alpha and alpha_bar must both have length T")
        if not (np.all(self.alpha > 0) and np.all(self.alpha < 1)):
            raise ValueError("alpha entries must lie in (0, 1)")
        if not (np.all(self.alpha_bar > 0) and np.all(self.alpha_bar < 1)):
            raise ValueError("alpha_bar entries must lie in (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        recon = np.concatenate([[self.alpha[0]], self.alpha_bar[:-1] * self.alpha[1:]])
        if np.abs(recon - self.alpha_bar).max() > 1e-12:
            raise ValueError("alpha_bar is not the cumulative product of alpha")

    def abar(self, t: int) -> float:
        """alpha_bar at 1-based step t."""
        return float(self.alpha_bar[check_timestep(t, self.T) - 1])


def linear_schedule(T: int, alpha1: float, alphaT: float) -> NoiseSchedule:
    """Linearly interpolated alpha_t from alpha1 down to alphaT.

    alpha_t = alpha1 - (alpha1 - alphaT) * (t - 1) / (T - 1); for T = 1 the
    single step uses alpha1.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < alphaT <= alpha1 < 1.0:
        raise ValueError("need 0 < alphaT <= alpha1 < 1")
    if T == 1:
        alpha = np.array([alpha1])
    else:
        alpha = alpha1 - (alpha1 - alphaT) * np.arange(T) / (T - 1)
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_noise(x0, t: int, E, sched: NoiseSchedule) -> np.ndarray:
    """Noised tokens sqrt(abar_t) * x0 + sqrt(1 - abar_t) * E."""
    x0 = as_matrix(x0, "x0")
    E = as_matrix(E, "E", rows=x0.shape[0], cols=x0.shape[1])
    ab = sched.abar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * E


@dataclass(frozen=True)
class TimeSet:
    """Ordered subset of 1-based diffusion steps used for loss averaging."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(idx) == 0:
            raise ValueError("TimeSet is empty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("TimeSet indices must be strictly increasing")
        if idx[0] < 1:
            raise ValueError("TimeSet indices start at 1")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def validate_for(self, T: int) -> "TimeSet":
        if self.indices[-1] > T:
            raise ValueError(f"TimeSet index {self.indices[-1]} exceeds T={T}")
        return self

    @classmethod
    def full(cls, T: int) -> "TimeSet":
        return cls(tuple(range(1, T + 1)))

    @classmethod
    def first_fraction(cls, T: int, fraction: float) -> "TimeSet":
        n = max(1, int(fraction * T))
        return cls(tuple(range(1, n + 1)))

    @classmethod
    def last_fraction(cls, T: int, fraction: float) -> "TimeSet":
        n = max(1, int(fraction * T))
        return cls(tuple(range(T - n + 1, T + 1)))


def time_averaged_snr(sched: NoiseSchedule, tset: TimeSet) -> float:
    """Mean of alpha_bar / (1 - alpha_bar) over the time set."""
    tset.validate_for(sched.T)
    ab = sched.alpha_bar[np.array(tset.indices) - 1]
    return float(np.mean(ab / (1.0 - ab)))


def schedule_to_json(sched: NoiseSchedule) -> dict:
    """Serialize a linear schedule; refuses schedules that are not linear."""
    a1, aT = float(sched.alpha[0]), float(sched.alpha[-1])
    if np.abs(linear_schedule(sched.T, a1, aT).alpha - sched.alpha).max() > 1e-12:
        raise ValueError("only linear schedules are serializable")
    return {"kind": "linear", "T": sched.T, "alpha1": a1, "alphaT": aT}


def schedule_from_json(doc: dict) -> NoiseSchedule:
    if doc.get("kind", "linear") != "linear":
        raise ValueError(f"unknown schedule kind {doc.get('kind')!r}")
    return linear_schedule(int(doc["T"]), float(doc["alpha1"]), float(doc["alphaT"]))
