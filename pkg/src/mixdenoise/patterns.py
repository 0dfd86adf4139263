"""Orthogonal pattern dictionaries and the token-mixture data distribution.

A datum is a matrix of P token columns in R^d.  Each datum first draws a
subset Z of K out of M fixed orthogonal mean vectors ("patterns"), then
draws every token label from the subset-renormalized proportions, and
finally adds isotropic Gaussian component noise of scale rho:

    Z  ~ Uniform over K-subsets of {1..M}
    Y_p | Z  ~ Categorical(pi(Z)),   pi_u(Z) = z_u * pi_tilde_u / (z . pi_tilde)
    x_p | Y_p ~ Normal(mu_{Y_p}, rho^2 I)

The module also provides the two scalar summaries used throughout: the
per-pattern average token share ``nu`` (exact subset enumeration) and the
proportion imbalance ratio ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from .validation import as_float_array, check_prob_vector, readonly

# Exact enumeration over K-subsets is intentionally capped; beyond this the
# summaries should be estimated by Monte Carlo instead.
MAX_SUBSETS = 10**6


@dataclass(frozen=True)
class PatternSet:
    """M pattern vectors in R^d with a common squared norm.

    Rows of ``means`` are the patterns.  By default the set must be
    mutually orthogonal (within 1e-9 relative) and satisfy M <= d.
    ``orthogonal=False`` relaxes both checks; that mode exists for
    low-dimensional diagnostic instances (e.g. a +/-mu pair on the line)
    and is not serializable.

    ``seed`` records provenance: the set was built by ``build_pattern_set``
    with this seed (``None`` means the axis-aligned construction).
    """

    d: int
    M: int
    norm_sq: float
    means: np.ndarray
    seed: int | None = None
    orthogonal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "means", readonly(self.means))
        if self.means.shape != (self.M, self.d):
            raise ValueError(f"means has shape {self.means.shape}, expected {(self.M, self.d)}")
        if self.M < 2:
            raise ValueError("need at least two patterns")
        if self.norm_sq <= 0:
            raise ValueError("norm_sq must be positive")
        gram = self.means @ self.means.T
        tol = 1e-9 * self.norm_sq
        if np.abs(np.diag(gram) - self.norm_sq).max() > tol:
            raise ValueError("pattern norms deviate from norm_sq")
        if self.orthogonal:
            if self.M > self.d:
                raise ValueError("insufficient dimension: M orthogonal patterns need M <= d")
            off = gram - np.diag(np.diag(gram))
            if np.abs(off).max() > tol:
                raise ValueError("patterns are not mutually orthogonal")

    @classmethod
    def from_means(cls, means, norm_sq: float | None = None, orthogonal: bool = True) -> "PatternSet":
        """Wrap explicit mean vectors (rows).  No seed provenance."""
        means = as_float_array(means, "means", ndim=2)
        if norm_sq is None:
            norm_sq = float(means[0] @ means[0])
        return cls(d=means.shape[1], M=means.shape[0], norm_sq=float(norm_sq),
                   means=means, seed=None, orthogonal=orthogonal)

    def mean_matrix(self, y: np.ndarray) -> np.ndarray:
        """d x P matrix whose column p is the pattern of label y[p]."""
        return self.means[np.asarray(y, dtype=np.int64)].T


def _axis_aligned_means(d: int, M: int, norm_sq: float) -> np.ndarray:
    means = np.zeros((M, d))
    np.fill_diagonal(means[:, :M], math.sqrt(norm_sq))
    return means


def build_pattern_set(d: int, M: int, norm_sq: float, seed: int | None) -> PatternSet:
    """Build M pairwise-orthogonal patterns of squared norm ``norm_sq``.

    The set is a random rotation of the first M scaled standard basis
    vectors: a seeded Gaussian matrix is orthonormalized by QR (with the
    sign of diag(R) fixed so the result is deterministic).  ``seed=None``
    skips the rotation and returns the axis-aligned set, which is handy
    for hand-checkable examples.
    """
    if not 2 <= M <= d:
        raise ValueError(f"insufficient dimension: need 2 <= M <= d, got M={M}, d={d}")
    if norm_sq <= 0:
        raise ValueError("norm_sq must be positive")
    if seed is None:
        means = _axis_aligned_means(d, M, norm_sq)
    else:
        rng = np.random.default_rng(int(seed))
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        means = math.sqrt(norm_sq) * q[:, :M].T
    return PatternSet(d=d, M=M, norm_sq=float(norm_sq), means=means, seed=seed)


@dataclass(frozen=True)
class MixtureParams:
    """Full specification of the token-mixture distribution."""

    patterns: PatternSet
    pi_tilde: np.ndarray
    K: int
    rho: float

    def __post_init__(self):
        pi = check_prob_vector(self.pi_tilde, "pi_tilde")
        if pi.size != self.patterns.M:
            raise ValueError(f"pi_tilde has {pi.size} entries for M={self.patterns.M} patterns")
        object.__setattr__(self, "pi_tilde", readonly(pi))
        if not 1 <= self.K <= self.patterns.M:
            raise ValueError(f"K={self.K} outside [1, M={self.patterns.M}]")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")

    @property
    def d(self) -> int:
        return self.patterns.d

    @property
    def M(self) -> int:
        return self.patterns.M

    def with_proportions(self, pi_tilde) -> "MixtureParams":
        """Same patterns and K, shifted mixture proportions."""
        return replace(self, pi_tilde=np.asarray(pi_tilde, dtype=np.float64))


@dataclass(frozen=True)
class Sample:
    """One datum: clean tokens with their latent labels and subset."""

    x0: np.ndarray  # (d, P)
    y: np.ndarray   # (P,) labels in [0, M)
    z: np.ndarray   # (M,) binary subset indicator

    def __post_init__(self):
        object.__setattr__(self, "x0", readonly(self.x0))
        object.__setattr__(self, "y", readonly(self.y, dtype=np.int64))
        object.__setattr__(self, "z", readonly(self.z, dtype=np.int64))
        if self.x0.ndim != 2 or self.y.ndim != 1 or self.x0.shape[1] != self.y.size:
            raise ValueError("x0 must be (d, P) with one label per token")
        if not np.all((self.z == 0) | (self.z == 1)) or self.z.sum() < 1:
            raise ValueError("z must be a binary indicator with nonempty support")
        if self.y.min() < 0 or self.y.max() >= self.z.size:
            raise ValueError("labels outside [0, M)")
        if not np.all(self.z[self.y] == 1):
            raise ValueError("every label must lie in the support of z")

    @property
    def P(self) -> int:
        return self.y.size


def mixture_proportions(pi_tilde, z) -> np.ndarray:
    """Renormalize pi_tilde onto the support of the subset indicator z."""
    pi = check_prob_vector(pi_tilde, "pi_tilde")
    z = np.asarray(z)
    if z.shape != pi.shape:
        raise ValueError("z and pi_tilde must have equal length")
    mass = float(pi @ (z != 0))
    if mass <= 0.0:
        raise ValueError("z selects no patterns")
    return np.where(z != 0, pi, 0.0) / mass


def sample_data(params: MixtureParams, P: int, rng: np.random.Generator) -> Sample:
    """Draw one datum of P tokens; deterministic given the stream state."""
    if P < 1:
        raise ValueError("P must be at least 1")
    M, d = params.M, params.d
    support = rng.choice(M, size=params.K, replace=False)
    z = np.zeros(M, dtype=np.int64)
    z[support] = 1
    pz = mixture_proportions(params.pi_tilde, z)
    y = rng.choice(M, size=P, p=pz)
    x0 = params.patterns.means[y].T + params.rho * rng.standard_normal((d, P))
    return Sample(x0=x0, y=y, z=z)


def subset_indicators(M: int, K: int) -> np.ndarray:
    """All K-subsets of [M] as a (C(M,K), M) binary matrix, lexicographic."""
    n = math.comb(M, K)
    if n > MAX_SUBSETS:
        raise ValueError(f"C({M},{K})={n} subsets exceed the enumeration cap {MAX_SUBSETS}")
    out = np.zeros((n, M), dtype=np.int64)
    for i, idx in enumerate(combinations(range(M), K)):
        out[i, list(idx)] = 1
    return out


def enumerate_nu(params: MixtureParams) -> np.ndarray:
    """Per-pattern average token share, by exact subset enumeration.

    nu_u = E_Z[pi_u(Z)] with Z uniform over K-subsets; the entries sum to 1.
    """
    zs = subset_indicators(params.M, params.K)
    masked = zs * params.pi_tilde[None, :]
    cond = masked / masked.sum(axis=1, keepdims=True)
    return cond.mean(axis=0)


def imbalance_delta(pi_tilde) -> float:
    """min(pi_tilde) / max(pi_tilde), in (0, 1]."""
    pi = check_prob_vector(pi_tilde, "pi_tilde")
    return float(pi.min() / pi.max())


def uniform_proportions(M: int) -> np.ndarray:
    return np.full(M, 1.0 / M)


def imbalanced_proportions(M: int, min_mass: float) -> np.ndarray:
    """One rare pattern of mass ``min_mass``, the rest uniform."""
    if not 0 < min_mass <= 1.0 / M:
        raise ValueError("min_mass must lie in (0, 1/M]")
    pi = np.full(M, (1.0 - min_mass) / (M - 1))
    pi[0] = min_mass
    return pi


def mixture_params_to_json(params: MixtureParams) -> dict:
    """JSON document with keys d, M, K, rho, pi_tilde, norm_sq, pattern_seed."""
    ps = params.patterns
    if ps.seed is None:
        expected = _axis_aligned_means(ps.d, ps.M, ps.norm_sq)
        if not np.array_equal(ps.means, expected):
            raise ValueError("pattern set has no seed provenance; cannot serialize")
    return {
        "d": ps.d,
        "M": ps.M,
        "K": params.K,
        "rho": params.rho,
        "pi_tilde": [float(x) for x in params.pi_tilde],
        "norm_sq": ps.norm_sq,
        "pattern_seed": ps.seed,
    }


def mixture_params_from_json(doc: dict) -> MixtureParams:
    d, M = int(doc["d"]), int(doc["M"])
    norm_sq = doc.get("norm_sq")
    norm_sq = float(d) if norm_sq is None else float(norm_sq)
    seed = doc.get("pattern_seed")
    patterns = build_pattern_set(d, M, norm_sq, None if seed is None else int(seed))
    pi = doc.get("pi_tilde", "uniform")
    if isinstance(pi, str):
        if pi != "uniform":
            raise ValueError(f"unknown pi_tilde shorthand {pi!r}")
        pi = uniform_proportions(M)
    elif isinstance(pi, dict):
        pi = imbalanced_proportions(M, float(pi["min"]))
    return MixtureParams(patterns=patterns, pi_tilde=np.asarray(pi, dtype=np.float64),
                         K=int(doc["K"]), rho=float(doc["rho"]))
