"""Nonparametric oracles used to check the Echo rate and noise claims independently.

- :func:`kl_entropy`: Kozachenko-Leonenko k-NN differential entropy.
- :func:`ksg_mi`: Kraskov-Stoegbauer-Grassberger mutual information (algorithm 1).
- :func:`energy_distance_test`: two-sample energy statistic with a permutation p-value.
- :func:`gaussian_tc`: second-order (Gaussian) total correlation.
- :func:`anderson_darling`: normality test with estimated mean and variance, p-value
  from a simulated composite null.

All results are in nats and deterministic given the data and seed.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import digamma, gammaln, log_ndtr

BRUTE_MAX_N = 4000
JITTER = 1e-10


@dataclass
class SampleSet:
    data: np.ndarray
    label: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] < 2:
            raise ValueError(f"a sample set needs at least two rows, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"sample set {self.label!r} contains non-finite values")
        self.data = data

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class TestResult:
    statistic: float
    p_value: float
    n_permutations: int

    __test__ = False  # not a pytest class


def _as_samples(x) -> SampleSet:
    return x if isinstance(x, SampleSet) else SampleSet(x)


def _dejitter(data, seed=0):
    warnings.warn("duplicate points found; adding 1e-10 jitter", RuntimeWarning, stacklevel=3)
    rng = np.random.default_rng(seed)
    return data + JITTER * rng.standard_normal(data.shape)


# -- nearest neighbours ------------------------------------------------------

def knn_distance(data: np.ndarray, k: int, metric: str = "euclidean", method: str = "auto") -> np.ndarray:
    """Distance from every row to its k-th nearest other row (exact)."""
    n = data.shape[0]
    if method == "auto":
        method = "brute" if n <= BRUTE_MAX_N else "tree"
    if method == "tree":
        p = np.inf if metric == "chebyshev" else 2
        dist, _ = cKDTree(data).query(data, k=k + 1, p=p)
        return dist[:, k]
    out = np.empty(n)
    for start in range(0, n, 1024):
        block = cdist(data[start:start + 1024], data, metric=metric)
        rows = np.arange(block.shape[0])
        block[rows, start + rows] = np.inf
        out[start:start + 1024] = np.partition(block, k - 1, axis=1)[:, k - 1]
    return out


def count_within(data: np.ndarray, radius: np.ndarray, method: str = "auto") -> np.ndarray:
    """Number of other rows strictly inside ``radius[i]`` of row ``i`` (max-norm)."""
    n = data.shape[0]
    if method == "auto":
        method = "brute" if n <= BRUTE_MAX_N else "tree"
    if method == "tree":
        strict = np.nextafter(radius, 0.0)
        return cKDTree(data).query_ball_point(data, strict, p=np.inf, return_length=True) - 1
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, 1024):
        block = cdist(data[start:start + 1024], data, metric="chebyshev")
        out[start:start + 1024] = (block < radius[start:start + 1024, None]).sum(axis=1) - 1
    return out


# -- entropy and mutual information ------------------------------------------

def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d + 1.0))


def kl_entropy(samples, k: int = 5, method: str = "auto") -> float:
    """Kozachenko-Leonenko entropy estimate with Euclidean k-NN balls."""
    s = _as_samples(samples)
    n, d = s.data.shape
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    data = s.data
    eps = knn_distance(data, k, "euclidean", method)
    if np.any(eps == 0):
        data = _dejitter(data)
        eps = knn_distance(data, k, "euclidean", method)
    return float(digamma(n) - digamma(k) + log_unit_ball_volume(d) + d * np.mean(np.log(eps)))


def ksg_mi(x, z, k: int = 5, method: str = "auto") -> float:
    """KSG estimate of I(X; Z) with max-norm neighbourhoods.

    A deterministic relation such as ``Z = X`` is outside the estimator's
    domain: the estimate then grows like ``log n`` instead of converging.
    """
    xs, zs = _as_samples(x), _as_samples(z)
    if xs.n != zs.n:
        raise ValueError(f"paired samples must have equal length ({xs.n} vs {zs.n})")
    n = xs.n
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    xd, zd = xs.data, zs.data
    joint = np.hstack([xd, zd])
    eps = knn_distance(joint, k, "chebyshev", method)
    if np.any(eps == 0):
        joint = _dejitter(joint)
        xd, zd = joint[:, :xs.dim], joint[:, xs.dim:]
        eps = knn_distance(joint, k, "chebyshev", method)
    nx = count_within(xd, eps, method)
    nz = count_within(zd, eps, method)
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(nz + 1)))


# -- two-sample energy test --------------------------------------------------

def energy_distance_test(a, b, n_perm: int = 1000, seed=0, block: int = 1000) -> TestResult:
    """Energy statistic ``2E|A-B| - E|A-A'| - E|B-B'|`` and its permutation p-value.

    With signed weights ``w = 1/n_a`` on A and ``-1/n_b`` on B the statistic
    is ``-w^T D w`` for the pooled distance matrix ``D``, so every permutation
    is one column of a single blocked ``D @ W`` product and ``D`` is never
    held in memory whole.
    """
    a, b = _as_samples(a), _as_samples(b)
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    pooled = np.vstack([a.data, b.data])
    N, na = pooled.shape[0], a.n
    rng = np.random.default_rng(seed)
    labels = np.zeros((N, n_perm + 1), dtype=bool)
    labels[:na, 0] = True
    for j in range(1, n_perm + 1):
        labels[rng.permutation(N)[:na], j] = True
    dtype = np.float64 if N <= 5000 else np.float32
    W = np.where(labels, 1.0 / na, -1.0 / b.n).astype(dtype)
    stats = np.zeros(n_perm + 1)
    for start in range(0, N, block):
        D = cdist(pooled[start:start + block], pooled).astype(dtype, copy=False)
        stats -= np.einsum("ij,ij->j", W[start:start + block], D @ W, dtype=np.float64)
    observed = stats[0]
    p = (1.0 + np.count_nonzero(stats[1:] >= observed)) / (n_perm + 1.0)
    return TestResult(float(observed), float(p), int(n_perm))


# -- total correlation and normality -----------------------------------------

def gaussian_tc(samples, paper_convention: bool = False) -> float:
    """Gaussian total correlation ``-1/2 log det(corr)`` in nats.

    ``paper_convention=True`` drops the 1/2, i.e. ``-log det(corr)``.
    """
    s = _as_samples(samples)
    if s.n <= s.dim:
        raise ValueError(f"need more samples than dimensions (n={s.n}, d={s.dim})")
    if s.dim == 1:
        return 0.0
    corr = np.corrcoef(s.data, rowvar=False)
    sign, logdet = np.linalg.slogdet(corr)
    if not np.isfinite(logdet) or sign <= 0 or np.linalg.cond(corr) > 1e12:
        raise np.linalg.LinAlgError("correlation matrix is singular")
    return float(-logdet if paper_convention else -0.5 * logdet)


def ad_statistic(x: np.ndarray) -> np.ndarray:
    """A^2 for each row of ``x`` after standardising with the row mean and sd (ddof=1)."""
    x = np.atleast_2d(x)
    n = x.shape[1]
    sd = x.std(axis=1, ddof=1, keepdims=True)
    if np.any(sd == 0):
        raise ValueError("Anderson-Darling needs non-zero variance")
    y = np.sort((x - x.mean(axis=1, keepdims=True)) / sd, axis=1)
    i = np.arange(1, n + 1)
    terms = (2 * i - 1) * (log_ndtr(y) + log_ndtr(-y[:, ::-1]))
    return -n - terms.sum(axis=1) / n


@functools.lru_cache(maxsize=32)
def _ad_null(n: int, n_null_sims: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    chunks = []
    for start in range(0, n_null_sims, 256):
        m = min(256, n_null_sims - start)
        chunks.append(ad_statistic(rng.standard_normal((m, n))))
    return np.sort(np.concatenate(chunks))


def anderson_darling(samples, n_null_sims: int = 1000, seed: int = 0) -> TestResult:
    """Normality test; the null distribution of A^2 is simulated, never tabulated.

    A^2 with estimated location and scale is location-scale invariant, so the
    simulated null only depends on ``n``.
    """
    s = _as_samples(samples)
    if s.dim != 1:
        raise ValueError("Anderson-Darling takes one-dimensional samples")
    if s.n < 20:
        raise ValueError("Anderson-Darling needs at least 20 samples")
    stat = float(ad_statistic(s.data[:, 0])[0])
    null = _ad_null(s.n, int(n_null_sims), int(seed))
    exceed = null.size - np.searchsorted(null, stat, side="left")
    return TestResult(stat, float((1.0 + exceed) / (null.size + 1.0)), int(n_null_sims))
