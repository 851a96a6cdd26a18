"""Echo noise: clip solver, iid and in-batch samplers, the channel, and its exact rate.

Noise is the truncated nested sum

    eps = f(x0) + s(x0) * (f(x1) + s(x1) * (f(x2) + ...))

over ``d_max`` iid draws ``x0, x1, ...``. Keeping ``|f| <= M`` and ``s <= r``
bounds the dropped tail by ``M * r**d_max / (1 - r)``, and the channel
``z = f(x) + s(x) * eps`` then has rate ``-sum_j E log s_j(x)``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Node

MODES = ("iid", "batch-permute")
R_MAX = 1.0 - 1e-7
BOUND_SLACK = 1e-6

TOL_FLOAT32 = 2.0 ** -23
TOL_FLOAT64 = 2.0 ** -52


class ConvergenceConditionError(ValueError):
    """Encoder outputs break ``|f| <= M`` or ``s <= r``, so the noise series is not trustworthy."""


class ClipClampWarning(UserWarning):
    pass


def default_tol(dtype=np.float32) -> float:
    return TOL_FLOAT64 if np.dtype(dtype) == np.float64 else TOL_FLOAT32


def remainder_bound(M: float, r: float, d_max: int) -> float:
    """Upper bound on the tail of the echo series after ``d_max`` terms."""
    if r >= 1.0:
        raise ValueError(f"r={r} >= 1: the echo series diverges")
    if r < 0.0:
        raise ValueError(f"r={r} must be non-negative")
    return M * r ** d_max / (1.0 - r)


def solve_clip(M: float, d_max: int, tol: float) -> float:
    """Largest clip factor ``r`` whose truncation remainder stays within ``tol``.

    Solves ``M * r**d_max / (1 - r) = tol`` by bisection on its log, which is
    strictly increasing on (0, 1). If the root lies above ``1 - 1e-7`` the
    result is clamped there and a :class:`ClipClampWarning` is issued.
    """
    if M <= 0 or tol <= 0:
        raise ValueError(f"M and tol must be positive (M={M}, tol={tol})")
    if d_max < 1 or int(d_max) != d_max:
        raise ValueError(f"d_max must be a positive integer, got {d_max}")
    target = math.log(tol) - math.log(M)

    def excess(r):
        return d_max * math.log(r) - math.log1p(-r) - target

    if excess(R_MAX) < 0:
        warnings.warn(f"no clip factor below {R_MAX} reaches tol={tol}; clamping", ClipClampWarning, stacklevel=2)
        return R_MAX
    lo, hi = 0.0, R_MAX
    while hi - lo > 1e-15:
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if mid > 0 and excess(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return lo


def rate_floor(d_z: int, r: float) -> float:
    """Lowest rate reachable when every ``s_j`` sits at the clip ``r``."""
    return float(-d_z * np.log(np.float64(r)))


@dataclass
class EchoConfig:
    d_max: int = 99
    M: float = 1.0
    tol: float = TOL_FLOAT32
    r: float | None = None
    mode: str = "batch-permute"
    with_replacement: bool = False
    detach_noise_gradients: bool = False

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.r is None:
            self.r = solve_clip(self.M, self.d_max, self.tol)
        if not 0.0 < self.r < 1.0:
            raise ValueError(f"r must lie in (0, 1), got {self.r}")
        bound = remainder_bound(self.M, self.r, self.d_max)
        if bound > self.tol * (1.0 + 1e-9) and self.r != R_MAX:
            raise ValueError(f"r={self.r} leaves remainder {bound:.3e} above tol={self.tol:.3e}")

    @property
    def log_r(self) -> float:
        return float(np.log(np.float64(self.r)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "EchoConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown EchoConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "EchoConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def for_batch(cls, batch_size: int, **kw) -> "EchoConfig":
        """Batch-permute config with ``d_max = B - 1``."""
        return cls(d_max=batch_size - 1, mode="batch-permute", **kw)


@dataclass
class EncoderOutput:
    f: Node
    log_s: Node


@dataclass
class ChannelDraw:
    z: Node
    epsilon: Node
    pointwise_rate: Node
    rate: Node


def _value(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


def check_bounds(f, log_s, cfg: EchoConfig) -> None:
    fv, lv = _value(f), _value(log_s)
    worst_f = float(np.max(np.abs(fv))) if fv.size else 0.0
    if worst_f > cfg.M + BOUND_SLACK:
        raise ConvergenceConditionError(f"|f| bound violated: max |f| = {worst_f:.6g} > M = {cfg.M}")
    worst_s = float(np.exp(np.max(lv))) if lv.size else 0.0
    if worst_s > cfg.r + BOUND_SLACK:
        raise ConvergenceConditionError(f"s <= r bound violated: max s = {worst_s:.6g} > r = {cfg.r:.6g}")


def horner(fs, ss):
    """Evaluate ``f0 + s0*(f1 + s1*(f2 + ...))`` from the innermost term outwards."""
    acc = np.array(fs[-1], copy=True)
    for f, s in zip(reversed(fs[:-1]), reversed(ss[:-1])):
        acc = f + s * acc
    return acc


def sample_echo_iid(sampler: Callable[[np.random.Generator, int], np.ndarray],
                    encoder: Callable[[np.ndarray], tuple], cfg: EchoConfig, n: int, seed) -> np.ndarray:
    """Draw ``n`` echo-noise vectors using fresh source samples for every term.

    ``sampler(rng, n)`` returns ``n`` source rows; ``encoder(x)`` returns
    ``(f, log_s)`` arrays (or an :class:`EncoderOutput`). Term ``l`` of every
    row uses the ``l``-th call to ``sampler``, so a deeper truncation with the
    same seed extends, rather than redraws, a shallower one.
    """
    rng = np.random.default_rng(seed)
    fs, ss = [], []
    for _ in range(cfg.d_max):
        out = encoder(sampler(rng, n))
        f, log_s = (out.f, out.log_s) if isinstance(out, EncoderOutput) else out
        f, log_s = _value(f), _value(log_s)
        check_bounds(f, log_s, cfg)
        fs.append(f)
        ss.append(np.exp(log_s))
    return horner(fs, ss)


def echo_orderings(batch_size: int, d_max: int, with_replacement: bool, rng: np.random.Generator) -> np.ndarray:
    """Index matrix ``(B, d_max)``: row ``i`` lists the batch rows echoed for anchor ``i``.

    Without replacement a single permutation ``pi`` is drawn per batch and
    anchor ``i`` reads the ``d_max`` cyclic successors of ``i`` in ``pi``.
    With replacement each term is uniform over the other ``B - 1`` rows. The
    anchor itself never appears in its own sequence.
    """
    B = batch_size
    if B < 2:
        raise ValueError("batch echo noise needs at least two rows")
    if with_replacement:
        u = rng.integers(0, B - 1, size=(B, d_max))
        return u + (u >= np.arange(B)[:, None])
    if d_max > B - 1:
        raise ValueError(f"d_max={d_max} exceeds B-1={B - 1} for sampling without replacement")
    perm = rng.permutation(B)
    pos = np.empty(B, dtype=np.intp)
    pos[perm] = np.arange(B)
    offsets = pos[:, None] + 1 + np.arange(d_max)[None, :]
    return perm[offsets % B]


def sample_echo_batch(f, log_s, cfg: EchoConfig, seed) -> Node:
    """Echo noise for every row of a batch, built from the other rows' ``(f, log_s)``.

    Products of scales along each sequence are formed as exponentiated prefix
    sums of ``log_s`` (a strictly lower-triangular matmul), so the whole sum is
    a handful of differentiable ops. Gradients reach every row used as an echo
    unless ``cfg.detach_noise_gradients`` is set.
    """
    f, log_s = dc.as_node(f), dc.as_node(log_s)
    if f.shape != log_s.shape or f.value.ndim != 2:
        raise ValueError(f"f and log_s must be matching (B, d_z) arrays, got {f.shape} and {log_s.shape}")
    check_bounds(f, log_s, cfg)
    rng = np.random.default_rng(seed)
    idx = echo_orderings(f.shape[0], cfg.d_max, cfg.with_replacement, rng)
    if cfg.detach_noise_gradients:
        f, log_s = dc.detach(f), dc.detach(log_s)
    terms_f = dc.gather(f, idx)
    terms_ls = dc.gather(log_s, idx)
    prefix = np.tril(np.ones((cfg.d_max, cfg.d_max), dtype=log_s.dtype), k=-1)
    log_weights = dc.matmul(dc.constant(prefix), terms_ls)
    return dc.sum(dc.mul(dc.exp(log_weights), terms_f), axis=1)


def apply_channel(f, log_s, epsilon) -> Node:
    """``z = f + exp(log_s) * epsilon``."""
    f, log_s, epsilon = dc.as_node(f), dc.as_node(log_s), dc.as_node(epsilon)
    if not (f.shape == log_s.shape == epsilon.shape):
        raise ValueError(f"shape mismatch: f {f.shape}, log_s {log_s.shape}, epsilon {epsilon.shape}")
    return dc.add(f, dc.mul(dc.exp(log_s), epsilon))


def echo_rate(log_s, r: float | None = None) -> tuple[Node, Node]:
    """Exact rate in nats: ``(batch mean, per-example -sum_j log_s)``.

    With the clip ``r`` supplied, the per-example rate is accumulated as
    ``-d_z log r + sum_j (log r - log_s)`` so that rounding can never report a
    value below the floor.
    """
    log_s = dc.as_node(log_s)
    if np.any(log_s.value > 0):
        raise ValueError("log_s > 0 means s >= 1; the echo series would not converge")
    if r is None:
        pointwise = dc.neg(dc.sum(log_s, axis=1))
    else:
        d_z = log_s.shape[1]
        log_r = np.asarray(np.log(np.float64(r)), dtype=log_s.dtype)
        excess = dc.sum(dc.add(dc.constant(log_r), dc.neg(log_s)), axis=1)
        floor = np.asarray(rate_floor(d_z, r), dtype=log_s.dtype)
        pointwise = dc.add(dc.constant(floor), excess)
    return dc.mean(pointwise), pointwise


def echo_channel(f, log_s, cfg: EchoConfig, seed) -> ChannelDraw:
    eps = sample_echo_batch(f, log_s, cfg, seed)
    z = apply_channel(f, log_s, eps)
    rate, pointwise = echo_rate(log_s, cfg.r)
    return ChannelDraw(z=z, epsilon=eps, pointwise_rate=pointwise, rate=rate)
