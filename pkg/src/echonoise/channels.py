"""Gaussian reparameterized channel with its KL-to-standard-normal rate bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node


@dataclass
class GaussianOutput:
    mu: Node
    log_sigma: Node


def gaussian_sample(mu, log_sigma, seed) -> Node:
    """``z = mu + exp(log_sigma) * eta`` with ``eta ~ N(0, I)`` drawn from ``seed``."""
    mu, log_sigma = dc.as_node(mu), dc.as_node(log_sigma)
    if mu.shape != log_sigma.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, log_sigma {log_sigma.shape}")
    eta = np.random.default_rng(seed).standard_normal(mu.shape).astype(mu.dtype)
    return dc.add(mu, dc.mul(dc.exp(log_sigma), eta))


def gaussian_kl_rate(mu, log_sigma) -> tuple[Node, Node]:
    """KL[N(mu, sigma^2) || N(0, I)] per example and its batch mean, in nats.

    This upper-bounds the mutual information through the channel; the gap is
    the KL from the aggregate posterior to the prior.
    """
    mu, log_sigma = dc.as_node(mu), dc.as_node(log_sigma)
    if mu.shape != log_sigma.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, log_sigma {log_sigma.shape}")
    var = dc.exp(dc.mul(log_sigma, 2.0))
    inner = dc.add(dc.add(dc.mul(mu, mu), var), dc.add(dc.mul(log_sigma, -2.0), -1.0))
    pointwise = dc.mul(dc.sum(inner, axis=1), 0.5)
    return dc.mean(pointwise), pointwise
