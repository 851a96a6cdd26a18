"""Dense encoder/decoder networks, distortions, the rate-distortion objective and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .channels import GaussianOutput, gaussian_kl_rate, gaussian_sample
from .diffcore import Node, ParameterStore
from .echo import EchoConfig, EncoderOutput, apply_channel, echo_rate, sample_echo_batch

CHANNELS = ("echo", "gaussian")
DISTORTIONS = ("bernoulli", "gaussian")
TANH_STRETCH = 16.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class AutoencoderSpec:
    d_x: int
    d_z: int
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    channel: str = "echo"
    distortion: str = "bernoulli"
    echo_cfg: EchoConfig | None = None
    obs_sigma: float = 0.25

    def __post_init__(self):
        if self.d_z < 1 or self.d_x < 1:
            raise ValueError("d_x and d_z must be >= 1")
        if not self.hidden:
            raise ValueError("hidden must list at least one layer width")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")
        if self.distortion not in DISTORTIONS:
            raise ValueError(f"distortion must be one of {DISTORTIONS}")
        self.hidden = [int(h) for h in self.hidden]
        if isinstance(self.echo_cfg, dict):
            self.echo_cfg = EchoConfig.from_dict(self.echo_cfg)
        if self.channel == "echo" and self.echo_cfg is None:
            self.echo_cfg = EchoConfig()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["echo_cfg"] = self.echo_cfg.to_dict() if self.echo_cfg is not None else None
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AutoencoderSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown AutoencoderSpec fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Objective:
    beta: float
    rate: Node
    distortion: Node
    loss: Node
    pointwise_rate: Node
    pointwise_distortion: Node
    encoded: EncoderOutput | GaussianOutput
    z: Node

    @property
    def neg_elbo(self) -> float:
        return float(self.rate.value) + float(self.distortion.value)


# -- parameters --------------------------------------------------------------

def _dense(rng, fan_in, fan_out, scale=1.0):
    w = rng.standard_normal((fan_in, fan_out)) * (scale / math.sqrt(fan_in))
    return w, np.zeros((1, fan_out))


def init_params(spec: AutoencoderSpec, seed, dtype=np.float32) -> ParameterStore:
    rng = np.random.default_rng(seed)
    raw = {}
    widths = [spec.d_x] + spec.hidden
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        raw[f"enc.{i}.W"], raw[f"enc.{i}.b"] = _dense(rng, a, b)
    # f = M tanh(pre / 16): start pre at the same scale as tanh's linear range
    loc_scale = TANH_STRETCH if spec.channel == "echo" else 1.0
    raw["enc.loc.W"], raw["enc.loc.b"] = _dense(rng, widths[-1], spec.d_z, loc_scale)
    raw["enc.scale.W"], raw["enc.scale.b"] = _dense(rng, widths[-1], spec.d_z)
    widths = [spec.d_z] + spec.hidden[::-1]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        raw[f"dec.{i}.W"], raw[f"dec.{i}.b"] = _dense(rng, a, b)
    raw["dec.out.W"], raw["dec.out.b"] = _dense(rng, widths[-1], spec.d_x)
    return ParameterStore({k: dc.parameter(v, name=k, dtype=dtype) for k, v in raw.items()})


def _params(params):
    return params.params if isinstance(params, ParameterStore) else params


def _check_finite(node, where):
    if not np.all(np.isfinite(node.value)):
        raise FloatingPointError(f"non-finite activations at {where}")
    return node


def _affine(h, p, prefix):
    return dc.add(dc.matmul(h, p[prefix + ".W"]), p[prefix + ".b"])


# -- networks ----------------------------------------------------------------

def encode(x, params, spec: AutoencoderSpec):
    """Encoder statistics: ``EncoderOutput`` for echo, ``GaussianOutput`` for gaussian.

    Echo heads are ``f = M tanh(pre_f / 16)`` and
    ``log_s = log r + log_sigmoid(pre_s)``, so the channel bounds hold by
    construction.
    """
    p = _params(params)
    h = dc.as_node(x, like=p["enc.0.W"])
    _check_finite(h, "encoder input")
    for i in range(len(spec.hidden)):
        h = _check_finite(dc.tanh(_affine(h, p, f"enc.{i}")), f"encoder layer {i}")
    pre_loc = _check_finite(_affine(h, p, "enc.loc"), f"encoder layer {len(spec.hidden)} (location head)")
    pre_scale = _check_finite(_affine(h, p, "enc.scale"), f"encoder layer {len(spec.hidden)} (scale head)")
    if spec.channel == "gaussian":
        return GaussianOutput(mu=pre_loc, log_sigma=pre_scale)
    cfg = spec.echo_cfg
    f = dc.mul(dc.tanh(dc.mul(pre_loc, 1.0 / TANH_STRETCH)), cfg.M)
    log_s = dc.add(dc.log_sigmoid(pre_scale), cfg.log_r)
    return EncoderOutput(f=f, log_s=log_s)


def decode(z, params, spec: AutoencoderSpec) -> Node:
    """Bernoulli logits or Gaussian means of ``p(x | z)``; the output layer is linear."""
    p = _params(params)
    h = _check_finite(dc.as_node(z, like=p["dec.0.W"]), "decoder input")
    for i in range(len(spec.hidden)):
        h = _check_finite(dc.tanh(_affine(h, p, f"dec.{i}")), f"decoder layer {i}")
    return _check_finite(_affine(h, p, "dec.out"), f"decoder layer {len(spec.hidden)} (output)")


# -- distortions -------------------------------------------------------------

def bernoulli_distortion(x, logits) -> tuple[Node, Node]:
    """Cross-entropy ``-log p(x | logits)`` summed over pixels, in nats."""
    logits = dc.as_node(logits)
    xv = np.asarray(x.value if isinstance(x, Node) else x, dtype=logits.dtype)
    if np.any(np.minimum(np.abs(xv), np.abs(xv - 1.0)) > 1e-6):
        raise ValueError("bernoulli distortion needs binary targets in {0, 1}")
    per_pixel = dc.add(dc.softplus(logits), dc.neg(dc.mul(logits, xv)))
    pointwise = dc.sum(per_pixel, axis=1)
    return dc.mean(pointwise), pointwise


def gaussian_distortion(x, mean, sigma: float) -> tuple[Node, Node]:
    """``-log N(x; mean, sigma^2 I)`` summed over coordinates, in nats."""
    mean = dc.as_node(mean)
    xv = np.asarray(x.value if isinstance(x, Node) else x, dtype=mean.dtype)
    diff = dc.add(mean, -xv)
    sq = dc.mul(dc.mul(diff, diff), 0.5 / sigma ** 2)
    pointwise = dc.add(dc.sum(sq, axis=1), xv.shape[1] * (math.log(sigma) + HALF_LOG_2PI))
    return dc.mean(pointwise), pointwise


def distortion(x, decoded, spec: AutoencoderSpec):
    if spec.distortion == "bernoulli":
        return bernoulli_distortion(x, decoded)
    return gaussian_distortion(x, decoded, spec.obs_sigma)


# -- objective ---------------------------------------------------------------

def objective(batch, params, spec: AutoencoderSpec, beta: float, seed) -> Objective:
    """``loss = distortion + beta * rate`` on one batch; differentiable end to end.

    Echo uses its exact rate; the Gaussian channel reports the KL-to-prior
    upper bound. At ``beta = 1`` the loss is the negative of the ELBO that
    uses the true encoding marginal as prior.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    batch = np.asarray(batch)
    enc = encode(batch, params, spec)
    if spec.channel == "echo":
        if batch.shape[0] < 2:
            raise ValueError("the echo channel needs a batch of at least two examples")
        eps = sample_echo_batch(enc.f, enc.log_s, spec.echo_cfg, seed)
        z = apply_channel(enc.f, enc.log_s, eps)
        rate, pw_rate = echo_rate(enc.log_s, spec.echo_cfg.r)
    else:
        z = gaussian_sample(enc.mu, enc.log_sigma, seed)
        rate, pw_rate = gaussian_kl_rate(enc.mu, enc.log_sigma)
    dist, pw_dist = distortion(batch, decode(z, params, spec), spec)
    loss = dc.add(dist, dc.mul(rate, float(beta))) if beta else dist
    return Objective(beta=float(beta), rate=rate, distortion=dist, loss=loss,
                     pointwise_rate=pw_rate, pointwise_distortion=pw_dist, encoded=enc, z=z)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: AutoencoderSpec
    params: dict[str, np.ndarray]
    step: int
    seed: int

    def store(self, dtype=np.float64) -> ParameterStore:
        return ParameterStore({k: dc.parameter(v, name=k, dtype=dtype) for k, v in self.params.items()})

    def to_bytes(self) -> bytes:
        names = sorted(self.params)
        header = {
            "spec": self.spec.to_dict(),
            "step": int(self.step),
            "seed": int(self.seed),
            "params": [[n, list(np.shape(self.params[n]))] for n in names],
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        blob = b"".join(np.asarray(self.params[n], dtype="<f8").tobytes() for n in names)
        return struct.pack("<Q", len(head)) + head + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        (n_head,) = struct.unpack_from("<Q", data, 0)
        header = json.loads(data[8:8 + n_head].decode("utf-8"))
        offset = 8 + n_head
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(data):
                raise ValueError(f"checkpoint truncated at byte {offset} while reading {name!r}")
            params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset = end
        if offset != len(data):
            raise ValueError(f"{len(data) - offset} trailing bytes after parameter blob")
        return cls(AutoencoderSpec.from_dict(header["spec"]), params, header["step"], header["seed"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
