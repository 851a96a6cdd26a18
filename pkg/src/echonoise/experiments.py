"""Training loop, beta sweeps over the rate-distortion plane, and model diagnostics."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datasets import Dataset
from .echo import rate_floor, sample_echo_iid
from .estimators import anderson_darling, gaussian_tc
from .models import AutoencoderSpec, Checkpoint, encode, init_params, objective

log = logging.getLogger(__name__)

DEFAULT_BETAS = [.05, .075, .1, .125, .15, .2, .25, .3, .4, .5, .6, .7, .8, .9, 1, 1.5, 2, 3, 4, 6]
RD_COLUMNS = ["channel", "beta", "seed", "rate_nats", "distortion_nats", "neg_elbo_nats", "status"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint, records):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.records = records


@dataclass
class TrainRecord:
    epoch: int
    step: int
    loss: float
    rate: float
    distortion: float
    lr: float


@dataclass
class RDPoint:
    beta: float
    rate: float
    distortion: float
    neg_elbo: float
    seed: int
    channel: str
    status: str = "ok"

    @classmethod
    def measured(cls, beta, rate, distortion, seed, channel):
        rate, distortion = float(rate), float(distortion)
        return cls(float(beta), rate, distortion, rate + distortion, int(seed), channel)

    @classmethod
    def failed(cls, beta, seed, channel):
        nan = float("nan")
        return cls(float(beta), nan, nan, nan, int(seed), channel, "failed")


def lr_at(step: int, total_steps: int, lr: float, decay_start: float = 0.5) -> float:
    """Constant ``lr``, then linear decay towards zero over the final part of training."""
    start = int(total_steps * decay_start)
    if step < start:
        return lr
    return lr * (total_steps - step) / max(total_steps - start, 1)


def _check_batching(spec: AutoencoderSpec, batch_size: int) -> None:
    if batch_size < 2:
        raise ValueError("batch size must be at least 2")
    cfg = spec.echo_cfg
    if spec.channel == "echo" and not cfg.with_replacement and cfg.d_max != batch_size - 1:
        raise ValueError(f"sampling without replacement needs d_max = B - 1 = {batch_size - 1}, got {cfg.d_max}")


def _snapshot(store):
    return {k: p.value.astype(np.float64) for k, p in store.params.items()}


def train(spec: AutoencoderSpec, dataset: Dataset, beta: float, epochs: int = 50, batch_size: int = 100,
          lr: float = 3e-3, seed: int = 0, decay_start: float = 0.5, dtype=np.float32):
    """Fit an autoencoder with Adam; returns ``(Checkpoint, [TrainRecord per epoch])``.

    Deterministic in ``seed``. The final partial batch of each epoch is
    dropped so every echo sequence spans ``B - 1`` rows.
    """
    _check_batching(spec, batch_size)
    if dataset.dim != spec.d_x:
        raise ValueError(f"dataset has {dataset.dim} features, model expects {spec.d_x}")
    data = dataset.train.astype(dtype)
    n_batches = data.shape[0] // batch_size
    if n_batches == 0:
        raise ValueError(f"training split ({data.shape[0]} rows) is smaller than one batch ({batch_size})")
    rng = np.random.default_rng(seed)
    store = init_params(spec, rng.integers(2 ** 63), dtype=dtype)
    total = epochs * n_batches
    records = []
    good = _snapshot(store)
    for epoch in range(epochs):
        order = rng.permutation(data.shape[0])
        sums = np.zeros(3)
        for b in range(n_batches):
            batch = data[order[b * batch_size:(b + 1) * batch_size]]
            step_lr = lr_at(store.step, total, lr, decay_start)
            try:
                obj = objective(batch, store, spec, beta, rng.integers(2 ** 63))
                loss = float(obj.loss.value)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss {loss}")
            except FloatingPointError as err:
                ckpt = Checkpoint(spec, good, store.step, seed)
                raise TrainingDiverged(f"epoch {epoch} step {store.step}: {err}", ckpt, records) from err
            good = _snapshot(store)
            grads = dc.forward_backward(obj.loss, store.params)
            dc.adam_step(store, grads, step_lr)
            sums += (loss, float(obj.rate.value), float(obj.distortion.value))
        mean = sums / n_batches
        records.append(TrainRecord(epoch, store.step, float(mean[0]), float(mean[1]), float(mean[2]), step_lr))
        log.debug("epoch %d loss %.4f rate %.4f distortion %.4f", epoch, *mean)
    return Checkpoint(spec, _snapshot(store), store.step, seed), records


def evaluate(checkpoint: Checkpoint, data: np.ndarray, beta: float = 1.0, seed: int = 0,
             batch_size: int | None = None) -> dict:
    """Rate, distortion and per-example terms on ``data`` in float64.

    Echo checkpoints are evaluated in batches of ``d_max + 1`` so that the
    in-batch noise keeps the training-time structure; trailing rows that do not
    fill a batch are skipped.
    """
    spec = checkpoint.spec
    if batch_size is None:
        batch_size = spec.echo_cfg.d_max + 1 if spec.channel == "echo" else 100
    store = checkpoint.store(np.float64)
    rng = np.random.default_rng(seed)
    n = (data.shape[0] // batch_size) * batch_size
    if n == 0:
        raise ValueError(f"need at least {batch_size} rows to evaluate")
    pw_rate, pw_dist, f_norm, log_s = [], [], [], []
    for start in range(0, n, batch_size):
        obj = objective(data[start:start + batch_size].astype(np.float64), store, spec, beta, rng.integers(2 ** 63))
        pw_rate.append(obj.pointwise_rate.value)
        pw_dist.append(obj.pointwise_distortion.value)
        loc = obj.encoded.f if spec.channel == "echo" else obj.encoded.mu
        f_norm.append(np.linalg.norm(loc.value, axis=1))
        if spec.channel == "echo":
            log_s.append(obj.encoded.log_s.value)
    out = {
        "pointwise_rate": np.concatenate(pw_rate),
        "pointwise_distortion": np.concatenate(pw_dist),
        "f_norm": np.concatenate(f_norm),
        "log_s": np.vstack(log_s) if log_s else None,
    }
    out["rate"] = float(out["pointwise_rate"].mean())
    out["distortion"] = float(out["pointwise_distortion"].mean())
    out["neg_elbo"] = out["rate"] + out["distortion"]
    return out


# -- sweeps ------------------------------------------------------------------

def _run_cell(args):
    spec, dataset, beta, seed, epochs, batch_size, lr, ckpt_dir = args
    try:
        ckpt, _ = train(spec, dataset, beta, epochs, batch_size, lr, seed)
    except TrainingDiverged as err:
        log.warning("cell beta=%s seed=%s failed: %s", beta, seed, err)
        return RDPoint.failed(beta, seed, spec.channel)
    if ckpt_dir is not None:
        ckpt.save(Path(ckpt_dir) / checkpoint_name(spec.channel, beta, seed))
    ev = evaluate(ckpt, dataset.test, beta, seed)
    return RDPoint.measured(beta, ev["rate"], ev["distortion"], seed, spec.channel)


def checkpoint_name(channel: str, beta: float, seed: int) -> str:
    return f"{channel}_beta{beta:g}_seed{seed}.ckpt"


def default_workers() -> int:
    cap = os.environ.get("ECHO_RD_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(cap))) if cap else 1


def rd_sweep(spec: AutoencoderSpec, dataset: Dataset, betas=None, seeds=(0,), epochs: int = 50,
             batch_size: int = 100, lr: float = 3e-3, out_dir=None, workers: int | None = None) -> list[RDPoint]:
    """Train one model per ``(beta, seed)`` and measure it on the test split.

    With ``out_dir`` set, ``rd.csv`` and one checkpoint per cell are written
    there. A cell whose training diverges is kept with ``status = failed``.
    """
    betas = list(DEFAULT_BETAS if betas is None else betas)
    if not betas:
        raise ValueError("betas must be non-empty")
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    cells = [(spec, dataset, b, s, epochs, batch_size, lr, ckpt_dir) for b in betas for s in seeds]
    workers = default_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_run_cell, cells))
    else:
        points = [_run_cell(c) for c in cells]
    points = sort_points(points)
    if out_dir is not None:
        write_rd_csv(Path(out_dir) / "rd.csv", points)
    return points


def sort_points(points):
    return sorted(points, key=lambda p: (p.channel, p.beta, p.seed))


def write_rd_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RD_COLUMNS)
        for p in sort_points(points):
            writer.writerow([p.channel, repr(p.beta), p.seed, repr(p.rate), repr(p.distortion),
                             repr(p.neg_elbo), p.status])


def read_rd_csv(path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RD_COLUMNS:
            raise ValueError(f"unexpected RD columns {reader.fieldnames}")
        return [RDPoint(float(r["beta"]), float(r["rate_nats"]), float(r["distortion_nats"]),
                        float(r["neg_elbo_nats"]), int(r["seed"]), r["channel"], r["status"]) for r in reader]


def rd_curve(points, channel: str | None = None) -> list[dict]:
    """Seed-averaged curve, one entry per beta, ordered by increasing mean rate."""
    groups = {}
    for p in points:
        if p.status != "ok" or (channel is not None and p.channel != channel):
            continue
        groups.setdefault(p.beta, []).append(p)
    curve = []
    for beta, ps in groups.items():
        rates = np.array([p.rate for p in ps])
        dists = np.array([p.distortion for p in ps])
        curve.append({"beta": beta, "rate": float(rates.mean()), "distortion": float(dists.mean()),
                      "rate_std": float(rates.std()), "distortion_std": float(dists.std()), "n": len(ps)})
    return sorted(curve, key=lambda c: c["rate"])


def rd_violations(curve, slack: float = 0.5) -> list[tuple[dict, dict]]:
    """Adjacent pairs where distortion rises with rate by more than ``slack``."""
    return [(a, b) for a, b in zip(curve[:-1], curve[1:]) if b["distortion"] > a["distortion"] + slack]


# -- diagnostics -------------------------------------------------------------

def diagnose(checkpoint: Checkpoint, dataset: Dataset, n_samples: int = 2000, seed: int = 0,
             n_null_sims: int = 1000) -> dict:
    """Marginal, total-correlation and pointwise-rate diagnostics as a JSON-ready dict.

    Marginal samples of ``z`` are echo-noise draws with the empirical training
    distribution as source, since the noise and the channel output share one
    distribution.
    """
    spec = checkpoint.spec
    if dataset.dim != spec.d_x:
        raise ValueError(f"checkpoint expects {spec.d_x} features, dataset has {dataset.dim}")
    store = checkpoint.store(np.float64)
    train = dataset.train.astype(np.float64)
    rng = np.random.default_rng(seed)

    def source(g, n):
        return train[g.integers(0, train.shape[0], size=n)]

    if spec.channel == "echo":
        def enc(x):
            out = encode(x, store, spec)
            return out.f.value, out.log_s.value
        samples = sample_echo_iid(source, enc, spec.echo_cfg, n_samples, rng.integers(2 ** 63))
    else:
        out = encode(source(rng, n_samples), store, spec)
        samples = out.mu.value + np.exp(out.log_sigma.value) * rng.standard_normal(out.mu.shape)

    ev = evaluate(checkpoint, dataset.test if dataset.test.shape[0] else train, seed=seed)
    per_dim_rate = (-ev["log_s"].mean(axis=0)).tolist() if ev["log_s"] is not None else None
    marginals = []
    for j in range(spec.d_z):
        col = samples[:, j]
        entry = {"dim": j, "mean": float(col.mean()), "var": float(col.var())}
        if col.std() > 0:
            ad = anderson_darling(col, n_null_sims, seed)
            entry.update(ad_statistic=ad.statistic, ad_p_value=ad.p_value)
        if per_dim_rate is not None:
            entry["rate"] = per_dim_rate[j]
        marginals.append(entry)

    order = np.argsort(ev["pointwise_distortion"], kind="stable")
    pointwise = [{"index": int(i), "distortion": float(ev["pointwise_distortion"][i]),
                  "rate": float(ev["pointwise_rate"][i]), "f_norm": float(ev["f_norm"][i])} for i in order]

    tc = {"n_samples": int(n_samples)}
    if spec.d_z > 1:
        tc["standard"] = gaussian_tc(samples)
        tc["paper_convention"] = gaussian_tc(samples, paper_convention=True)
    else:
        tc["standard"] = tc["paper_convention"] = 0.0

    config = {"spec": spec.to_dict(), "step": checkpoint.step, "seed": checkpoint.seed}
    if spec.channel == "echo":
        config["rate_floor"] = rate_floor(spec.d_z, spec.echo_cfg.r)
    return {"marginals": marginals, "tc": tc, "pointwise": pointwise, "config": config,
            "summary": {"rate": ev["rate"], "distortion": ev["distortion"], "neg_elbo": ev["neg_elbo"]}}
