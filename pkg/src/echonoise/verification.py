"""Self-contained checks of the channel's claims, runnable from the CLI.

Each suite returns a list of :class:`Check`; a suite passes when all of its
checks do.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .datasets import sample_mixture2d
from .echo import EchoConfig, remainder_bound, sample_echo_iid, solve_clip
from .estimators import energy_distance_test, gaussian_tc, kl_entropy, ksg_mi
from .models import AutoencoderSpec, init_params, objective

GOLDEN_R = 0.8359


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.6g} ({self.threshold})"

    def to_dict(self):
        return asdict(self)


def clip_suite(seed: int = 0) -> list[Check]:
    r = solve_clip(1.0, 99, 2.0 ** -23)
    r200 = solve_clip(1.0, 200, 2.0 ** -23)
    return [
        Check("clip factor M=1 d_max=99 tol=2^-23", abs(r - GOLDEN_R) <= 1e-4, r, "0.8359 +- 1e-4"),
        Check("clip factor increases with d_max", r200 > r, r200 - r, "> 0"),
    ]


def random_echo_encoder(rng: np.random.Generator, cfg: EchoConfig, d_x: int = 3, d_z: int = 2):
    """Random bounded encoder; every fourth one is the worst case f = M, s = r."""
    if rng.random() < 0.25:
        def worst(x):
            shape = (x.shape[0], d_z)
            return np.full(shape, cfg.M), np.full(shape, cfg.log_r)
        return worst
    wf = rng.standard_normal((d_x, d_z)) * rng.uniform(0.5, 40.0)
    bf = rng.standard_normal(d_z) * 16.0
    ws = rng.standard_normal((d_x, d_z)) * rng.uniform(0.1, 5.0)
    bs = rng.standard_normal(d_z) * 4.0 + rng.uniform(0.0, 10.0)

    def enc(x):
        f = cfg.M * np.tanh((x @ wf + bf) / 16.0)
        pre = x @ ws + bs
        log_s = cfg.log_r - np.logaddexp(0.0, -pre)
        return f, log_s
    return enc


def truncation_excess(n_draws: int, seed: int = 0, d_max: int = 99, rows: int = 8) -> tuple[float, int]:
    """Largest ``|eps(d) - eps(2d)| / bound`` over random encoders, and the number above 1."""
    cfg = EchoConfig(d_max=d_max, M=1.0, tol=2.0 ** -23, mode="iid")
    deep = EchoConfig(d_max=2 * d_max, M=1.0, tol=2.0 ** -23, r=cfg.r, mode="iid")
    bound = remainder_bound(cfg.M, cfg.r, d_max)
    rng = np.random.default_rng(seed)
    worst, violations = 0.0, 0
    for _ in range(n_draws):
        enc = random_echo_encoder(rng, cfg)
        draw_seed = int(rng.integers(2 ** 63))
        source = lambda g, n: g.standard_normal((n, 3))
        short = sample_echo_iid(source, enc, cfg, rows, draw_seed)
        long = sample_echo_iid(source, enc, deep, rows, draw_seed)
        # float64 rounding of a sum of magnitude ~M/(1-r) is far below the bound
        rounding = 4 * 2 * d_max * np.finfo(np.float64).eps * float(np.max(np.abs(long)))
        gap = float(np.max(np.abs(short - long)))
        worst = max(worst, gap / bound)
        violations += gap > bound + rounding
    return worst, violations


def truncation_suite(seed: int = 0, n_draws: int = 200) -> list[Check]:
    worst, violations = truncation_excess(n_draws, seed)
    return [Check(f"truncation error within remainder bound over {n_draws} encoders", violations == 0,
                  worst, "max |eps(99)-eps(198)| / bound <= 1")]


def noise_output_pvalues(seed: int = 0, n: int = 2000, n_perm: int = 500, n_seeds: int = 20, s: float = 0.5):
    """Energy-test p-values comparing echo noise with the channel output it feeds."""
    cfg = EchoConfig(d_max=99, M=1.0, tol=2.0 ** -23, mode="iid")
    log_s = math.log(s)

    def ident(x):
        return x, np.full_like(x, log_s)

    pvals = []
    for k in range(n_seeds):
        root = np.random.SeedSequence([seed, k])
        s_eps, s_out, s_x, s_perm = (int(c.generate_state(1)[0]) for c in root.spawn(4))
        eps = sample_echo_iid(sample_mixture2d, ident, cfg, n, s_eps)
        x0 = sample_mixture2d(np.random.default_rng(s_x), n)
        z = x0 + s * sample_echo_iid(sample_mixture2d, ident, cfg, n, s_out)
        pvals.append(energy_distance_test(eps, z, n_perm, s_perm).p_value)
    return pvals


def noise_output_suite(seed: int = 0, n: int = 2000, n_perm: int = 500, n_seeds: int = 20) -> list[Check]:
    pvals = noise_output_pvalues(seed, n, n_perm, n_seeds)
    failures = sum(p <= 0.01 for p in pvals)
    return [Check(f"noise and channel output indistinguishable (n={n}, {n_seeds} seeds)",
                  failures <= max(1, n_seeds // 20), float(min(pvals)),
                  f"p > 0.01 in >= {n_seeds - max(1, n_seeds // 20)}/{n_seeds} seeds; {failures} failed")]


def ksg_rate_estimate(seed: int = 0, n: int = 100_000, k: int = 5) -> float:
    """KSG estimate of I(X; Z) for X ~ N(0, 1), f(x) = x, s = 0.5 (exact value ln 2)."""
    cfg = EchoConfig(d_max=99, M=8.0, tol=2.0 ** -23, mode="iid")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    eps = sample_echo_iid(lambda g, m: np.clip(g.standard_normal((m, 1)), -cfg.M, cfg.M),
                          lambda v: (v, np.full_like(v, math.log(0.5))), cfg, n, int(rng.integers(2 ** 63)))
    return ksg_mi(x, x + 0.5 * eps, k)


def ksg_rate_suite(seed: int = 0, n: int = 100_000) -> list[Check]:
    est = ksg_rate_estimate(seed, n)
    return [Check(f"KSG rate matches exact ln 2 (n={n})", abs(est - math.log(2)) <= 0.1, est, "ln 2 +- 0.10")]


def entropy_suite(seed: int = 0, n: int = 100_000) -> list[Check]:
    x = np.random.default_rng(seed).standard_normal((n, 1))
    h = kl_entropy(x, 5)
    scale = kl_entropy(0.5 * x, 5) - h - math.log(0.5)
    shift = kl_entropy(x + 3.0, 5) - h
    return [
        Check("entropy of N(0,1)", abs(h - 0.5 * math.log(2 * math.pi * math.e)) <= 0.02, h, "1.4189 +- 0.02"),
        Check("entropy scaling H(0.5X) - H(X) = ln 0.5", abs(scale) <= 0.02, scale, "|err| <= 0.02"),
        Check("entropy translation H(X+b) = H(X)", abs(shift) <= 0.02, shift, "|err| <= 0.02"),
    ]


def tc_suite(seed: int = 0, n: int = 100_000) -> list[Check]:
    rng = np.random.default_rng(seed)
    diag = gaussian_tc(rng.standard_normal((n, 8)) * rng.uniform(0.5, 2.0, 8))
    corr = gaussian_tc(rng.multivariate_normal([0, 0], [[1, 0.5], [0.5, 1]], size=n))
    exact = -0.5 * math.log(0.75)
    return [
        Check("TC of diagonal 8-D Gaussian", abs(diag) <= 0.01, diag, "|TC| <= 0.01"),
        Check("TC of 2-D Gaussian with rho=0.5", abs(corr - exact) <= 0.01, corr, f"{exact:.4f} +- 0.01"),
    ]


def echo_grad_setup(seed: int = 0, batch: int = 8, d_z: int = 2, detach: bool = False):
    cfg = EchoConfig.for_batch(batch, tol=2.0 ** -23, detach_noise_gradients=detach)
    spec = AutoencoderSpec(d_x=3, d_z=d_z, hidden=[6], distortion="gaussian", echo_cfg=cfg)
    rng = np.random.default_rng(seed)
    params = {k: p.value for k, p in init_params(spec, seed, np.float64).params.items()}
    x = rng.uniform(-1, 1, size=(batch, 3))
    noise_seed = int(rng.integers(2 ** 31))
    return spec, params, (lambda P: objective(x, P, spec, 1.0, noise_seed).loss)


def gradient_suite(seed: int = 0) -> list[Check]:
    spec, params, fn = echo_grad_setup(seed)
    report = dc.grad_check(fn, params, h=1e-5, tol=1e-4)
    _, _, fn_detached = echo_grad_setup(seed, detach=True)

    def grads(f):
        nodes = {k: dc.parameter(v, name=k) for k, v in params.items()}
        return dc.forward_backward(f(nodes), nodes)

    live, cut = grads(fn), grads(fn_detached)
    diff = max(float(np.max(np.abs(live[k] - cut[k]))) for k in live if k.startswith("enc."))
    return [
        Check("echo objective gradient vs finite differences", report.passed, report.max_rel_err, "rel err <= 1e-4"),
        Check("noise-path gradients reach the encoder", diff > 0, diff, "max |grad - grad_detached| > 0"),
    ]


SUITES = {
    "clip": clip_suite,
    "truncation": truncation_suite,
    "lemma1": noise_output_suite,
    "ksg-rate": ksg_rate_suite,
    "entropy": entropy_suite,
    "tc": tc_suite,
    "gradients": gradient_suite,
}


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name == "all":
        return [c for suite in SUITES.values() for c in suite(seed=seed)]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    return SUITES[name](seed=seed)
