import math

import numpy as np
import pytest
from scipy.special import logsumexp

from echonoise import diffcore as dc
from echonoise.channels import GaussianOutput
from echonoise.datasets import make_mixture2d, sample_mixture2d
from echonoise.echo import EchoConfig, EncoderOutput, rate_floor, solve_clip
from echonoise.experiments import evaluate, train
from echonoise.models import (
    AutoencoderSpec, Checkpoint, bernoulli_distortion, decode, encode, gaussian_distortion, init_params,
    objective,
)


def small_spec(**kw):
    kw.setdefault("hidden", [8])
    return AutoencoderSpec(d_x=4, d_z=2, **kw)


def zero_heads(store):
    for k in ("enc.loc.W", "enc.loc.b", "enc.scale.W", "enc.scale.b"):
        store.params[k].value[...] = 0.0
    return store


# -- spec -------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        AutoencoderSpec(d_x=3, d_z=0)
    with pytest.raises(ValueError):
        AutoencoderSpec(d_x=3, d_z=2, hidden=[])
    with pytest.raises(ValueError):
        AutoencoderSpec(d_x=3, d_z=2, channel="laplace")


def test_spec_dict_round_trip():
    spec = small_spec(echo_cfg=EchoConfig(d_max=9, tol=1e-4), distortion="gaussian")
    again = AutoencoderSpec.from_dict(spec.to_dict())
    assert again == spec
    with pytest.raises(ValueError, match="unknown"):
        AutoencoderSpec.from_dict({**spec.to_dict(), "depth": 3})


# -- encoder ----------------------------------------------------------------

def test_zero_preactivation_gives_zero_location_and_half_clip():
    spec = small_spec()
    enc = encode(np.random.default_rng(0).standard_normal((5, 4)), zero_heads(init_params(spec, 0, np.float64)), spec)
    assert isinstance(enc, EncoderOutput)
    np.testing.assert_array_equal(enc.f.value, 0.0)
    np.testing.assert_allclose(enc.log_s.value, math.log(spec.echo_cfg.r) - math.log(2), rtol=1e-14)


def test_per_dimension_rate_at_zero_preactivation():
    r = solve_clip(1.0, 99, 2.0 ** -23)
    assert -math.log(r / 2) == pytest.approx(0.8724, abs=1e-4)
    assert math.log(2) - math.log(0.8359) == pytest.approx(0.8724, abs=1e-4)


def test_location_saturates_at_bound():
    spec = small_spec(echo_cfg=EchoConfig(M=2.5))
    store = zero_heads(init_params(spec, 0, np.float64))
    store.params["enc.loc.b"].value[...] = 1e6
    store.params["enc.scale.b"].value[...] = 1e6
    enc = encode(np.zeros((3, 4)), store, spec)
    np.testing.assert_array_equal(enc.f.value, 2.5)
    assert np.all(np.exp(enc.log_s.value) <= spec.echo_cfg.r)


def test_encoder_bounds_hold_for_extreme_inputs():
    spec = small_spec()
    store = init_params(spec, 1, np.float64)
    for k in store.params:
        store.params[k].value[...] *= 50
    enc = encode(np.random.default_rng(2).standard_normal((64, 4)) * 100, store, spec)
    assert np.all(np.abs(enc.f.value) <= spec.echo_cfg.M)
    assert np.all(enc.log_s.value <= spec.echo_cfg.log_r + 1e-12)


def test_gaussian_encoder_output():
    spec = small_spec(channel="gaussian")
    enc = encode(np.zeros((3, 4)), init_params(spec, 0), spec)
    assert isinstance(enc, GaussianOutput)
    assert enc.mu.shape == enc.log_sigma.shape == (3, 2)


def test_non_finite_input_names_layer():
    spec = small_spec()
    store = init_params(spec, 0, np.float64)
    with pytest.raises(FloatingPointError, match="encoder input"):
        encode(np.full((2, 4), np.nan), store, spec)
    store.params["enc.0.b"].value[...] = np.nan
    with pytest.raises(FloatingPointError, match="layer 0"):
        encode(np.zeros((2, 4)), store, spec)


# -- decoder ----------------------------------------------------------------

def test_zero_decoder_weights_give_bias_logits():
    spec = small_spec()
    store = init_params(spec, 0, np.float64)
    store.params["dec.out.W"].value[...] = 0.0
    store.params["dec.out.b"].value[...] = np.arange(4.0)
    out = decode(np.random.default_rng(0).standard_normal((6, 2)), store, spec)
    assert out.shape == (6, 4)
    np.testing.assert_array_equal(out.value, np.tile(np.arange(4.0), (6, 1)))


def test_decoder_overfits_one_point():
    spec = AutoencoderSpec(d_x=20, d_z=2, hidden=[16])
    store = init_params(spec, 0, np.float64)
    dec_params = {k: v for k, v in store.params.items() if k.startswith("dec.")}
    sub = dc.ParameterStore(dec_params)
    x = (np.random.default_rng(1).random((1, 20)) > 0.5).astype(np.float64)
    z = np.array([[0.3, -0.2]])
    for _ in range(2000):
        loss, _ = bernoulli_distortion(x, decode(z, sub.params, spec))
        dc.adam_step(sub, dc.forward_backward(loss, sub.params), lr=1e-2)
    loss, _ = bernoulli_distortion(x, decode(z, sub.params, spec))
    assert float(loss.value) / 20 <= 0.01


# -- distortions ------------------------------------------------------------

def test_bernoulli_uninformative_logits():
    x = (np.random.default_rng(0).random((3, 7)) > 0.5).astype(float)
    mean, pointwise = bernoulli_distortion(x, np.zeros((3, 7)))
    np.testing.assert_allclose(pointwise.value, 7 * math.log(2), rtol=1e-15)


def test_bernoulli_saturated_correct():
    mean, _ = bernoulli_distortion(np.ones((1, 1)), np.full((1, 1), 20.0))
    assert float(mean.value) == pytest.approx(2.06e-9, rel=0.01)


def test_bernoulli_matches_direct_likelihood():
    rng = np.random.default_rng(3)
    x = (rng.random((50, 9)) > 0.4).astype(float)
    logits = rng.standard_normal((50, 9)) * 4
    p = 1 / (1 + np.exp(-logits))
    direct = -(x * np.log(p) + (1 - x) * np.log1p(-p)).sum(1)
    _, pointwise = bernoulli_distortion(x, logits)
    np.testing.assert_allclose(pointwise.value, direct, rtol=1e-6)


def test_bernoulli_rejects_grey_targets():
    with pytest.raises(ValueError, match="binary"):
        bernoulli_distortion(np.array([[0.0, 0.5]]), np.zeros((1, 2)))


def test_gaussian_distortion_is_negative_log_density():
    from scipy.stats import norm
    rng = np.random.default_rng(4)
    x, m = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    _, pointwise = gaussian_distortion(x, m, 0.3)
    np.testing.assert_allclose(pointwise.value, -norm.logpdf(x, m, 0.3).sum(1), rtol=1e-12)


# -- objective --------------------------------------------------------------

def batch_and_store(channel="echo", B=10, seed=0):
    cfg = EchoConfig.for_batch(B, tol=1e-3) if channel == "echo" else None
    spec = small_spec(channel=channel, echo_cfg=cfg)
    x = (np.random.default_rng(seed).random((B, 4)) > 0.5).astype(np.float64)
    return spec, x, init_params(spec, seed, np.float64)


@pytest.mark.parametrize("channel", ["echo", "gaussian"])
def test_loss_composition(channel):
    spec, x, store = batch_and_store(channel)
    o0 = objective(x, store, spec, 0.0, seed=5)
    assert float(o0.loss.value) == float(o0.distortion.value)
    o1 = objective(x, store, spec, 1.0, seed=5)
    assert float(o1.loss.value) == pytest.approx(o1.neg_elbo, rel=1e-15)
    assert o1.neg_elbo == float(o1.rate.value) + float(o1.distortion.value)


@pytest.mark.parametrize("channel", ["echo", "gaussian"])
def test_loss_monotone_in_beta(channel):
    spec, x, store = batch_and_store(channel)
    losses = [float(objective(x, store, spec, b, seed=2).loss.value) for b in (0, 0.1, 0.5, 1, 3, 10)]
    assert all(a <= b for a, b in zip(losses, losses[1:]))


def test_objective_rejects_single_row_and_negative_beta():
    spec, x, store = batch_and_store()
    with pytest.raises(ValueError, match="two"):
        objective(x[:1], store, spec, 1.0, 0)
    with pytest.raises(ValueError):
        objective(x, store, spec, -1.0, 0)


def test_objective_gradients_match_finite_differences():
    spec, x, store = batch_and_store(B=6)
    params = {k: v.value.copy() for k, v in store.params.items()}
    report = dc.grad_check(lambda P: objective(x, P, spec, 1.0, 11).loss, params, h=1e-5, tol=1e-4)
    assert report.passed, report.worst


def test_linear_autoencoder_gradients():
    x = np.array([[1.0], [-0.5], [2.0], [0.3]])

    def loss(P):
        recon = dc.mul(dc.mul(x, P["a"]), P["b"])
        diff = dc.add(recon, -x)
        return dc.sum(dc.mul(diff, diff))

    report = dc.grad_check(loss, {"a": np.array(0.7), "b": np.array(-1.3)}, h=1e-5, tol=1e-4)
    assert report.passed


def test_elbo_bounds_marginal_likelihood():
    # a briefly trained model; log p(x) = log E_{z ~ q(z)} p(x|z) by Monte Carlo over echo marginal draws
    ds = make_mixture2d(1000, seed=0)
    spec = AutoencoderSpec(d_x=2, d_z=2, hidden=[32], distortion="gaussian")
    ckpt, _ = train(spec, ds, beta=1.0, epochs=10, seed=0)
    store = ckpt.store()
    rng = np.random.default_rng(1)
    z = np.concatenate([objective(sample_mixture2d(rng, 100), store, spec, 1.0, b).z.value for b in range(200)])
    means = decode(z, store, spec).value
    x = sample_mixture2d(rng, 500)
    sig = spec.obs_sigma
    ll = -0.5 * ((x[:, None, :] - means[None]) ** 2).sum(-1) / sig ** 2 - 2 * math.log(sig) - math.log(2 * math.pi)
    log_px = float(np.mean(logsumexp(ll, axis=1) - math.log(len(z))))
    assert log_px >= -objective(x, store, spec, 1.0, 0).neg_elbo


def test_large_beta_saturates_at_floor():
    ds = make_mixture2d(1000, seed=0)
    spec = AutoencoderSpec(d_x=2, d_z=2, hidden=[32], distortion="gaussian")
    ckpt, _ = train(spec, ds, beta=50.0, epochs=50, seed=0)
    ev = evaluate(ckpt, ds.test, beta=50.0)
    floor = rate_floor(2, spec.echo_cfg.r)
    assert floor <= ev["rate"] <= floor + 0.02
    assert np.exp(ev["log_s"]).mean() >= 0.98 * spec.echo_cfg.r


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    spec = small_spec(echo_cfg=EchoConfig(d_max=9, tol=1e-4))
    params = {k: v.value for k, v in init_params(spec, 3, np.float64).params.items()}
    ckpt = Checkpoint(spec, params, step=17, seed=3)
    path = tmp_path / "m.ckpt"
    ckpt.save(path)
    again = Checkpoint.load(path)
    assert again.spec == spec and again.step == 17 and again.seed == 3
    for k in params:
        np.testing.assert_array_equal(again.params[k], params[k])
    assert again.to_bytes() == ckpt.to_bytes()


def test_checkpoint_blob_is_sorted_little_endian_float64():
    spec = small_spec()
    params = {k: v.value for k, v in init_params(spec, 0, np.float64).params.items()}
    data = Checkpoint(spec, params, 0, 0).to_bytes()
    n_head = int.from_bytes(data[:8], "little")
    blob = np.frombuffer(data[8 + n_head:], dtype="<f8")
    np.testing.assert_array_equal(blob, np.concatenate([params[k].ravel() for k in sorted(params)]))


def test_truncated_checkpoint_reports_offset():
    spec = small_spec()
    params = {k: v.value for k, v in init_params(spec, 0, np.float64).params.items()}
    data = Checkpoint(spec, params, 0, 0).to_bytes()
    with pytest.raises(ValueError, match="byte"):
        Checkpoint.from_bytes(data[:-12])
    with pytest.raises(ValueError, match="trailing"):
        Checkpoint.from_bytes(data + b"\0" * 8)
