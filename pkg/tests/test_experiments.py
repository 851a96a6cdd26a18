import json
import math

import numpy as np
import pytest

from echonoise import experiments as ex
from echonoise.datasets import make_mixture2d
from echonoise.echo import EchoConfig, rate_floor
from echonoise.models import AutoencoderSpec, Checkpoint, init_params


@pytest.fixture(scope="module")
def mixture():
    return make_mixture2d(2000, seed=0)


def mixture_spec(**kw):
    kw.setdefault("hidden", [32])
    return AutoencoderSpec(d_x=2, d_z=2, distortion="gaussian", **kw)


def test_lr_schedule_shape():
    assert ex.lr_at(0, 100, 1.0) == 1.0
    assert ex.lr_at(49, 100, 1.0) == 1.0
    assert ex.lr_at(75, 100, 1.0) == pytest.approx(0.5)
    assert ex.lr_at(99, 100, 1.0) == pytest.approx(0.02)


def test_default_beta_grid():
    assert ex.DEFAULT_BETAS == [.05, .075, .1, .125, .15, .2, .25, .3, .4, .5, .6, .7, .8, .9, 1, 1.5, 2, 3, 4, 6]


def test_train_bounds_full_length(mixture):
    spec = mixture_spec(hidden=[128, 64])
    ckpt, records = ex.train(spec, mixture, beta=1.0, epochs=50, seed=0)
    assert [r.epoch for r in records] == list(range(50))
    assert all(b.step > a.step for a, b in zip(records, records[1:]))
    ev = ex.evaluate(ckpt, mixture.test)
    assert math.isfinite(ev["neg_elbo"])
    assert rate_floor(2, spec.echo_cfg.r) <= ev["rate"] <= 10.0


def test_train_is_deterministic(mixture):
    spec = mixture_spec()
    a, ra = ex.train(spec, mixture, beta=0.5, epochs=3, seed=4)
    b, rb = ex.train(spec, mixture, beta=0.5, epochs=3, seed=4)
    assert ra == rb
    assert a.to_bytes() == b.to_bytes()
    c, _ = ex.train(spec, mixture, beta=0.5, epochs=3, seed=5)
    assert c.to_bytes() != a.to_bytes()


def test_compression_costs_reconstruction(mixture):
    spec = mixture_spec()
    d = {beta: np.mean([ex.evaluate(ex.train(spec, mixture, beta, epochs=20, seed=s)[0], mixture.test)["distortion"]
                        for s in range(5)]) for beta in (0.0, 1.0)}
    assert d[0.0] <= d[1.0]


def test_train_checks_batching(mixture):
    with pytest.raises(ValueError, match="B - 1|B-1|d_max"):
        ex.train(mixture_spec(), mixture, 1.0, epochs=1, batch_size=50)
    with pytest.raises(ValueError, match="features"):
        ex.train(AutoencoderSpec(d_x=3, d_z=2, echo_cfg=EchoConfig.for_batch(100)), mixture, 1.0, epochs=1)


def test_divergence_returns_last_good_checkpoint(mixture, monkeypatch):
    real = ex.objective
    calls = {"n": 0}

    def flaky(batch, params, spec, beta, seed):
        calls["n"] += 1
        if calls["n"] == 5:
            raise FloatingPointError("non-finite activations at encoder layer 0")
        return real(batch, params, spec, beta, seed)

    monkeypatch.setattr(ex, "objective", flaky)
    with pytest.raises(ex.TrainingDiverged) as info:
        ex.train(mixture_spec(), mixture, 1.0, epochs=2, seed=0)
    assert info.value.checkpoint.step == 4
    assert all(np.all(np.isfinite(v)) for v in info.value.checkpoint.params.values())


def test_evaluate_pointwise_terms(mixture):
    spec = mixture_spec()
    ckpt = Checkpoint(spec, {k: v.value for k, v in init_params(spec, 0, np.float64).params.items()}, 0, 0)
    ev = ex.evaluate(ckpt, mixture.test)
    assert ev["pointwise_rate"].shape == (400,)
    assert ev["neg_elbo"] == ev["rate"] + ev["distortion"]
    with pytest.raises(ValueError):
        ex.evaluate(ckpt, mixture.test[:50])


# -- sweep ------------------------------------------------------------------

def test_sweep_csv_round_trip(mixture, tmp_path):
    points = ex.rd_sweep(mixture_spec(), mixture, betas=[2.0, 0.5], seeds=[1, 0], epochs=1, out_dir=tmp_path)
    assert [(p.beta, p.seed) for p in points] == [(0.5, 0), (0.5, 1), (2.0, 0), (2.0, 1)]
    again = ex.read_rd_csv(tmp_path / "rd.csv")
    assert again == points
    for p in points:
        assert p.neg_elbo == pytest.approx(p.rate + p.distortion, abs=1e-9)
        assert p.rate >= rate_floor(2, mixture_spec().echo_cfg.r)
        assert (tmp_path / "checkpoints" / ex.checkpoint_name("echo", p.beta, p.seed)).exists()
    header = (tmp_path / "rd.csv").read_text().splitlines()[0].split(",")
    assert header == ex.RD_COLUMNS


def test_sweep_marks_failed_cells(mixture, tmp_path, monkeypatch):
    real = ex.train

    def sometimes(spec, dataset, beta, *args, **kw):
        if beta == 3.0:
            raise ex.TrainingDiverged("boom", None, [])
        return real(spec, dataset, beta, *args, **kw)

    monkeypatch.setattr(ex, "train", sometimes)
    points = ex.rd_sweep(mixture_spec(), mixture, betas=[1.0, 3.0], seeds=[0], epochs=1, out_dir=tmp_path)
    status = {p.beta: p.status for p in points}
    assert status == {1.0: "ok", 3.0: "failed"}
    rows = ex.read_rd_csv(tmp_path / "rd.csv")
    assert rows[1].status == "failed" and math.isnan(rows[1].rate)
    assert [c["beta"] for c in ex.rd_curve(rows)] == [1.0]


def test_sweep_needs_betas(mixture):
    with pytest.raises(ValueError):
        ex.rd_sweep(mixture_spec(), mixture, betas=[], epochs=1)


def test_sweep_worker_count_does_not_change_results(mixture):
    kw = dict(betas=[1.0], seeds=[0, 1], epochs=1)
    assert ex.rd_sweep(mixture_spec(), mixture, workers=1, **kw) == ex.rd_sweep(mixture_spec(), mixture, workers=2, **kw)


def test_rd_curve_and_violations():
    pts = [ex.RDPoint.measured(b, r, d, s, "echo") for b, r, d, s in
           [(1, 1.0, 2.0, 0), (1, 1.2, 2.2, 1), (0.1, 3.0, 1.0, 0), (0.1, 3.2, 1.2, 1), (6, 0.4, 5.0, 0)]]
    pts.append(ex.RDPoint.measured(0.5, 9.9, 9.9, 0, "gaussian"))
    curve = ex.rd_curve(pts, "echo")
    assert [c["beta"] for c in curve] == [6, 1, 0.1]
    assert curve[1]["rate"] == pytest.approx(1.1) and curve[1]["distortion_std"] == pytest.approx(0.1)
    assert ex.rd_violations(curve) == []
    bumpy = curve + [{"beta": 0.01, "rate": 4.0, "distortion": 1.7}]
    assert len(ex.rd_violations(bumpy)) == 1
    assert ex.rd_violations(bumpy, slack=0.6) == []


# -- diagnose ---------------------------------------------------------------

def saturated_checkpoint(spec):
    store = init_params(spec, 0, np.float64)
    store.params["enc.scale.W"].value[...] = 0.0
    store.params["enc.scale.b"].value[...] = 50.0
    return Checkpoint(spec, {k: v.value for k, v in store.params.items()}, 0, 0)


def test_diagnose_unused_dimensions_sit_at_floor(mixture):
    spec = mixture_spec()
    report = ex.diagnose(saturated_checkpoint(spec), mixture, n_samples=500, n_null_sims=200)
    for m in report["marginals"]:
        assert m["rate"] == pytest.approx(-math.log(spec.echo_cfg.r), abs=1e-12)
    assert math.isfinite(report["tc"]["standard"])
    assert report["tc"]["paper_convention"] == pytest.approx(2 * report["tc"]["standard"], rel=1e-12)
    dist = [row["distortion"] for row in report["pointwise"]]
    assert dist == sorted(dist)
    assert report["config"]["rate_floor"] == pytest.approx(rate_floor(2, spec.echo_cfg.r))
    json.dumps(report)


def test_diagnose_gaussian_channel(mixture):
    spec = mixture_spec(channel="gaussian")
    ckpt = Checkpoint(spec, {k: v.value for k, v in init_params(spec, 0, np.float64).params.items()}, 0, 0)
    report = ex.diagnose(ckpt, mixture, n_samples=300, n_null_sims=100)
    assert len(report["marginals"]) == 2 and "rate_floor" not in report["config"]


def test_diagnose_rejects_dimension_mismatch(mixture):
    spec = AutoencoderSpec(d_x=5, d_z=2, hidden=[4])
    with pytest.raises(ValueError, match="features"):
        ex.diagnose(saturated_checkpoint(spec), mixture)
