"""Command-line entry point: ``echonoise <subcommand> [options]``.

Every run writes ``run_manifest.json`` into ``--out`` with the argv, resolved
config, seed, library versions and wall time.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import experiments as ex
from .datasets import load_idx_images, make_mixture2d, sample_mixture2d
from .echo import EchoConfig, remainder_bound, sample_echo_iid, solve_clip
from .estimators import gaussian_tc
from .models import AutoencoderSpec, Checkpoint
from .verification import SUITES, run_suite

log = logging.getLogger("echonoise")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- argument helpers --------------------------------------------------------

def parse_tol(token: str) -> float:
    """``p-23`` means 2**-23; anything else is read as a float."""
    token = token.strip()
    if token.lower().startswith("p"):
        try:
            return 2.0 ** int(token[1:])
        except ValueError:
            raise UsageError(f"bad power-of-two tolerance {token!r}") from None
    try:
        return float(token)
    except ValueError:
        raise UsageError(f"bad tolerance {token!r}") from None


def parse_betas(token: str) -> list[float]:
    if token == "paper":
        return list(ex.DEFAULT_BETAS)
    try:
        return [float(b) for b in token.split(",") if b]
    except ValueError:
        raise UsageError(f"bad beta list {token!r}") from None


def parse_ints(token: str) -> list[int]:
    try:
        return [int(s) for s in token.split(",") if s]
    except ValueError:
        raise UsageError(f"bad integer list {token!r}") from None


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` (dotted keys reach into ``echo_cfg``); unknown keys are rejected."""
    spec_keys = set(AutoencoderSpec.__dataclass_fields__)
    echo_keys = set(EchoConfig.__dataclass_fields__)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in spec_keys:
            config[parts[0]] = _coerce(value)
        elif len(parts) == 2 and parts[0] == "echo_cfg" and parts[1] in echo_keys:
            config.setdefault("echo_cfg", {})
            config["echo_cfg"][parts[1]] = _coerce(value)
        else:
            raise UsageError(f"unknown config key {key!r}")
    return config


def load_config(args) -> dict:
    config = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        config = json.loads(path.read_text())
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
    return apply_overrides(config, args.set or [])


def load_dataset(args):
    if args.dataset == "mixture2d":
        return make_mixture2d(args.n_data, args.seed)
    if args.dataset == "idx":
        if not args.idx_path:
            raise UsageError("--dataset idx needs --idx-path")
        return load_idx_images(args.idx_path, args.threshold, test_path=args.idx_test_path,
                               test_fraction=0.0 if args.idx_test_path else 0.1, limit=args.limit)
    raise UsageError(f"unknown dataset {args.dataset!r}")


def build_spec(config: dict, dataset, channel: str, batch_size: int) -> AutoencoderSpec:
    image = dataset.kind == "binary_image"
    base = {"d_x": dataset.dim, "d_z": 8 if image else 2, "channel": channel,
            "distortion": "bernoulli" if image else "gaussian"}
    merged = {**base, **{k: v for k, v in config.items() if k != "echo_cfg"}}
    merged["channel"] = config.get("channel", channel)
    if merged["channel"] == "echo":
        echo = {"d_max": batch_size - 1, "mode": "batch-permute", **config.get("echo_cfg", {})}
        merged["echo_cfg"] = echo
    try:
        return AutoencoderSpec.from_dict(merged)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None


# -- subcommands -------------------------------------------------------------

def cmd_solve_clip(args, out: Path, manifest: dict) -> int:
    tol = parse_tol(args.tol)
    r = solve_clip(args.M, args.dmax, tol)
    bound = remainder_bound(args.M, r, args.dmax)
    print(f"r={r:.4f} ({r!r})")
    print(f"remainder_bound={bound:.6e} tol={tol:.6e}")
    result = {"M": args.M, "d_max": args.dmax, "tol": tol, "r": r, "remainder_bound": bound}
    manifest["config"] = result
    _write_json(out / "clip.json", result)
    return EXIT_OK


def cmd_sample(args, out: Path, manifest: dict) -> int:
    cfg = EchoConfig(d_max=args.dmax, M=1.0, tol=parse_tol(args.tol), mode="iid")
    if args.s > cfg.r:
        raise UsageError(f"--s {args.s} exceeds the clip factor r={cfg.r:.4f} for d_max={args.dmax}")
    log_s = np.log(args.s)

    def ident(x):
        return x, np.full_like(x, log_s)

    rng = np.random.default_rng(args.seed)
    eps = sample_echo_iid(sample_mixture2d, ident, cfg, args.n, int(rng.integers(2 ** 63)))
    x0 = sample_mixture2d(rng, args.n)
    z = x0 + args.s * sample_echo_iid(sample_mixture2d, ident, cfg, args.n, int(rng.integers(2 ** 63)))
    np.savetxt(out / "noise.csv", eps, delimiter=",", header="eps_0,eps_1", comments="")
    np.savetxt(out / "output.csv", z, delimiter=",", header="z_0,z_1", comments="")
    manifest["config"] = {"echo_cfg": cfg.to_dict(), "s": args.s, "n": args.n, "source": "mixture2d"}
    print(f"wrote {args.n} noise and channel-output samples to {out}")
    return EXIT_OK


def cmd_verify(args, out: Path, manifest: dict) -> int:
    checks = run_suite(args.suite, seed=args.seed)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    manifest["config"] = {"suite": args.suite}
    _write_json(out / "verify.json", {"suite": args.suite, "seed": args.seed, "passed": ok,
                                      "checks": [c.to_dict() for c in checks]})
    return EXIT_OK if ok else EXIT_FAILED


def cmd_train(args, out: Path, manifest: dict) -> int:
    dataset = load_dataset(args)
    spec = build_spec(load_config(args), dataset, args.channel, args.batch_size)
    manifest["config"] = {"spec": spec.to_dict(), "beta": args.beta, "epochs": args.epochs,
                          "batch_size": args.batch_size, "lr": args.lr, "dataset": args.dataset}
    held_out = dataset.test if dataset.test.shape[0] else dataset.train
    eval_batch = spec.echo_cfg.d_max + 1 if spec.channel == "echo" else 100
    if held_out.shape[0] < eval_batch:
        raise UsageError(f"evaluation split has {held_out.shape[0]} rows, fewer than one batch of {eval_batch}")
    try:
        ckpt, records = ex.train(spec, dataset, args.beta, args.epochs, args.batch_size, args.lr, args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from None
    except ex.TrainingDiverged as err:
        err.checkpoint.save(out / "checkpoint.ckpt")
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_FAILED
    ckpt.save(out / "checkpoint.ckpt")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss", "rate", "distortion", "lr"])
        for r in records:
            w.writerow([r.epoch, r.step, repr(r.loss), repr(r.rate), repr(r.distortion), repr(r.lr)])
    ev = ex.evaluate(ckpt, held_out, args.beta, args.seed)
    summary = {"rate": ev["rate"], "distortion": ev["distortion"], "neg_elbo": ev["neg_elbo"]}
    _write_json(out / "summary.json", summary)
    print(f"rate={ev['rate']:.4f} distortion={ev['distortion']:.4f} neg_elbo={ev['neg_elbo']:.4f} nats")
    return EXIT_OK


def cmd_rd_sweep(args, out: Path, manifest: dict) -> int:
    dataset = load_dataset(args)
    config = load_config(args)
    betas = parse_betas(args.betas)
    seeds = parse_ints(args.seeds)
    channels = [c for c in args.channel.split(",") if c]
    points = []
    manifest["config"] = {"betas": betas, "seeds": seeds, "epochs": args.epochs, "batch_size": args.batch_size,
                          "lr": args.lr, "dataset": args.dataset, "specs": {}}
    for channel in channels:
        spec = build_spec(config, dataset, channel, args.batch_size)
        manifest["config"]["specs"][channel] = spec.to_dict()
        try:
            points += ex.rd_sweep(spec, dataset, betas, seeds, args.epochs, args.batch_size, args.lr,
                                  out_dir=out / channel)
        except ValueError as err:
            raise UsageError(str(err)) from None
    ex.write_rd_csv(out / "rd.csv", points)
    for c in channels:
        curve = ex.rd_curve(points, c)
        _write_json(out / f"rd_curve_{c}.json", curve)
    failed = sum(p.status != "ok" for p in points)
    print(f"wrote {len(points)} RD points to {out / 'rd.csv'} ({failed} failed)")
    return EXIT_OK


def cmd_diagnose(args, out: Path, manifest: dict) -> int:
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = Checkpoint.load(args.checkpoint)
    dataset = load_dataset(args)
    try:
        report = ex.diagnose(ckpt, dataset, args.n_samples, args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from None
    manifest["config"] = {"checkpoint": str(args.checkpoint), "n_samples": args.n_samples}
    _write_json(out / "diagnose.json", report)
    print(f"TC(noise) = {report['tc']['standard']:.4f} nats; report in {out / 'diagnose.json'}")
    return EXIT_OK


def cmd_tc(args, out: Path, manifest: dict) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise UsageError(f"input not found: {path}")
    data = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", skiprows=args.skip_header)
    tc = gaussian_tc(data, paper_convention=args.paper_convention)
    manifest["config"] = {"input": str(path), "paper_convention": args.paper_convention}
    _write_json(out / "tc.json", {"tc": tc, "paper_convention": args.paper_convention, "n": int(len(data))})
    print(f"tc={tc:.6f} nats")
    return EXIT_OK


COMMANDS = {
    "solve-clip": cmd_solve_clip,
    "sample": cmd_sample,
    "verify": cmd_verify,
    "train": cmd_train,
    "rd-sweep": cmd_rd_sweep,
    "diagnose": cmd_diagnose,
    "tc": cmd_tc,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with AutoencoderSpec / EchoConfig fields")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", default="mixture2d", choices=["mixture2d", "idx"])
    data.add_argument("--n-data", type=int, default=2000, help="mixture2d size (train + test)")
    data.add_argument("--idx-path")
    data.add_argument("--idx-test-path")
    data.add_argument("--threshold", type=float, default=0.5)
    data.add_argument("--limit", type=int)

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--epochs", type=int, default=50)
    fit.add_argument("--batch-size", type=int, default=100)
    fit.add_argument("--lr", type=float, default=3e-3)

    parser = argparse.ArgumentParser(prog="echonoise", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-clip", parents=[common], help="solve the clip factor r")
    p.add_argument("--M", type=float, default=1.0)
    p.add_argument("--dmax", type=int, default=99)
    p.add_argument("--tol", default="p-23", help="tolerance; p-23 / p-52 select powers of two")

    p = sub.add_parser("sample", parents=[common], help="echo noise and channel output on mixture2d")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--s", type=float, default=0.5)
    p.add_argument("--dmax", type=int, default=99)
    p.add_argument("--tol", default="p-23")

    p = sub.add_parser("verify", parents=[common], help="run a verification suite")
    p.add_argument("--suite", default="all", choices=sorted(SUITES) + ["all"])

    p = sub.add_parser("train", parents=[common, data, fit], help="train one autoencoder")
    p.add_argument("--channel", default="echo", choices=["echo", "gaussian"])
    p.add_argument("--beta", type=float, default=1.0)

    p = sub.add_parser("rd-sweep", parents=[common, data, fit], help="beta sweep over rate-distortion")
    p.add_argument("--channel", default="echo", help="echo, gaussian or echo,gaussian")
    p.add_argument("--betas", default="paper", help="'paper' or comma-separated values")
    p.add_argument("--seeds", default="0,1,2,3,4")

    p = sub.add_parser("diagnose", parents=[common, data], help="marginal / TC / pointwise-rate report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-samples", type=int, default=2000)

    p = sub.add_parser("tc", parents=[common], help="Gaussian total correlation of a sample file")
    p.add_argument("--input", required=True, help=".npy or comma-separated file")
    p.add_argument("--skip-header", type=int, default=0)
    p.add_argument("--paper-convention", action="store_true")
    return parser


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=float))


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "echonoise": pkg}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": args.command, "argv": argv, "seed": args.seed, "versions": _versions(), "config": None}
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, out, manifest)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"echonoise: error: {err}", file=sys.stderr)
        code = EXIT_USAGE
    manifest["wall_time_s"] = time.perf_counter() - start
    manifest["exit_code"] = code
    _write_json(out / "run_manifest.json", manifest)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
