"""Command-line front end.

Exit codes: 0 success, 1 runtime failure (divergence, failed check), 2 usage or
configuration error.  ``DPLC_DEVICE`` selects the torch device (default cpu)
and ``DPLC_THREADS`` the CPU thread count (default 1, which keeps reruns
bit-identical).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import torch

from dplc.config import ConfigError, ExperimentConfig, dump_config, load_config, preset_config
from dplc.data import DatasetError, PriorSpec, derive_seed, sample_prior
from dplc.models import CheckpointError, load_model, save_checkpoint
from dplc.reporting import new_run_dir, save_image_grid, save_points_csv, write_loss_csv

logger = logging.getLogger("dplc")

ALGO_ALIASES = {"wae": "wae-mmd", "wae-mmd": "wae-mmd", "wgan-gp": "wgan-gp", "wpp": "wpp"}
REPRO_IGNORED = ("wall_seconds", "run_id")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    cfg = load_config(args.config) if args.config else preset_config(args.preset or "toy2d")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output = args.out
    return cfg


def _start_run(cfg: ExperimentConfig, command: str, args) -> Path:
    run_dir = new_run_dir(cfg.output, command)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    argv = {k: v for k, v in vars(args).items() if k not in ("func", "config", "preset", "out")}
    (run_dir / "run.json").write_text(json.dumps(
        {"command": command, "args": argv, "seed": cfg.seed}, indent=2, default=str))
    logger.info("writing to %s", run_dir)
    return run_dir


def _load_generator(path: str):
    if not Path(path).is_file():
        raise UsageError(f"generator checkpoint not found: {path}")
    try:
        return load_model(path, "generator")
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _read_cae_table(path: str) -> dict[float, float]:
    """``cae_table.json`` from train-cae, or a sweep's ``summary.json``; keys are bits."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"CAE table not found: {p}")
    try:
        data = json.loads(p.read_text())
        data = data.get("cae_mse", data)
        table = {float(k): float(v) for k, v in data.items()}
    except (ValueError, AttributeError, TypeError) as exc:
        raise UsageError(f"cannot read CAE table {p}: {exc}") from exc
    if not table:
        raise UsageError(f"CAE table {p} is empty")
    return table


@contextlib.contextmanager
def _keep_last_good(run_dir: Path):
    from dplc.training import TrainingDiverged
    try:
        yield
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, run_dir / "last_good.pt")
        raise


def _setup_device() -> None:
    torch.set_num_threads(int(os.environ.get("DPLC_THREADS", "1")))
    device = os.environ.get("DPLC_DEVICE", "cpu")
    if device != "cpu":
        try:
            torch.empty(0, device=device)
        except (RuntimeError, AssertionError) as exc:
            raise UsageError(f"DPLC_DEVICE={device!r} is not usable: {exc}") from exc
        torch.set_default_device(device)


# --------------------------------------------------------------------------
# commands


def cmd_train_generator(args) -> int:
    from dplc.pipeline import config_fingerprint, load_dataset
    from dplc.training import train_generator

    cfg = _config(args)
    algo = ALGO_ALIASES[args.algo]
    train, _ = load_dataset(cfg)
    run_dir = _start_run(cfg, "train-generator", args)
    with _keep_last_good(run_dir):
        res = train_generator(algo, train, cfg.train_config(algo), cfg.model,
                              config_fingerprint(cfg))
    save_checkpoint(res.checkpoint, run_dir / "checkpoint.pt")
    save_checkpoint(res.checkpoint.model("generator"), run_dir / "generator.pt")
    if "wae-encoder" in res.checkpoint.models:
        save_checkpoint(res.checkpoint.model("wae-encoder"), run_dir / "encoder.pt")
    write_loss_csv(res.history, run_dir / "loss.csv")
    print(run_dir / "generator.pt")
    return 0


def cmd_train_cae(args) -> int:
    from dplc.evaluation import eval_mse
    from dplc.pipeline import config_fingerprint, load_dataset
    from dplc.training import codec_from_checkpoint, train_cae

    cfg = _config(args)
    rates = args.rates if args.rates else [float(r) for r in cfg.sweep.rates]
    train, test = load_dataset(cfg)
    run_dir = _start_run(cfg, "train-cae", args)
    table = {}
    for rate in rates:
        res = train_cae(train, int(rate), cfg.train_config("cae"), cfg.model,
                        config_fingerprint(cfg))
        save_checkpoint(res.checkpoint, run_dir / f"cae_r{rate:g}.pt")
        write_loss_csv(res.history, run_dir / f"cae_r{rate:g}_loss.csv")
        table[f"{rate:g}"] = eval_mse(codec_from_checkpoint(res.checkpoint), test,
                                      cfg.sweep.n_eval, derive_seed(cfg.seed, "cae-table"))
    (run_dir / "cae_table.json").write_text(json.dumps(table, indent=2))
    print(run_dir / "cae_table.json")
    return 0


def cmd_train_codec(args) -> int:
    from dplc.pipeline import config_fingerprint, load_dataset
    from dplc.training import lambda_schedule, train_codec

    cfg = _config(args)
    G = _load_generator(args.generator)
    if args.lambda_override is not None:
        lam = args.lambda_override
    elif args.cae_table:
        lam = lambda_schedule(args.rate, _read_cae_table(args.cae_table), cfg.lambdas.mmd_base,
                              cfg.lambdas.reference_rate)
    else:
        raise UsageError("the MMD coefficient needs a CAE table (--cae-table, from train-cae) "
                         "or --lambda-override")
    train, _ = load_dataset(cfg)
    run_dir = _start_run(cfg, "train-codec", args)
    with _keep_last_good(run_dir):
        res = train_codec(G, int(args.rate), train, cfg.train_config("codec"), cfg.model, lam,
                          config_fingerprint(cfg))
    save_checkpoint(res.checkpoint, run_dir / "codec.pt")
    write_loss_csv(res.history, run_dir / "loss.csv")
    (run_dir / "lambda.json").write_text(json.dumps({"rate": args.rate, "lambda_mmd": lam}))
    logger.info("lambda_mmd(%g) = %g", args.rate, lam)
    print(run_dir / "codec.pt")
    return 0


def cmd_sweep(args) -> int:
    from dplc.pipeline import Experiment

    cfg = _config(args)
    if args.methods:
        cfg.sweep.methods = args.methods
    run_dir = _start_run(cfg, "sweep", args)
    exp = Experiment(cfg, run_dir)
    report = exp.sweep(run_dir.name)
    for r in report.records:
        print(f"{r.method:>12} {r.rate_bpp:>10.4g} mse={r.mse:.5g} rfid={r.rfid_surrogate:.5g} "
              f"sfid={r.sfid_surrogate:.5g} pv={r.pv:.4g}")
    print(run_dir / "metrics.csv")
    return 0


def cmd_verify_theorem1(args) -> int:
    from dplc.evaluation import verify_theorem1

    if args.m not in (1, 2, 3):
        raise UsageError(f"--m must be 1, 2 or 3, got {args.m}")
    if args.kmax < 2:
        raise UsageError("--kmax must be at least 2")
    if args.n < 10_000:
        raise UsageError("--n must be at least 10000")
    rep = verify_theorem1(args.m, range(1, args.kmax + 1), args.n, args.seed or 0)
    print(f"m={rep.m} slope={rep.slope:.4f} (expected {rep.expected_slope:.4f} "
          f"+/- {rep.tolerance})")
    for r, d, b, f in zip(rep.rates, rep.distortions, rep.bounds, rep.flags):
        print(f"R={r:>3d} distortion={d:.6g} bound={b:.6g} {'ok' if f else 'VIOLATED'}")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


def cmd_sample(args) -> int:
    G = _load_generator(args.generator)
    prior = PriorSpec("standard-normal", G.arch.latent_dim)
    dtype = next(G.parameters()).dtype
    z = sample_prior(prior, args.n, derive_seed(args.seed or 0, "sample"), dtype).data
    with torch.no_grad():
        x = G(z)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if x.ndim == 4:
        save_image_grid(x, out)
    else:
        save_points_csv(x, out)
    print(out)
    return 0


def cmd_reproduce(args) -> int:
    """Rerun a sweep from its run directory and compare the metrics tables."""
    src = Path(args.run_dir)
    if not (src / "config.yaml").is_file() or not (src / "run.json").is_file():
        raise UsageError(f"{src} is not a run directory")
    meta = json.loads((src / "run.json").read_text())
    if meta["command"] != "sweep":
        raise UsageError("only sweep runs can be reproduced")
    cfg = load_config(src / "config.yaml")
    cfg.output = args.out or str(src.parent)
    from dplc.pipeline import Experiment
    run_dir = _start_run(cfg, "sweep", argparse.Namespace(reproduces=str(src)))
    Experiment(cfg, run_dir).sweep(run_dir.name)
    same, diffs = compare_metrics(src / "metrics.csv", run_dir / "metrics.csv")
    for d in diffs:
        print(d)
    print(("IDENTICAL" if same else "DIFFERENT") + f": {src / 'metrics.csv'} vs "
          f"{run_dir / 'metrics.csv'}")
    return 0 if same else 1


def compare_metrics(a: Path, b: Path, ignore=REPRO_IGNORED) -> tuple[bool, list[str]]:
    from dplc.reporting import read_metrics_csv
    ra, rb = read_metrics_csv(a), read_metrics_csv(b)
    diffs = []
    if len(ra) != len(rb):
        diffs.append(f"row count {len(ra)} != {len(rb)}")
    for i, (x, y) in enumerate(zip(ra, rb)):
        for k in x:
            if k not in ignore and x[k] != y[k]:
                diffs.append(f"row {i} {k}: {x[k]} != {y[k]}")
    return not diffs, diffs


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dplc", description="Distribution-preserving lossy "
                                "compression experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--preset", help="named preset (toy2d, celeba-paper, lsun-paper)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output root (overrides the config)")
        return sp

    sp = with_config(sub.add_parser("train-generator", help="train G with one of three methods"))
    sp.add_argument("--algo", required=True, choices=sorted(ALGO_ALIASES))
    sp.set_defaults(func=cmd_train_generator)

    sp = with_config(sub.add_parser("train-cae", help="train CAE baselines, write the MSE table"))
    sp.add_argument("--rates", type=float, nargs="+")
    sp.set_defaults(func=cmd_train_cae)

    sp = with_config(sub.add_parser("train-codec", help="train E and B for a frozen G"))
    sp.add_argument("--generator", required=True)
    sp.add_argument("--rate", type=float, required=True, help="bits per sample")
    sp.add_argument("--cae-table", help="cae_table.json from train-cae or a sweep summary.json")
    sp.add_argument("--lambda-override", type=float)
    sp.set_defaults(func=cmd_train_codec)

    sp = with_config(sub.add_parser("sweep", help="rate sweep with metrics and plots"))
    sp.add_argument("--methods", nargs="+")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify-theorem1", help="distortion decay of the hypercube construction")
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--kmax", type=int, default=6)
    sp.add_argument("--n", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify_theorem1)

    sp = sub.add_parser("sample", help="draw samples from a generator checkpoint")
    sp.add_argument("--generator", required=True)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("reproduce", help="rerun a sweep run directory and compare metrics")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from dplc.training import TrainingDiverged
    try:
        _setup_device()
        return args.func(args)
    except (UsageError, ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc} (last record {exc.record})", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
