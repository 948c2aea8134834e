"""Batch command line: ``hinite {simulate,train,eval,bench}``.

Every command takes a JSON config (missing keys fall back to defaults, and the
resolved config is echoed into the output directory's ``manifest.json``).

Exit codes: 0 success, 2 user/config error, 3 I/O error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, io
from .evaluate import (
    VARIANTS,
    UnknownVariant,
    build_variant,
    gamma_sweep,
    metrics,
    run_experiment,
    with_graph,
    write_sweep,
)
from .model import ModelConfig, ShapeError, check_params
from .simulate import TEST, SimConfig, load_dataset, save_dataset, simulate
from .tensor import parameter
from .train import TrainConfig, TrainingDiverged, TrainResult, ite, train

log = logging.getLogger("hinite")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
THREADS_ENV = "HINITE_THREADS"

# model/train keys a user may set; input_dim and num_views come from the data
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("input_dim", "num_views"))
DEFAULT_GAMMAS = (0.01, 0.1, 0.5, 1.0)


class ConfigError(ValueError):
    """Bad user input; reported with exit code 2."""


# ------------------------------------------------------------------ config


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _build(kind, section: dict, where: str, **fixed):
    names = {f.name for f in dataclasses.fields(kind)}
    for key in section:
        if key not in names or key in fixed:
            raise ConfigError(f"{where}.{key}: unknown field")
    try:
        return kind(**{**section, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _section(doc: dict, key: str) -> dict:
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected an object")
    return value


def _check_keys(doc: dict, allowed: Sequence[str], where: str = "config") -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown field (expected one of {', '.join(allowed)})")


def sim_config(doc: dict, seed: int | None) -> SimConfig:
    if seed is not None:
        doc = {**doc, "seed": seed}
    return _build(SimConfig, doc, "sim")


def model_config(section: dict, input_dim: int, num_views: int) -> ModelConfig:
    return _build(ModelConfig, section, "model", input_dim=input_dim, num_views=num_views)


def train_config(section: dict, seed: int | None) -> TrainConfig:
    if seed is not None:
        section = {**section, "seed": seed}
    return _build(TrainConfig, section, "train")


# ------------------------------------------------------------------ plumbing


def resolve_threads(flag: int | None) -> int | None:
    """--threads wins over the environment variable."""
    if flag is not None:
        return flag
    raw = os.environ.get(THREADS_ENV)
    if raw in (None, ""):
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if value <= 0:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    return value


@contextlib.contextmanager
def thread_limit(threads: int | None):
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def run_info(command: str, config: dict, seeds, artifacts: list[str], started: str) -> dict:
    return {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "artifacts": sorted(artifacts),
        "version": __version__,
        "timestamps": {"started": started, "finished": _stamp()},
    }


def write_manifest(out: Path, info: dict) -> None:
    io.write_json(out / "manifest.json", info)


def load_params(path: Path):
    return {k: parameter(v, name=k) for k, v in io.load_named(path).items()}


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    started = _stamp()
    doc = read_config(args.config)
    cfg = sim_config(doc.get("sim", doc), args.seed)
    ds = simulate(cfg)
    ds.meta["run"] = run_info("simulate", {"sim": cfg.to_dict()}, [cfg.seed],
                              ["covariates.csv", "treatments.csv", "outcomes.csv", "edges.txt", "sim_weights.npz"],
                              started)
    save_dataset(ds, args.out)
    log.info("wrote %d-unit dataset to %s", cfg.n, args.out)
    return EXIT_OK


def _load_bundle(path: str):
    if not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"{path}: not a dataset bundle (no manifest.json)")
    try:
        return load_dataset(path)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed dataset bundle ({exc})") from None


def cmd_train(args) -> int:
    started = _stamp()
    doc = read_config(args.config)
    _check_keys(doc, ("model", "train", "variant"))
    variant = args.variant or doc.get("variant", "HINITE")
    if variant not in VARIANTS:
        raise UnknownVariant(variant)
    ds = _load_bundle(args.data)
    base = model_config(_section(doc, "model"), ds.d, ds.graph.m)
    cfg, g = build_variant(variant, base, ds.graph)
    tcfg = train_config(_section(doc, "train"), args.seed)
    result = train(with_graph(ds, g), cfg, tcfg)

    out = Path(args.out)
    io.save_named(out / "checkpoint.npz", {k: p.values for k, p in result.params.items()})
    io.write_csv(out / "history.csv", ["iteration", "train_loss", "hsic", "val_mse"], result.history)
    model_doc = {
        "variant": variant,
        "model": cfg.to_dict(),
        "gamma": result.gamma,
        "y_mean": result.y_mean,
        "y_std": result.y_std,
        "best_iteration": result.best_iteration,
        "iterations_run": result.iterations_run,
        "stopped_early": result.stopped_early,
    }
    io.write_json(out / "model.json", model_doc)
    config = {"variant": variant, "model": base.to_dict(), "train": tcfg.to_dict(), "data": str(args.data)}
    write_manifest(out, run_info("train", config, [tcfg.seed], ["checkpoint.npz", "history.csv", "model.json"], started))
    log.info("%s: best iteration %d of %d", variant, result.best_iteration, result.iterations_run)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _stamp()
    ds = _load_bundle(args.data)
    ckpt = Path(args.checkpoint)
    ckpt_dir, ckpt_file = (ckpt, ckpt / "checkpoint.npz") if ckpt.is_dir() else (ckpt.parent, ckpt)
    model_doc = io.read_json(ckpt_dir / "model.json")
    params = load_params(ckpt_file)
    cfg = ModelConfig(**model_doc["model"])
    if cfg.input_dim != ds.d:
        raise ConfigError(f"checkpoint expects covariates of shape (n, {cfg.input_dim}); dataset has {ds.X.shape}")
    try:
        check_params(cfg, params)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from None
    _, g = build_variant(model_doc["variant"], cfg.with_(num_views=ds.graph.m), ds.graph)
    if g.m != cfg.num_views:
        raise ConfigError(f"checkpoint expects {cfg.num_views} views; dataset graph has {g.m}")
    if ds.tau is None or ds.split is None:
        raise ConfigError(f"{args.data}: bundle has no ground-truth effects or split")

    result = TrainResult(params, [], model_doc["best_iteration"], model_doc["iterations_run"], model_doc["gamma"],
                         model_doc["y_mean"], model_doc["y_std"])
    tau_hat = ite(result, cfg, with_graph(ds, g))
    test = np.flatnonzero(ds.split == TEST)
    m = metrics(ds.tau[test], tau_hat[test])
    m["n_test"] = int(len(test))
    out = Path(args.out)
    io.write_json(out / "metrics.json", m)
    io.write_csv(out / "metrics.csv", ["metric", "value"], [[k, m[k]] for k in ("pehe", "sqrt_pehe", "ate", "n_test")])
    config = {"data": str(args.data), "checkpoint": str(ckpt), "variant": model_doc["variant"]}
    write_manifest(out, run_info("eval", config, [], ["metrics.csv", "metrics.json"], started))
    log.info("pehe=%.6g ate=%.6g", m["pehe"], m["ate"])
    return EXIT_OK


BENCH_KEYS = ("sim", "model", "train", "variants", "seeds", "gamma_sweep", "workers", "plots")


def bench_plan(doc: dict, seed: int | None) -> dict:
    """Resolve a bench config: every default made explicit."""
    _check_keys(doc, BENCH_KEYS)
    seeds = [seed] if seed is not None else doc.get("seeds", [1, 2, 3, 4, 5])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of non-negative integers")
    variants = doc.get("variants", list(VARIANTS))
    for v in variants:
        if v not in VARIANTS:
            raise UnknownVariant(v)
    sim = sim_config(_section(doc, "sim"), None)
    model = model_config(_section(doc, "model"), sim.d, sim.m)
    tcfg = train_config(_section(doc, "train"), None)
    sweep = doc.get("gamma_sweep", {})
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ConfigError("gamma_sweep: expected an object or null")
        _check_keys(sweep, ("gammas", "seeds"), "gamma_sweep")
        gammas = [float(x) for x in sweep.get("gammas", DEFAULT_GAMMAS)]
        if not gammas or any(x < 0 for x in gammas):
            raise ConfigError("gamma_sweep.gammas: expected a non-empty list of values >= 0")
        sweep = {"gammas": gammas, "seeds": sweep.get("seeds", seeds)}
    workers = doc.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers: expected a positive integer")
    return {
        "sim": sim.to_dict(),
        "model": {k: v for k, v in model.to_dict().items() if k in MODEL_KEYS},
        "train": tcfg.to_dict(),
        "variants": variants,
        "seeds": seeds,
        "gamma_sweep": sweep,
        "workers": workers,
        "plots": bool(doc.get("plots", True)),
    }


def cmd_bench(args) -> int:
    started = _stamp()
    plan = bench_plan(read_config(args.config), args.seed)
    if args.workers is not None:
        plan["workers"] = args.workers
    sim = SimConfig(**plan["sim"])
    model = ModelConfig(input_dim=sim.d, num_views=sim.m, **plan["model"])
    tcfg = TrainConfig(**plan["train"])
    out = Path(args.out)

    report = run_experiment(sim, plan["variants"], plan["seeds"], model, tcfg, workers=plan["workers"])
    report.write(out)
    artifacts = ["report.csv", "report_summary.json", "report_timing.csv"]
    failed = [r for r in report.rows if r.failed]
    for r in failed:
        log.warning("%s seed=%d diverged: %s", r.variant, r.seed, r.failed)

    if plan["gamma_sweep"] is not None:
        sweep = plan["gamma_sweep"]
        rows = gamma_sweep(sim, sweep["gammas"], sweep["seeds"], model, tcfg, workers=plan["workers"], known=report.rows)
        summary = write_sweep(rows, out, plots=plan["plots"])
        artifacts += ["gamma_sweep.csv", "gamma_sweep_summary.json"]
        if plan["plots"]:
            artifacts += ["gamma_sweep_pehe.svg", "gamma_sweep_ate.svg"]
        log.info("gamma sweep max/min PEHE ratio %.3f", summary["pehe_max_min_ratio"])

    write_manifest(out, run_info("bench", plan, plan["seeds"], artifacts, started))
    for name, entry in report.summary().items():
        log.info("%-11s pehe %.4f +- %.4f", name, entry["pehe"]["mean"], entry["pehe"]["se"])
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help=f"cap BLAS threads (overrides ${THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hinite", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset bundle")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train one variant on a dataset bundle")
    p.add_argument("--data", required=True, help="dataset bundle directory")
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS)} (default HINITE)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a bundle's test split")
    p.add_argument("--data", required=True, help="dataset bundle directory")
    p.add_argument("--checkpoint", required=True, help="train output directory or checkpoint.npz")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="all variants x seeds, plus the gamma sweep")
    p.add_argument("--workers", type=int, help="parallel worker processes (default from config, else 1)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.threads is not None and args.threads <= 0:
            raise ConfigError("--threads must be positive")
        with thread_limit(resolve_threads(args.threads)):
            return args.func(args)
    except (ConfigError, UnknownVariant) as exc:
        print(f"hinite {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"hinite {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"hinite {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
