"""Metrics, method variants, the multi-seed runner and the gamma sweep."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import io
from .graph import HeteroGraph, projection_graph
from .model import ModelConfig
from .simulate import TEST, Dataset, SimConfig, simulate
from .train import TrainConfig, TrainingDiverged, train, ite

log = logging.getLogger(__name__)

VARIANTS = ("HINITE", "HINITE-PG", "HINITE-NHG", "HINITE-NB", "GCN_Proj", "MGCN_C", "MGCN_M", "TARNet")


class UnknownVariant(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown variant {name!r}; valid names: {', '.join(VARIANTS)}")
        self.name = name


# ------------------------------------------------------------------ metrics


def _aligned(tau, tau_hat) -> tuple[np.ndarray, np.ndarray]:
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    tau_hat = np.asarray(tau_hat, dtype=np.float64).reshape(-1)
    if tau.shape != tau_hat.shape:
        raise ValueError(f"length mismatch: {tau.shape[0]} true vs {tau_hat.shape[0]} estimated effects")
    return tau, tau_hat


def pehe(tau, tau_hat) -> float:
    """Mean squared ITE error."""
    tau, tau_hat = _aligned(tau, tau_hat)
    return float(np.mean((tau - tau_hat) ** 2))


def ate_error(tau, tau_hat) -> float:
    tau, tau_hat = _aligned(tau, tau_hat)
    return float(abs(tau.mean() - tau_hat.mean()))


def metrics(tau, tau_hat) -> dict[str, float]:
    e = pehe(tau, tau_hat)
    return {"pehe": e, "sqrt_pehe": math.sqrt(e), "ate": ate_error(tau, tau_hat)}


# ------------------------------------------------------------------ variants


def build_variant(name: str, model_cfg: ModelConfig, g: HeteroGraph) -> tuple[ModelConfig, HeteroGraph]:
    """Model config and effective graph for one method variant."""
    if name not in VARIANTS:
        raise UnknownVariant(name)
    cfg = model_cfg.with_(num_views=g.m)
    if name == "HINITE":
        return cfg.with_(interference="hia"), g
    if name == "HINITE-NB":
        return cfg.with_(interference="hia", gamma=0.0), g
    if name == "HINITE-PG":
        return cfg.with_(interference="hia", num_views=1), projection_graph(g)
    if name in ("HINITE-NHG", "GCN_Proj"):
        return cfg.with_(interference="gcn", num_views=1), projection_graph(g)
    if name == "MGCN_C":
        return cfg.with_(interference="mgcn_concat"), g
    if name == "MGCN_M":
        return cfg.with_(interference="mgcn_mean"), g
    return cfg.with_(interference="none", gamma=0.0), g  # TARNet


def with_graph(ds: Dataset, g: HeteroGraph) -> Dataset:
    return Dataset(g, ds.X, ds.T, ds.Y, ds.Y0, ds.Y1, ds.tau, ds.split, ds.weights, ds.config, ds.meta)


# ------------------------------------------------------------------ single cell


@dataclass
class CellResult:
    variant: str
    seed: int
    pehe: float
    sqrt_pehe: float
    ate: float
    iterations: int
    best_iteration: int
    gamma: float
    wall_time: float
    failed: str | None = None

    def row(self) -> list:
        return [self.variant, self.seed, self.pehe, self.sqrt_pehe, self.ate, self.iterations,
                self.best_iteration, self.gamma, self.failed or ""]


REPORT_HEADER = ["variant", "seed", "pehe", "sqrt_pehe", "ate", "iterations", "best_iteration", "gamma", "failed"]


def run_cell(ds: Dataset, variant: str, seed: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> CellResult:
    """Train one variant on one dataset and score it on the test split."""
    cfg, g = build_variant(variant, model_cfg, ds.graph)
    data = with_graph(ds, g)
    start = time.perf_counter()
    try:
        result = train(data, cfg, train_cfg.with_(seed=seed))
    except TrainingDiverged as exc:
        nan = float("nan")
        return CellResult(variant, seed, nan, nan, nan, exc.iteration, 0, cfg.gamma,
                          time.perf_counter() - start, failed=str(exc))
    tau_hat = ite(result, cfg, data)
    test = np.flatnonzero(ds.split == TEST)
    m = metrics(ds.tau[test], tau_hat[test])
    return CellResult(variant, seed, m["pehe"], m["sqrt_pehe"], m["ate"], result.iterations_run,
                      result.best_iteration, result.gamma, time.perf_counter() - start)


# ------------------------------------------------------------------ experiment


@dataclass
class ExperimentReport:
    rows: list[CellResult] = field(default_factory=list)

    def by_variant(self) -> dict[str, list[CellResult]]:
        out: dict[str, list[CellResult]] = {}
        for r in self.rows:
            out.setdefault(r.variant, []).append(r)
        return out

    def summary(self) -> dict[str, dict]:
        out = {}
        for name, cells in self.by_variant().items():
            ok = [c for c in cells if c.failed is None]
            entry = {"seeds": len(cells), "failed": len(cells) - len(ok)}
            for key in ("pehe", "sqrt_pehe", "ate"):
                vals = np.array([getattr(c, key) for c in ok])
                entry[key] = {"mean": mean_se(vals)[0], "se": mean_se(vals)[1]}
            out[name] = entry
        return out

    def write(self, out: str | Path, stem: str = "report") -> None:
        out = Path(out)
        io.write_csv(out / f"{stem}.csv", REPORT_HEADER, (r.row() for r in self.rows))
        io.write_json(out / f"{stem}_summary.json", self.summary())
        io.write_csv(out / f"{stem}_timing.csv", ["variant", "seed", "wall_time_s"],
                     ([r.variant, r.seed, round(r.wall_time, 3)] for r in self.rows))


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        return float("nan"), float("nan")
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def _job(args):
    sim_cfg, variant, seed, model_cfg, train_cfg = args
    return run_cell(simulate(sim_cfg), variant, seed, model_cfg, train_cfg)


def run_cells(jobs: list[tuple], workers: int = 1) -> list[CellResult]:
    """Run (sim_cfg, variant, seed, model_cfg, train_cfg) jobs, results in job order."""
    if workers <= 1 or len(jobs) <= 1:
        cache: dict = {}
        out = []
        for sim_cfg, variant, seed, model_cfg, train_cfg in jobs:
            if sim_cfg not in cache:
                cache.clear()
                cache[sim_cfg] = simulate(sim_cfg)
            out.append(run_cell(cache[sim_cfg], variant, seed, model_cfg, train_cfg))
            log.info("%s seed=%d pehe=%.4f (%.1fs)", variant, seed, out[-1].pehe, out[-1].wall_time)
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def run_experiment(
    sim_cfg: SimConfig,
    variants: Iterable[str],
    seeds: Iterable[int],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    workers: int = 1,
) -> ExperimentReport:
    """Every variant on every seed's dataset; seed drives both data and training."""
    variants = list(variants)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    for v in variants:
        if v not in VARIANTS:
            raise UnknownVariant(v)
    jobs = [(sim_cfg.__class__(**{**sim_cfg.to_dict(), "seed": s}), v, s, model_cfg, train_cfg)
            for s in seeds for v in variants]
    return ExperimentReport(run_cells(jobs, workers))


# ------------------------------------------------------------------ gamma sweep


@dataclass
class SweepRow:
    gamma: float
    seed: int
    pehe: float
    sqrt_pehe: float
    ate: float
    failed: str | None = None


SWEEP_HEADER = ["gamma", "seed", "pehe", "sqrt_pehe", "ate", "failed"]


def gamma_sweep(
    sim_cfg: SimConfig,
    gammas: Sequence[float],
    seeds: Iterable[int],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    workers: int = 1,
    known: Sequence[CellResult] = (),
) -> list[SweepRow]:
    """HINITE at each fixed gamma (no gamma search) on identical datasets.

    ``known`` holds HINITE cells already trained with this exact setup (for
    example the main report's rows); a matching (seed, gamma) is reused
    rather than retrained, which gives the same numbers.
    """
    if any(g < 0 for g in gammas):
        raise ValueError("gammas must be >= 0")
    fixed = train_cfg.with_(gamma_grid=None)
    cached = {(c.seed, c.gamma): c for c in known if c.variant == "HINITE" and c.failed is None}
    if train_cfg.gamma_grid is not None:
        cached = {}  # known cells picked their own gamma; not comparable
    jobs = [(sim_cfg.__class__(**{**sim_cfg.to_dict(), "seed": s}), "HINITE", s, model_cfg.with_(gamma=float(g)), fixed)
            for s in seeds for g in gammas]
    todo = [job for job in jobs if (job[2], job[3].gamma) not in cached]
    fresh = iter(run_cells(todo, workers))
    cells = [cached.get((job[2], job[3].gamma)) or next(fresh) for job in jobs]
    return [SweepRow(job[3].gamma, c.seed, c.pehe, c.sqrt_pehe, c.ate, c.failed) for job, c in zip(jobs, cells)]


def sweep_table(rows: Sequence[SweepRow]) -> list[dict]:
    """Per-gamma means and standard errors."""
    table = []
    for gamma in sorted({r.gamma for r in rows}):
        ok = [r for r in rows if r.gamma == gamma and r.failed is None]
        entry = {"gamma": gamma, "runs": len(ok)}
        for key in ("pehe", "sqrt_pehe", "ate"):
            entry[key], entry[f"{key}_se"] = mean_se([getattr(r, key) for r in ok])
        table.append(entry)
    return table


def sweep_ratio(table: Sequence[dict], key: str = "pehe") -> float:
    vals = [row[key] for row in table if np.isfinite(row[key])]
    return max(vals) / min(vals) if vals and min(vals) > 0 else float("nan")


def write_sweep(rows: Sequence[SweepRow], out: str | Path, plots: bool = True) -> dict:
    out = Path(out)
    io.write_csv(out / "gamma_sweep.csv", SWEEP_HEADER,
                 ([r.gamma, r.seed, r.pehe, r.sqrt_pehe, r.ate, r.failed or ""] for r in rows))
    table = sweep_table(rows)
    summary = {"table": table, "pehe_max_min_ratio": sweep_ratio(table, "pehe"),
               "ate_max_min_ratio": sweep_ratio(table, "ate")}
    io.write_json(out / "gamma_sweep_summary.json", summary)
    if plots:
        for key in ("pehe", "ate"):
            plot_sweep(table, key, out / f"gamma_sweep_{key}.svg")
    return summary


def plot_sweep(table: Sequence[dict], key: str, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hinite"
    gammas = [row["gamma"] for row in table]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.errorbar(gammas, [row[key] for row in table], yerr=[row[f"{key}_se"] for row in table],
                marker="o", capsize=3)
    ax.set_xscale("symlog", linthresh=0.01)
    ax.set_xlabel("gamma")
    ax.set_ylabel({"pehe": "PEHE", "ate": "ATE error"}[key])
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
