"""Synthetic multi-view graphs, confounded treatments and outcomes with spillover.

Outcomes are additive:

    y_i = w0.x_i + t_i * w1.x_i + o1_i + o2_i + eps_i

where o1 aggregates neighbours' [x_j, t_j] and o2 aggregates neighbours' o1,
each view weighted by its own coefficient e^v and neighbour sums averaged
per view. The true ITE is w1.x_i.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import io
from .graph import HeteroGraph, ViewGraph, load_edges, save_edges

WEIGHT_DISTS = ("gaussian", "uniform")
SPLIT_NAMES = ("train", "val", "test")
TRAIN, VAL, TEST = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    m: int = 2
    d: int = 100
    density: float | tuple[float, ...] = 0.003
    weight_dist: str = "uniform"
    treatment_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.density, (list, tuple)):
            object.__setattr__(self, "density", tuple(float(x) for x in self.density))
        for name in ("n", "m", "d"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        dens = self.densities
        if len(dens) != self.m:
            raise ValueError(f"density: expected {self.m} per-view values, got {len(dens)}")
        if any(not 0.0 <= p <= 1.0 for p in dens):
            raise ValueError(f"density must lie in [0, 1], got {self.density!r}")
        if self.weight_dist not in WEIGHT_DISTS:
            raise ValueError(f"weight_dist must be one of {WEIGHT_DISTS}, got {self.weight_dist!r}")
        if self.treatment_noise < 0:
            raise ValueError(f"treatment_noise must be >= 0, got {self.treatment_noise}")

    @property
    def densities(self) -> tuple[float, ...]:
        if isinstance(self.density, tuple):
            return self.density
        return (float(self.density),) * self.m

    def to_dict(self) -> dict:
        return asdict(self)


class SimWeights(NamedTuple):
    """Every random draw behind the outcome model, kept for oracle replay.

    ``pair1[v]`` and ``pair2[v]`` hold one weight row per directed edge of view
    ``v`` in the view's CSR order (row i, then its sorted neighbours).
    """

    w0: np.ndarray
    w1: np.ndarray
    w_t: np.ndarray
    e: np.ndarray
    pair1: tuple[np.ndarray, ...]
    pair2: tuple[np.ndarray, ...]
    noise: np.ndarray
    treatment_noise: np.ndarray

    def to_named(self) -> dict[str, np.ndarray]:
        out = {
            "w0": self.w0,
            "w1": self.w1,
            "w_t": self.w_t,
            "e": self.e,
            "noise": self.noise,
            "treatment_noise": self.treatment_noise,
        }
        for v, (a, b) in enumerate(zip(self.pair1, self.pair2)):
            out[f"view{v}.pair1"] = a
            out[f"view{v}.pair2"] = b
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray]) -> "SimWeights":
        m = len(named["e"])
        return cls(
            named["w0"],
            named["w1"],
            named["w_t"],
            named["e"],
            tuple(named[f"view{v}.pair1"].reshape(-1, len(named["w0"]) + 1) for v in range(m)),
            tuple(named[f"view{v}.pair2"].reshape(-1) for v in range(m)),
            named["noise"],
            named["treatment_noise"],
        )


class Components(NamedTuple):
    base: np.ndarray  # w0.x
    effect: np.ndarray  # w1.x, the true ITE
    spill1: np.ndarray
    spill2: np.ndarray
    noise: np.ndarray


@dataclass
class Dataset:
    graph: HeteroGraph
    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    Y0: np.ndarray | None = None
    Y1: np.ndarray | None = None
    tau: np.ndarray | None = None
    split: np.ndarray | None = None
    weights: SimWeights | None = None
    config: SimConfig | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def indices(self, which: str | int) -> np.ndarray:
        code = SPLIT_NAMES.index(which) if isinstance(which, str) else which
        return np.flatnonzero(self.split == code)


def _rngs(seed: int, *names: str) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def _draw(rng: np.random.Generator, dist: str, size) -> np.ndarray:
    if dist == "gaussian":
        return rng.standard_normal(size)
    return rng.random(size)


# ------------------------------------------------------------------ graph


def _sample_view(n: int, p: float, rng: np.random.Generator) -> ViewGraph:
    total = n * (n - 1) // 2
    k = int(rng.binomial(total, p)) if total else 0
    picks = np.sort(rng.choice(total, size=k, replace=False)) if k else np.zeros(0, np.int64)
    # pair index -> (i, j), i < j, in row-major upper-triangle order
    starts = np.arange(n) * n - np.arange(n) * (np.arange(n) + 1) // 2
    i = np.searchsorted(starts, picks, side="right") - 1
    j = picks - starts[i] + i + 1
    return ViewGraph.from_edges(n, np.stack([i, j], axis=1))


def gen_graph(cfg: SimConfig, seed: int | None = None) -> HeteroGraph:
    """Independent uniform random graphs G(n, p_v), one per view."""
    seed = cfg.seed if seed is None else seed
    children = np.random.SeedSequence([seed, 0x6A]).spawn(cfg.m)
    return HeteroGraph(
        tuple(_sample_view(cfg.n, p, np.random.default_rng(c)) for p, c in zip(cfg.densities, children))
    )


# ------------------------------------------------------------------ treatments


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def treatment_probability(X: np.ndarray, w_t: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return np.clip(sigmoid(X @ w_t) + eps, 0.0, 1.0)


def gen_treatments(
    X: np.ndarray, w_t: np.ndarray, noise: float, seed: int | np.random.Generator
) -> np.ndarray:
    """t_i ~ Bernoulli(clip(sigmoid(x_i.w_t) + eps_i, 0, 1)), eps_i ~ N(0, noise^2)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = noise * rng.standard_normal(X.shape[0])
    p = treatment_probability(X, w_t, eps)
    return (rng.random(X.shape[0]) < p).astype(np.float64)


# ------------------------------------------------------------------ spillover


def _agg(values: np.ndarray, g: HeteroGraph, e: np.ndarray, pair_w: Sequence[np.ndarray]) -> np.ndarray:
    """sum_v e^v * mean_{j in N_i^v} w_ij . c_j; empty neighbourhoods add 0."""
    out = np.zeros(g.n)
    C = values if values.ndim == 2 else values[:, None]
    for v, view in enumerate(g.views):
        rows, cols = view.coo()
        w = pair_w[v].reshape(len(rows), C.shape[1])
        per_edge = np.einsum("ek,ek->e", w, C[cols])
        sums = np.bincount(rows, weights=per_edge, minlength=g.n)
        deg = view.degrees()
        out += e[v] * np.divide(sums, deg, out=np.zeros(g.n), where=deg > 0)
    return out


def spillover(X: np.ndarray, T: np.ndarray, g: HeteroGraph, weights: SimWeights, hops: int) -> np.ndarray:
    """1-hop (hops=1) or 2-hop (hops=2) spillover term for every unit."""
    if hops not in (1, 2):
        raise ValueError(f"hops must be 1 or 2, got {hops}")
    o1 = _agg(np.column_stack([X, T]), g, weights.e, weights.pair1)
    if hops == 1:
        return o1
    return _agg(o1, g, weights.e, weights.pair2)


def draw_weights(
    cfg: SimConfig, g: HeteroGraph, rng: np.random.Generator, w_t: np.ndarray, treatment_noise: np.ndarray
) -> SimWeights:
    d = cfg.d
    w0 = _draw(rng, cfg.weight_dist, d)
    w1 = _draw(rng, cfg.weight_dist, d)
    e = _draw(rng, cfg.weight_dist, cfg.m)
    pair1 = tuple(_draw(rng, cfg.weight_dist, (len(view.indices), d + 1)) for view in g.views)
    pair2 = tuple(_draw(rng, cfg.weight_dist, len(view.indices)) for view in g.views)
    noise = rng.standard_normal(cfg.n)
    return SimWeights(w0, w1, w_t, e, pair1, pair2, noise, treatment_noise)


def outcome_components(X: np.ndarray, T: np.ndarray, g: HeteroGraph, weights: SimWeights) -> Components:
    return Components(
        base=X @ weights.w0,
        effect=X @ weights.w1,
        spill1=spillover(X, T, g, weights, 1),
        spill2=spillover(X, T, g, weights, 2),
        noise=weights.noise,
    )


def potential_outcomes(c: Components) -> tuple[np.ndarray, np.ndarray]:
    y0 = c.base + c.spill1 + c.spill2 + c.noise
    return y0, y0 + c.effect


def simulate_outcomes(
    X: np.ndarray,
    T: np.ndarray,
    g: HeteroGraph,
    cfg: SimConfig,
    seed: int | np.random.Generator | None = None,
    weights: SimWeights | None = None,
) -> Dataset:
    """Outcomes for given (X, T, graph). Pass ``weights`` to replay a draw."""
    if weights is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        weights = draw_weights(cfg, g, rng, np.zeros(cfg.d), np.zeros(cfg.n))
    comp = outcome_components(X, T, g, weights)
    y0, y1 = potential_outcomes(comp)
    Y = np.where(T == 1, y1, y0)
    # defined as the difference so tau == Y1 - Y0 holds bit-for-bit; equals w1.x up to rounding
    return Dataset(g, X, T, Y, y0, y1, y1 - y0, None, weights, cfg)


def simulate(cfg: SimConfig) -> Dataset:
    """Full synthetic dataset: graph, covariates, treatments, outcomes, splits."""
    from .train import split

    rngs = _rngs(cfg.seed, "covariates", "treatment", "outcome", "split")
    g = gen_graph(cfg)
    X = rngs["covariates"].standard_normal((cfg.n, cfg.d))
    rt = rngs["treatment"]
    w_t = rt.uniform(-1.0, 1.0, cfg.d)
    eps_t = cfg.treatment_noise * rt.standard_normal(cfg.n)
    T = (rt.random(cfg.n) < treatment_probability(X, w_t, eps_t)).astype(np.float64)
    weights = draw_weights(cfg, g, rngs["outcome"], w_t, eps_t)
    ds = simulate_outcomes(X, T, g, cfg, weights=weights)
    ds.split = split(cfg.n, seed=int(rngs["split"].integers(2**63 - 1)))
    return ds


# ------------------------------------------------------------------ bundle


def save_dataset(ds: Dataset, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n, d = ds.X.shape
    io.write_csv(out / "covariates.csv", ["unit", *[f"x{k}" for k in range(d)]],
                 ([i, *ds.X[i]] for i in range(n)))
    io.write_csv(out / "treatments.csv", ["unit", "t"], ([i, int(ds.T[i])] for i in range(n)))
    optional = {"y0": ds.Y0, "y1": ds.Y1, "tau": ds.tau}
    extra = [k for k, a in optional.items() if a is not None]
    arrays = [ds.Y] + [optional[k] for k in extra]
    io.write_csv(out / "outcomes.csv", ["unit", "y", *extra], ([i, *(a[i] for a in arrays)] for i in range(n)))
    save_edges(ds.graph, out / "edges.txt")
    if ds.weights is not None:
        io.save_named(out / "sim_weights.npz", ds.weights.to_named())
    manifest = {
        "kind": "dataset",
        "n": n,
        "m": ds.graph.m,
        "d": d,
        "seed": ds.config.seed if ds.config else None,
        "sim_config": ds.config.to_dict() if ds.config else None,
        "splits": {name: ds.indices(name).tolist() for name in SPLIT_NAMES} if ds.split is not None else None,
        "files": {
            "covariates": "covariates.csv",
            "treatments": "treatments.csv",
            "outcomes": "outcomes.csv",
            "edges": "edges.txt",
            "weights": "sim_weights.npz" if ds.weights is not None else None,
        },
    }
    manifest.update(ds.meta)
    io.write_json(out / "manifest.json", manifest)


def _column_table(path: Path) -> dict[str, np.ndarray]:
    header, rows = io.read_csv(path)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: data[:, k] for k, name in enumerate(header)}


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    man = io.read_json(path / "manifest.json")
    n, m, d = int(man["n"]), int(man["m"]), int(man["d"])
    files = man["files"]
    cov = _column_table(path / files["covariates"])
    X = np.column_stack([cov[f"x{k}"] for k in range(d)]) if d else np.zeros((n, 0))
    T = _column_table(path / files["treatments"])["t"]
    out = _column_table(path / files["outcomes"])
    if X.shape != (n, d) or T.shape != (n,):
        raise ValueError(f"bundle tables disagree with manifest n={n}, d={d}")
    g = load_edges(path / files["edges"], n, m)
    split = None
    if man.get("splits"):
        split = np.full(n, -1, dtype=np.int64)
        for code, name in enumerate(SPLIT_NAMES):
            split[np.asarray(man["splits"][name], dtype=np.int64)] = code
    weights = None
    if files.get("weights"):
        weights = SimWeights.from_named(io.load_named(path / files["weights"]))
    cfg = SimConfig(**man["sim_config"]) if man.get("sim_config") else None
    return Dataset(g, X, T, out["y"], out.get("y0"), out.get("y1"), out.get("tau"), split, weights, cfg)
