"""HINITE network: covariate map, stacked HIA layers, twin outcome heads.

Parameters live in a flat ``dict[str, Tensor]`` keyed by module path
(``phi.0.weight``, ``psi.1.view0.W``, ``head1.2.bias`` ...). The forward
functions are plain functions over that dict so tests can poke at any stage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

from .graph import HeteroGraph, ViewGraph
from .tensor import (
    LEAKY_SLOPE,
    Tensor,
    concat,
    dropout,
    gather,
    leaky_relu,
    matmul,
    mul,
    parameter,
    relu,
    segment_softmax,
    spmm,
    tensor,
)

Params = dict[str, Tensor]

INTERFERENCE_KINDS = ("hia", "gcn", "mgcn_concat", "mgcn_mean", "none")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_views: int = 2
    phi_dims: tuple[int, ...] = (128, 64, 64)
    hia_dims: tuple[int, ...] = (64, 64, 32)
    head_dims: tuple[int, ...] = (128, 64, 32)
    view_att_dims: tuple[int, ...] = (128, 128, 64)
    dropout: float = 0.1
    leaky_slope: float = LEAKY_SLOPE
    gamma: float = 0.1
    interference: str = "hia"
    view_attention_scope: str = "unit"

    def __post_init__(self):
        # JSON round-trips hand us lists
        for name in ("phi_dims", "hia_dims", "head_dims", "view_att_dims"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        dims = (self.input_dim, self.num_views, *self.phi_dims, *self.hia_dims, *self.head_dims)
        if any(d <= 0 for d in dims) or not self.phi_dims or not self.head_dims:
            raise ValueError("all model dimensions must be positive")
        if self.interference not in INTERFERENCE_KINDS:
            raise ValueError(f"interference must be one of {INTERFERENCE_KINDS}, got {self.interference!r}")
        if self.interference == "hia" and len(self.view_att_dims) != len(self.hia_dims):
            raise ValueError("need one view-attention dim per HIA layer")
        if self.view_attention_scope not in ("unit", "global"):
            raise ValueError(f"view_attention_scope must be 'unit' or 'global', got {self.view_attention_scope!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    @property
    def num_layers(self) -> int:
        return len(self.hia_dims)

    @property
    def rep_dim(self) -> int:
        return self.phi_dims[-1]

    @property
    def interference_dim(self) -> int:
        if self.interference == "none":
            return 0
        if self.interference == "mgcn_concat":
            return self.hia_dims[-1] * self.num_views
        return self.hia_dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class Representations(NamedTuple):
    U: Tensor
    G: Tensor | None


# ------------------------------------------------------------------ init


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=name)


def _zeros(size: int, name: str) -> Tensor:
    return parameter(np.zeros(size), name=name)


def _init_mlp(params: Params, prefix: str, dims: list[int], rng) -> None:
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}.{k}.weight"] = _glorot(rng, a, b, f"{prefix}.{k}.weight")
        params[f"{prefix}.{k}.bias"] = _zeros(b, f"{prefix}.{k}.bias")


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    _init_mlp(params, "phi", [cfg.input_dim, *cfg.phi_dims], rng)

    if cfg.interference != "none":
        in_dim = cfg.rep_dim + 1
        views = 1 if cfg.interference == "gcn" else cfg.num_views
        for layer, out_dim in enumerate(cfg.hia_dims):
            for v in range(views):
                key = f"psi.{layer}.W" if cfg.interference == "gcn" else f"psi.{layer}.view{v}.W"
                params[key] = _glorot(rng, in_dim, out_dim, key)
                if cfg.interference == "hia":
                    key = f"psi.{layer}.view{v}.a"
                    params[key] = _glorot(rng, 2 * out_dim, 1, key)
            if cfg.interference == "hia":
                att = cfg.view_att_dims[layer]
                params[f"psi.{layer}.att.W"] = _glorot(rng, out_dim, att, f"psi.{layer}.att.W")
                params[f"psi.{layer}.att.b"] = _zeros(att, f"psi.{layer}.att.b")
                params[f"psi.{layer}.att.q"] = _glorot(rng, att, 1, f"psi.{layer}.att.q")
            in_dim = out_dim

    head_in = cfg.rep_dim + cfg.interference_dim
    for t in (0, 1):
        _init_mlp(params, f"head{t}", [head_in, *cfg.head_dims, 1], rng)
    return params


def check_params(cfg: ModelConfig, params: Params) -> None:
    expected = init_params(cfg, np.random.default_rng(0))
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter names differ from config: missing={missing} extra={extra}")
    for k, p in expected.items():
        if params[k].shape != p.shape:
            raise ShapeError(f"{k}: expected shape {p.shape}, got {params[k].shape}")


# ------------------------------------------------------------------ feed-forward pieces


def _mlp(
    x: Tensor,
    params: Params,
    prefix: str,
    depth: int,
    rate: float,
    training: bool,
    rng,
    last_linear: bool,
) -> Tensor:
    for k in range(depth):
        x = matmul(x, params[f"{prefix}.{k}.weight"]) + params[f"{prefix}.{k}.bias"]
        if last_linear and k == depth - 1:
            break
        x = dropout(relu(x), rate, rng, training)
    return x


def phi_forward(X, params: Params, cfg: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Covariate representations U = phi(X): ReLU feed-forward stack with dropout."""
    X = X if isinstance(X, Tensor) else tensor(X)
    if X.values.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ShapeError(f"X has shape {X.shape}, config expects (n, {cfg.input_dim})")
    return _mlp(X, params, "phi", len(cfg.phi_dims), cfg.dropout, training, rng, last_linear=False)


def _head(H: Tensor, params: Params, t: int, cfg: ModelConfig, training: bool, rng) -> Tensor:
    out = _mlp(H, params, f"head{t}", len(cfg.head_dims) + 1, cfg.dropout, training, rng, last_linear=True)
    return out.reshape(H.shape[0])


# ------------------------------------------------------------------ HIA layer


class Attention(NamedTuple):
    weights: Tensor  # one entry per (row, col) pair of the view incl. self-edges
    rows: np.ndarray
    cols: np.ndarray
    projected: Tensor  # W p for every unit


def node_attention(
    P: Tensor, g: HeteroGraph, v: int, params: Params, layer: int, slope: float = LEAKY_SLOPE
) -> Attention:
    """Edge weights over N_i^v + {i}: softmax_j LeakyReLU(a^T [W p_i || W p_j])."""
    W = params[f"psi.{layer}.view{v}.W"]
    a = params[f"psi.{layer}.view{v}.a"]
    rows, cols = _attention_index(g.views[v])
    WP = matmul(P, W)
    d = W.shape[1]
    a_self = gather(a, np.arange(d))
    a_nbr = gather(a, np.arange(d, 2 * d))
    s_self = matmul(WP, a_self).reshape(g.n)
    s_nbr = matmul(WP, a_nbr).reshape(g.n)
    logits = leaky_relu(gather(s_self, rows) + gather(s_nbr, cols), slope)
    return Attention(segment_softmax(logits, rows, g.n), rows, cols, WP)


def node_aggregate(
    P: Tensor, att: Attention, g: HeteroGraph, v: int, params: Params, layer: int
) -> Tensor:
    """p_i^{v'} = ReLU(sum_j alpha_ij W p_j) over N_i^v + {i}."""
    WP = att.projected if att.projected is not None else matmul(P, params[f"psi.{layer}.view{v}.W"])
    return relu(spmm(att.weights, att.rows, att.cols, g.n, WP))


def view_scores(
    views: list[Tensor], params: Params, layer: int, slope: float = LEAKY_SLOPE, scope: str = "unit"
) -> Tensor:
    """View scores q^T LeakyReLU(W_att p_i^{v'} + b).

    ``scope="unit"`` keeps one score per (unit, view), shape (n, m).
    ``scope="global"`` averages over units first, shape (m,).
    """
    W = params[f"psi.{layer}.att.W"]
    b = params[f"psi.{layer}.att.b"]
    q = params[f"psi.{layer}.att.q"]
    per_unit = [matmul(leaky_relu(matmul(p, W) + b, slope), q) for p in views]
    if scope == "global":
        return concat([s.mean().reshape(1) for s in per_unit], axis=0)
    if scope != "unit":
        raise ValueError(f"view attention scope must be 'unit' or 'global', got {scope!r}")
    return concat(per_unit, axis=1)


def view_softmax(w: Tensor) -> Tensor:
    """Softmax over the last axis of (m,) or (n, m) view scores."""
    if w.values.ndim == 1:
        return segment_softmax(w, np.zeros(w.shape[0], dtype=np.int64), 1)
    n, m = w.shape
    flat = segment_softmax(w.reshape(n * m), np.repeat(np.arange(n), m), n)
    return flat.reshape(n, m)


def view_attention(
    views: list[Tensor], params: Params, layer: int, slope: float = LEAKY_SLOPE, scope: str = "unit"
) -> Tensor:
    """View weights beta, summing to 1 over views (per unit for the unit scope)."""
    return view_softmax(view_scores(views, params, layer, slope, scope))


def view_aggregate(views: list[Tensor], beta) -> Tensor:
    """z_i = sum_v beta_i^v p_i^{v'}; a 1-d beta is shared by every unit."""
    beta = beta if isinstance(beta, Tensor) else tensor(beta)
    m = len(views)
    out = None
    for v, p in enumerate(views):
        if beta.values.ndim == 1:
            weight = gather(beta, np.array([v]))
        else:
            n = beta.shape[0]
            weight = gather(beta.reshape(n * m), np.arange(n) * m + v).reshape(n, 1)
        term = mul(p, weight)
        out = term if out is None else out + term
    return out


class LayerTrace(NamedTuple):
    attention: list[Attention]
    beta: Tensor


def hia_layer(
    P: Tensor, g: HeteroGraph, params: Params, layer: int, slope: float = LEAKY_SLOPE, scope: str = "unit"
):
    atts, aggregated = [], []
    for v in range(g.m):
        att = node_attention(P, g, v, params, layer, slope)
        atts.append(att)
        aggregated.append(node_aggregate(P, att, g, v, params, layer))
    beta = view_attention(aggregated, params, layer, slope, scope)
    return view_aggregate(aggregated, beta), LayerTrace(atts, beta)


def _gcn_layer(P: Tensor, view: ViewGraph, W: Tensor) -> Tensor:
    rows, cols, vals = _gcn_norm(view)
    return relu(spmm(vals, rows, cols, view.n, matmul(P, W)))


def psi_forward(
    U: Tensor,
    T,
    g: HeteroGraph,
    params: Params,
    cfg: ModelConfig,
    training: bool = False,
    trace: list | None = None,
) -> Tensor | None:
    """Interference representations G = psi(U, T, H).

    The first layer sees [u_i || t_i]; each HIA layer's output feeds every
    view of the next layer. ``trace`` collects per-layer attention if given.
    """
    if cfg.interference == "none":
        return None
    T = T if isinstance(T, Tensor) else tensor(np.asarray(T, dtype=np.float64))
    if T.shape != (U.shape[0],):
        raise ShapeError(f"T has shape {T.shape}, expected ({U.shape[0]},)")
    if cfg.interference in ("hia", "mgcn_concat", "mgcn_mean") and g.m != cfg.num_views:
        raise ShapeError(f"graph has {g.m} views, config expects {cfg.num_views}")
    P = concat([U, T.reshape(U.shape[0], 1)], axis=1)

    if cfg.interference == "hia":
        for layer in range(cfg.num_layers):
            P, info = hia_layer(P, g, params, layer, cfg.leaky_slope, cfg.view_attention_scope)
            if trace is not None:
                trace.append(info)
        return P

    if cfg.interference == "gcn":
        if g.m != 1:
            raise ShapeError(f"gcn interference expects a single-view graph, got {g.m} views")
        for layer in range(cfg.num_layers):
            P = _gcn_layer(P, g.views[0], params[f"psi.{layer}.W"])
        return P

    outs = []
    for v, view in enumerate(g.views):
        H = P
        for layer in range(cfg.num_layers):
            H = _gcn_layer(H, view, params[f"psi.{layer}.view{v}.W"])
        outs.append(H)
    if cfg.interference == "mgcn_concat":
        return concat(outs, axis=1)
    total = outs[0]
    for h in outs[1:]:
        total = total + h
    return mul(total, 1.0 / len(outs))


# ------------------------------------------------------------------ outcomes


def _head_input(U: Tensor, G: Tensor | None) -> Tensor:
    return U if G is None else concat([U, G], axis=1)


def predict(
    U: Tensor, G: Tensor | None, T, params: Params, cfg: ModelConfig, training: bool = False, rng=None
) -> Tensor:
    """Factual predictions y_i = f_{y_{t_i}}([u_i || g_i])."""
    H = _head_input(U, G)
    t = np.asarray(T.values if isinstance(T, Tensor) else T, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("treatments must be 0/1")
    # route each unit through its factual head only, then undo the grouping
    treated = np.flatnonzero(t == 1)
    control = np.flatnonzero(t == 0)
    parts = [
        _head(gather(H, idx), params, arm, cfg, training, rng)
        for arm, idx in ((0, control), (1, treated))
        if len(idx)
    ]
    order = np.concatenate([control, treated])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    return gather(concat(parts, axis=0), inverse)


def head_outputs(U: Tensor, G: Tensor | None, params: Params, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    H = _head_input(U, G)
    return (
        _head(H, params, 0, cfg, False, None).values,
        _head(H, params, 1, cfg, False, None).values,
    )


def estimate_ite(U: Tensor, G: Tensor | None, params: Params, cfg: ModelConfig) -> np.ndarray:
    """tau_hat_i = f_{y1}(u_i, g_i) - f_{y0}(u_i, g_i) with dropout off."""
    y0, y1 = head_outputs(U, G, params, cfg)
    return y1 - y0


def represent(X, T, g: HeteroGraph, params: Params, cfg: ModelConfig, training: bool = False, rng=None) -> Representations:
    U = phi_forward(X, params, cfg, training, rng)
    return Representations(U, psi_forward(U, T, g, params, cfg, training))


# ------------------------------------------------------------------ cached graph indices


def _attention_index(view: ViewGraph) -> tuple[np.ndarray, np.ndarray]:
    cache = view.__dict__.setdefault("_cache", {})
    if "att" not in cache:
        cache["att"] = view.coo(self_loops=True)
    return cache["att"]


def _gcn_norm(view: ViewGraph):
    cache = view.__dict__.setdefault("_cache", {})
    if "gcn" not in cache:
        cache["gcn"] = view.normalized_adjacency()
    return cache["gcn"]
