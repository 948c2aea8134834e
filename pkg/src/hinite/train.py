"""Loss, Adam, splits and the training loop with early stopping."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from .balance import hsic
from .graph import HeteroGraph
from .model import ModelConfig, Params, init_params, phi_forward, predict, psi_forward
from .tensor import Tensor, backward, gather, mean, mul, sub, tensor

if TYPE_CHECKING:
    from .simulate import Dataset

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 512
    max_iter: int = 2000
    patience: int = 50
    eval_interval: int = 10
    seed: int = 0
    gamma_grid: tuple[float, ...] | None = None
    standardize_y: bool = True

    def __post_init__(self):
        if self.gamma_grid is not None:
            object.__setattr__(self, "gamma_grid", tuple(float(g) for g in self.gamma_grid))
            if not self.gamma_grid or any(g < 0 for g in self.gamma_grid):
                raise ValueError("gamma_grid must be a non-empty list of values >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.batch_size <= 0 or self.patience <= 0 or self.eval_interval <= 0:
            raise ValueError("batch_size, patience and eval_interval must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# ------------------------------------------------------------------ splits


def split(n: int, ratios: tuple[float, float, float] = (0.70, 0.15, 0.15), seed: int = 0) -> np.ndarray:
    """Label units 0/1/2 (train/val/test); val/test sizes floor, remainder to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    labels = np.full(n, TRAIN, dtype=np.int64)
    labels[order[n - n_val - n_test : n - n_test]] = VAL
    labels[order[n - n_test :]] = TEST
    return labels


# ------------------------------------------------------------------ loss


def loss(y_hat: Tensor, y, U_batch: Tensor, T_batch, gamma: float) -> Tensor:
    """Factual MSE plus gamma * HSIC(U, T) over the batch."""
    return objective(y_hat, y, U_batch, T_batch, gamma)[0]


def objective(y_hat: Tensor, y, U_batch: Tensor, T_batch, gamma: float) -> tuple[Tensor, Tensor | None]:
    """Like :func:`loss` but also hands back the HSIC node (None when gamma is 0)."""
    resid = sub(y_hat, np.asarray(y, dtype=np.float64))
    mse = mean(mul(resid, resid))
    if gamma == 0:
        return mse, None
    h = hsic(U_batch, T_batch)
    return mse + mul(h, gamma), h


# ------------------------------------------------------------------ Adam


@dataclass
class TrainState:
    params: Params
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p.values))
            self.v.setdefault(k, np.zeros_like(p.values))


ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> TrainState:
    """One Adam update in place, L2 weight decay folded into the gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    c1 = 1.0 - ADAM_B1**state.step
    c2 = 1.0 - ADAM_B2**state.step
    for name, p in state.params.items():
        g = grads.get(name)
        g = np.zeros_like(p.values) if g is None else g
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.values
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g * g
        p.values -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


# ------------------------------------------------------------------ loop


class HistoryRow(NamedTuple):
    iteration: int
    train_loss: float
    hsic: float
    val_mse: float


@dataclass
class TrainResult:
    params: Params
    history: list[HistoryRow]
    best_iteration: int
    iterations_run: int
    gamma: float
    y_mean: float = 0.0
    y_std: float = 1.0
    stopped_early: bool = False


@dataclass(frozen=True)
class TrainingData:
    """What the training loop may see: test outcomes are masked with NaN."""

    graph: HeteroGraph
    X: np.ndarray
    T: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    @classmethod
    def from_dataset(cls, ds: "Dataset") -> "TrainingData":
        if ds.split is None:
            raise ValueError("dataset has no train/val split")
        train_idx = np.flatnonzero(ds.split == TRAIN)
        val_idx = np.flatnonzero(ds.split == VAL)
        if len(train_idx) == 0 or len(val_idx) == 0:
            raise ValueError("dataset needs non-empty train and val splits")
        y = np.full(ds.n, np.nan)
        y[train_idx] = ds.Y[train_idx]
        y[val_idx] = ds.Y[val_idx]
        return cls(ds.graph, ds.X, ds.T, y, train_idx, val_idx)


def snapshot(params: Params) -> dict[str, np.ndarray]:
    return {k: p.values.copy() for k, p in params.items()}


def restore(params: Params, values: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.values[...] = values[k]


def factual_predictions(params: Params, cfg: ModelConfig, data: TrainingData) -> np.ndarray:
    U = phi_forward(data.X, params, cfg, training=False)
    G = psi_forward(U, data.T, data.graph, params, cfg, training=False)
    return predict(U, G, data.T, params, cfg, training=False).values


def _eval_row(params, cfg, data, y_std_target, y_mean, y_std, gamma, iteration) -> HistoryRow:
    pred = factual_predictions(params, cfg, data)
    tr, va = data.train_idx, data.val_idx
    train_mse = float(np.mean((pred[tr] - y_std_target[tr]) ** 2))
    h = 0.0
    if gamma:
        U = phi_forward(data.X[tr], params, cfg, training=False)
        h = float(hsic(U, data.T[tr]).values)
    val = float(np.mean((pred[va] * y_std + y_mean - data.y[va]) ** 2))
    return HistoryRow(iteration, train_mse + gamma * h, h, val)


def _train_once(
    data: TrainingData, cfg: ModelConfig, tcfg: TrainConfig, params: Params | None = None
) -> TrainResult:
    seeds = np.random.SeedSequence([tcfg.seed, 0x7124]).spawn(3)
    init_rng, batch_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    if params is None:
        params = init_params(cfg, init_rng)
    gamma = cfg.gamma

    y_tr = data.y[data.train_idx]
    if tcfg.standardize_y:
        y_mean = float(y_tr.mean())
        y_std = float(y_tr.std()) or 1.0
    else:
        y_mean, y_std = 0.0, 1.0
    target = (data.y - y_mean) / y_std

    state = TrainState(params)
    X = tensor(data.X)
    T = data.T
    history = [_eval_row(params, cfg, data, target, y_mean, y_std, gamma, 0)]
    best_val, best_iter, best = history[0].val_mse, 0, snapshot(params)
    stale, stopped = 0, False
    running = []
    it = 0
    for it in range(1, tcfg.max_iter + 1):
        k = min(tcfg.batch_size, len(data.train_idx))
        batch = np.sort(batch_rng.choice(data.train_idx, size=k, replace=False))
        if cfg.interference == "none":
            # units are independent without an interference module
            Ub, Gb = phi_forward(X.values[batch], params, cfg, training=True, rng=drop_rng), None
        else:
            U = phi_forward(X, params, cfg, training=True, rng=drop_rng)
            G = psi_forward(U, T, data.graph, params, cfg, training=True)
            Ub, Gb = gather(U, batch), gather(G, batch)
        y_hat = predict(Ub, Gb, T[batch], params, cfg, training=True, rng=drop_rng)
        total, h = objective(y_hat, target[batch], Ub, T[batch], gamma)
        value = float(total.values)
        if not np.isfinite(value):
            raise TrainingDiverged(it, f"loss={value}")
        backward(total, params.values())
        try:
            adam_step(state, {k_: p.grad for k_, p in params.items()}, tcfg)
        except NonFiniteGradient as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        running.append((value, 0.0 if h is None else float(h.values)))

        if it % tcfg.eval_interval == 0 or it == tcfg.max_iter:
            row = _eval_row(params, cfg, data, target, y_mean, y_std, gamma, it)
            avg_loss = float(np.mean([r[0] for r in running]))
            avg_h = float(np.mean([r[1] for r in running]))
            running.clear()
            history.append(HistoryRow(it, avg_loss, avg_h, row.val_mse))
            if not np.isfinite(row.val_mse):
                raise TrainingDiverged(it, "validation MSE is not finite")
            if row.val_mse < best_val:
                best_val, best_iter, best = row.val_mse, it, snapshot(params)
                stale = 0
            else:
                stale += 1
                if stale >= tcfg.patience:
                    stopped = True
                    log.debug("early stop at %d (best %d)", it, best_iter)
                    break

    restore(params, best)
    for p in params.values():
        p.grad = None
    return TrainResult(params, history, best_iter, it, gamma, y_mean, y_std, stopped)


def train(
    dataset: "Dataset | TrainingData",
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: Params | None = None,
) -> TrainResult:
    """Train on the train split, early-stopping on validation factual MSE.

    With ``train_cfg.gamma_grid`` set (and gamma > 0 in ``model_cfg``) one
    model is trained per gamma and the best validation MSE wins.
    """
    data = dataset if isinstance(dataset, TrainingData) else TrainingData.from_dataset(dataset)
    if train_cfg.gamma_grid is None or model_cfg.gamma == 0:
        return _train_once(data, model_cfg, train_cfg, params)
    best = None
    for gamma in train_cfg.gamma_grid:
        result = _train_once(data, model_cfg.with_(gamma=gamma), train_cfg)
        val = min(r.val_mse for r in result.history)
        if best is None or val < best[0]:
            best = (val, result)
    return best[1]


def ite(result: TrainResult, cfg: ModelConfig, data: "Dataset | TrainingData") -> np.ndarray:
    """Estimated ITE for every unit, in outcome units."""
    from .model import estimate_ite

    U = phi_forward(data.X, result.params, cfg, training=False)
    G = psi_forward(U, data.T, data.graph, result.params, cfg, training=False)
    return estimate_ite(U, G, result.params, cfg) * result.y_std
