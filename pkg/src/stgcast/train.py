"""Loss, normalization, Adam, the training loop, model gradient checks and grid sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import WindowedDataset, chronological_split
from .fileio import atomic_open
from .errors import ContractError, DegenerateStatsError, NumericFaultError, ShapeError
from .evaluation import mae, mape, rmse
from .graph import DetectorGraph, normalized_adjacency
from .nn import GCGRU, LSTM, MEAN_READOUT, NODE_READOUT, ModelConfig, build_model
from .seeding import rng_stream
from .tensor import Variable

logger = logging.getLogger(__name__)

MAX_GRID = 256


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    lambda_reg: float = 0.0015
    split: float = 0.8
    hidden: int = 64
    gc_hidden: int = 16
    gc_out: int = 8
    k_hops: int = 1
    seed: int = 42
    early_stop_patience: int = 10
    clip_norm: float = 5.0
    regularize_biases: bool = False
    strict_no_leak: bool = False
    t_in: int = 36
    t_out: int = 12
    model_kind: str = GCGRU
    readout: str = NODE_READOUT
    input_skip: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.early_stop_patience < 1:
            raise ContractError("batch_size and patience must be >= 1, epochs >= 0")
        if not 0.0 < self.split < 1.0:
            raise ContractError(f"split must be in (0, 1), got {self.split}")
        if self.lambda_reg < 0:
            raise ContractError("lambda_reg must be nonnegative")
        if min(self.hidden, self.gc_hidden, self.gc_out, self.k_hops, self.t_in, self.t_out) < 1:
            raise ContractError("dimensions and k_hops must be positive")
        if self.model_kind not in (GCGRU, LSTM):
            raise ContractError(f"unknown model kind {self.model_kind!r}")
        if self.readout not in (NODE_READOUT, MEAN_READOUT):
            raise ContractError(f"unknown readout {self.readout!r}")

    def model_config(self, d: int) -> ModelConfig:
        return ModelConfig(d=d, t_in=self.t_in, t_out=self.t_out, hidden=self.hidden,
                           gc_hidden=self.gc_hidden, gc_out=self.gc_out, k_hops=self.k_hops,
                           kind=self.model_kind, readout=self.readout,
                           input_skip=self.input_skip)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class NormStats:
    min_v: float
    max_v: float

    def __post_init__(self):
        if not self.max_v > self.min_v:
            raise DegenerateStatsError(f"max ({self.max_v}) must exceed min ({self.min_v})")

    @classmethod
    def from_arrays(cls, *arrays) -> "NormStats":
        lo = min(float(np.min(a)) for a in arrays)
        hi = max(float(np.max(a)) for a in arrays)
        return cls(lo, hi)


def normalize(x, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.min_v) / (stats.max_v - stats.min_v)


def denormalize(y, stats: NormStats) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * (stats.max_v - stats.min_v) + stats.min_v


# ---------------------------------------------------------------------------
# loss

def regularized_loss(y_true, y_pred, weights: Sequence[Variable] = (),
                     lam: float = 0.0015) -> Variable:
    """Mean squared error plus ``lam`` times the L1 norm of ``weights``."""
    yt = np.asarray(y_true, dtype=np.float64)
    if not isinstance(y_pred, Variable):
        y_pred = T.constant(np.asarray(y_pred, dtype=np.float64).reshape(yt.shape[0], -1)
                            if yt.ndim else y_pred)
    n = yt.shape[0] if yt.ndim else 1
    yt2 = yt.reshape(n, -1)
    if yt2.shape != y_pred.value.shape:
        raise ShapeError(f"y_true {yt.shape} does not match y_pred {y_pred.value.shape}")
    if yt2.size == 0:
        raise ContractError("loss over an empty batch")
    diff = T.sub(T.constant(yt2), y_pred)
    loss = T.scale(T.sum_all(T.hadamard(diff, diff)), 1.0 / yt2.size)
    if lam and weights:
        penalty = T.abs_sum(weights[0])
        for w in weights[1:]:
            penalty = T.add(penalty, T.abs_sum(w))
        loss = T.add(loss, T.scale(penalty, lam))
    return loss


def regularized_names(model, include_biases: bool = False) -> List[str]:
    return list(model.params) if include_biases else model.weight_names()


def loss_and_grads(model, x, y, lam: float, include_biases: bool = False):
    """One forward/backward pass; returns (loss value, {param name: gradient})."""
    leaves = model.leaves()
    out = model.forward(x, leaves)
    reg = [leaves[n] for n in regularized_names(model, include_biases)]
    loss = regularized_loss(y, out, reg, lam)
    T.backward(loss)
    return float(loss.value[0, 0]), {k: v.grad for k, v in leaves.items()}


def loss_value(model, x, y, lam: float, include_biases: bool = False,
               batch: int = 512) -> float:
    """Regularized loss without gradients, evaluated in chunks."""
    n = x.shape[0]
    sq = 0.0
    for s in range(0, n, batch):
        pred = model.forward(x[s:s + batch]).value
        sq += float(((y[s:s + batch].reshape(pred.shape[0], -1) - pred) ** 2).sum())
    total = sq / y.size
    if lam:
        total += lam * sum(float(np.abs(model.params[k]).sum())
                           for k in regularized_names(model, include_biases))
    return total


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, t: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update, in place on ``params``; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFaultError(f"non-finite gradient for {name!r}")
    state.t = state.t + 1 if t is None else t
    if state.t < 1:
        raise ContractError("Adam step index must be >= 1")
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - BETA1) * g if m is None else BETA1 * m + (1 - BETA1) * g
        v = (1 - BETA2) * g * g if v is None else BETA2 * v + (1 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return params


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class FitResult:
    model: object
    history: List[EpochRecord]
    norm: NormStats
    train_seconds: float
    best_epoch: int


def fit(model, dataset: WindowedDataset, cfg: TrainConfig) -> FitResult:
    """Train on the chronological head of ``dataset``; validate on its tail.

    Returns the parameters with the best validation loss. The holdout only ever
    feeds :func:`loss_value`, never a gradient.
    """
    if len(dataset) == 0:
        raise ContractError("cannot fit on an empty dataset")
    train, val = chronological_split(dataset, cfg.split, cfg.strict_no_leak)
    stats = NormStats.from_arrays(train.x, train.y)
    model.norm = stats
    x_tr = np.ascontiguousarray(normalize(train.x, stats))
    y_tr = np.ascontiguousarray(normalize(train.y, stats))
    x_va = normalize(val.x, stats)
    y_va = normalize(val.y, stats)

    rng = rng_stream(cfg.seed, "shuffle")
    state = AdamState()
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_val = math.inf
    best_epoch = 0
    stale = 0
    history: List[EpochRecord] = []
    n = x_tr.shape[0]
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            loss, grads = loss_and_grads(model, x_tr[idx], y_tr[idx], cfg.lambda_reg,
                                         cfg.regularize_biases)
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad or not math.isfinite(loss):
                raise NumericFaultError(
                    f"epoch {epoch}, batch {b}: non-finite loss/gradients "
                    f"(loss={loss}, params={bad or 'none'})")
            clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, cfg.learning_rate)
            total += loss * len(idx)
        train_loss = total / n
        val_loss = loss_value(model, x_va, y_va, cfg.lambda_reg, cfg.regularize_biases)
        history.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0))
        logger.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                logger.info("early stop after epoch %d (best %d)", epoch, best_epoch)
                break
    model.params = best_params
    return FitResult(model, history, stats, time.perf_counter() - started, best_epoch)


def build_for(dataset: WindowedDataset, cfg: TrainConfig, graph: Optional[DetectorGraph] = None):
    """Fresh model for ``dataset`` with parameters from the ``init`` stream of ``cfg.seed``."""
    mcfg = cfg.model_config(len(dataset.detector_ids))
    a_hat = normalized_adjacency(graph, cfg.k_hops) if graph is not None else None
    return build_model(mcfg, a_hat, rng_stream(cfg.seed, "init"))


def train_model(dataset: WindowedDataset, cfg: TrainConfig,
                graph: Optional[DetectorGraph] = None) -> FitResult:
    return fit(build_for(dataset, cfg, graph), dataset, cfg)


def predict_denormalized(model, x_raw) -> np.ndarray:
    """Raw-unit (n, t_in, d) inputs -> raw-unit (n, t_out, d) forecasts."""
    if model.norm is None:
        raise ContractError("model has no normalization statistics; fit it first")
    pred = model.predict(normalize(x_raw, model.norm))
    if model.config.kind == LSTM:
        pred = np.clip(pred, 0.0, 1.0)
    return denormalize(pred, model.norm)


def holdout_metrics(model, dataset: WindowedDataset, cfg: TrainConfig) -> Dict[str, float]:
    _, val = chronological_split(dataset, cfg.split, cfg.strict_no_leak)
    pred = predict_denormalized(model, val.x)
    return {"val_mape": mape(val.y, pred, mask=val.y_mask),
            "val_mae": mae(val.y, pred, mask=val.y_mask),
            "val_rmse": rmse(val.y, pred, mask=val.y_mask)}


def write_history_csv(history: Sequence[EpochRecord], path, record_timing: bool = False) -> None:
    """``epoch,train_loss,val_loss,seconds``; seconds left blank unless ``record_timing``."""
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss)),
                        repr(float(r.seconds)) if record_timing else ""])


# ---------------------------------------------------------------------------
# gradient check

@dataclass
class GradCheckReport:
    errors: Dict[str, Dict[str, float]]  # pass label -> param -> max relative error
    tolerance: float

    @property
    def max_error(self) -> float:
        return max((e for per in self.errors.values() for e in per.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _bounded_away(params: Dict[str, np.ndarray], names, margin: float) -> Dict[str, np.ndarray]:
    out = {k: v.copy() for k, v in params.items()}
    for k in names:
        w = out[k]
        out[k] = w + margin * np.where(w >= 0, 1.0, -1.0)
    return out


def gradient_check_model(model, x, y, lam: float = 0.0015, h: float = 1e-5,
                         tolerance: float = 1e-4, margin: float = 0.05,
                         include_biases: bool = False) -> GradCheckReport:
    """Compare tape gradients of the loss against central differences, per parameter.

    Two passes: ``lam = 0`` at the given parameters, then ``lam`` at weights shifted
    ``margin`` away from zero so the L1 kink is out of reach of the FD stencil.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    names = regularized_names(model, include_biases)
    passes = {"lambda=0": (0.0, model.params)}
    if lam:
        passes[f"lambda={lam}"] = (lam, _bounded_away(model.params, names, margin))
    errors: Dict[str, Dict[str, float]] = {}
    probe = model.copy()
    for label, (lam_i, params) in passes.items():
        probe.params = {k: v.copy() for k, v in params.items()}
        _, grads = loss_and_grads(probe, x, y, lam_i, include_biases)
        per: Dict[str, float] = {}
        for name in params:
            def f(m, name=name):
                probe.params[name] = m
                leaves = {k: T.constant(v) for k, v in probe.params.items()}
                out = probe.forward(x, leaves)
                reg = [leaves[k] for k in names]
                return float(regularized_loss(y, out, reg, lam_i).value[0, 0])
            numeric = T.finite_difference_gradient(f, params[name], h)
            probe.params[name] = params[name].copy()
            per[name] = T.relative_error(grads[name], numeric)
        errors[label] = per
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# grid search

@dataclass
class GridRow:
    combo_id: int
    params: Dict[str, object]
    val_mape: float
    val_mae: float
    val_rmse: float
    train_seconds: float
    rank: int = 0


_CFG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def expand_grid(grid: Mapping[str, Sequence]) -> List[Dict[str, object]]:
    if not grid:
        raise ContractError("grid is empty")
    unknown = sorted(set(grid) - set(_CFG_FIELDS))
    if unknown:
        raise ContractError(f"unknown grid parameters {unknown}")
    keys = list(grid)
    values = [list(grid[k]) for k in keys]
    if any(len(v) == 0 for v in values):
        raise ContractError("every grid parameter needs at least one value")
    size = math.prod(len(v) for v in values)
    if size > MAX_GRID:
        raise ContractError(f"grid has {size} combinations; the limit is {MAX_GRID}")
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _run_combo(args):
    combo_id, combo, dataset, cfg, graph = args
    ccfg = replace(cfg, **combo)
    result = train_model(dataset, ccfg, graph)
    metrics = holdout_metrics(result.model, dataset, ccfg)
    return GridRow(combo_id, dict(combo), metrics["val_mape"], metrics["val_mae"],
                   metrics["val_rmse"], result.train_seconds)


def grid_search(grid: Mapping[str, Sequence], dataset: WindowedDataset, cfg: TrainConfig,
                graph: Optional[DetectorGraph] = None, jobs: int = 1) -> List[GridRow]:
    """Train every combination with ``cfg.seed``; rows ranked by validation MAPE."""
    combos = expand_grid(grid)
    tasks = [(i, c, dataset, cfg, graph) for i, c in enumerate(combos)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_combo, tasks))
    else:
        rows = [_run_combo(t) for t in tasks]
    rows.sort(key=lambda r: r.combo_id)
    ranked = sorted(rows, key=lambda r: (r.val_mape, r.combo_id))
    for rank, row in enumerate(ranked, start=1):
        row.rank = rank
    return ranked


def write_grid_csv(rows: Sequence[GridRow], path, record_timing: bool = False) -> None:
    keys: List[str] = []
    for r in rows:
        keys.extend(k for k in r.params if k not in keys)
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["combo_id"] + keys + ["val_mape", "val_mae", "val_rmse", "train_seconds"])
        for r in rows:
            w.writerow([r.combo_id] + [r.params.get(k, "") for k in keys]
                       + [repr(r.val_mape), repr(r.val_mae), repr(r.val_rmse),
                          repr(r.train_seconds) if record_timing else ""])
