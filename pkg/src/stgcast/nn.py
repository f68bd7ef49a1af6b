"""GC-GRU encoder-decoder and the LSTM baseline, built on the tape in :mod:`stgcast.tensor`.

Batch layout: a batch of ``n`` samples over ``D`` detectors is processed in one
pass. Per-node quantities (GC features, GRU states) are stacked sample-major
into ``(n*D) x width`` matrices; per-sample quantities (frames, pooled states,
predictions) are ``n x width``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .graph import NormalizedAdjacency
from .tensor import Variable

GCGRU = "gcgru"
LSTM = "lstm"
# GC-GRU head readouts: per-node states read by their own output column, or
# states averaged over nodes before a dense map
NODE_READOUT = "node"
MEAN_READOUT = "mean"


@dataclass(frozen=True)
class ModelConfig:
    d: int
    t_in: int = 36
    t_out: int = 12
    hidden: int = 64
    gc_hidden: int = 16
    gc_out: int = 8
    k_hops: int = 1
    kind: str = GCGRU
    readout: str = NODE_READOUT
    # append each node's raw input value to its GC features before the GRU
    input_skip: bool = False

    @property
    def gru_input(self) -> int:
        return self.gc_out + (1 if self.input_skip else 0)

    def __post_init__(self):
        if self.readout not in (NODE_READOUT, MEAN_READOUT):
            raise ShapeError(f"unknown readout {self.readout!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GCParams:
    w0: Variable
    w1: Variable


@dataclass
class GRUParams:
    w_u: Variable
    w_r: Variable
    w_c: Variable
    b_u: Variable
    b_r: Variable
    b_c: Variable


@dataclass
class LSTMParams:
    w_i: Variable
    w_f: Variable
    w_o: Variable
    w_c: Variable
    b_i: Variable
    b_f: Variable
    b_o: Variable
    b_c: Variable


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def causal_head_mask(t_out: int, hidden: int, d: int) -> np.ndarray:
    """1 where output step j may read decoder step k (k <= j), else 0."""
    mask = np.zeros((t_out * hidden, t_out * d))
    for j in range(t_out):
        mask[: (j + 1) * hidden, j * d:(j + 1) * d] = 1.0
    return mask


# ---------------------------------------------------------------------------
# cells

def gc_forward(x_t: Variable, a_hat, p: GCParams) -> Variable:
    """Two-layer graph convolution: a_hat . relu(a_hat . x . w0) . w1.

    ``x_t`` may stack several samples; its row count must be a multiple of the
    adjacency side.
    """
    a = a_hat.matrix if isinstance(a_hat, NormalizedAdjacency) else np.asarray(a_hat)
    if x_t.value.shape[1] != p.w0.value.shape[0]:
        raise ShapeError(f"gc_forward: features {x_t.value.shape} vs w0 {p.w0.value.shape}")
    hidden = T.relu(T.matmul(T.graph_mix(a, x_t), p.w0))
    return T.matmul(T.graph_mix(a, hidden), p.w1)


def gru_step(g_t: Variable, h_prev: Variable, p: GRUParams) -> Variable:
    if g_t.value.shape[0] != h_prev.value.shape[0]:
        raise ShapeError(f"gru_step: rows {g_t.value.shape} vs {h_prev.value.shape}")
    gh = T.concat_cols(g_t, h_prev)
    u = T.sigmoid(T.add_row(T.matmul(gh, p.w_u), p.b_u))
    r = T.sigmoid(T.add_row(T.matmul(gh, p.w_r), p.b_r))
    grh = T.concat_cols(g_t, T.hadamard(r, h_prev))
    c = T.tanh(T.add_row(T.matmul(grh, p.w_c), p.b_c))
    return T.add(T.hadamard(T.one_minus(u), c), T.hadamard(u, h_prev))


def lstm_step(x_t: Variable, h_prev: Variable, c_prev: Variable,
              p: LSTMParams) -> Tuple[Variable, Variable]:
    if x_t.value.shape[0] != h_prev.value.shape[0]:
        raise ShapeError(f"lstm_step: rows {x_t.value.shape} vs {h_prev.value.shape}")
    xh = T.concat_cols(x_t, h_prev)
    i = T.sigmoid(T.add_row(T.matmul(xh, p.w_i), p.b_i))
    f = T.sigmoid(T.add_row(T.matmul(xh, p.w_f), p.b_f))
    o = T.sigmoid(T.add_row(T.matmul(xh, p.w_o), p.b_o))
    cand = T.tanh(T.add_row(T.matmul(xh, p.w_c), p.b_c))
    c = T.add(T.hadamard(f, c_prev), T.hadamard(i, cand))
    h = T.hadamard(o, T.tanh(c))
    return h, c


def _head_step(states: List[Variable], j: int, w_out: Variable, b_out: Variable,
               hidden: int, d: int, per_node: bool = False) -> Variable:
    """Pre-activation of output step j from decoder states 0..j.

    Dense: states are n x H. Per-node: states are (n*d) x H and output column
    i reads node i only.
    """
    block = T.submatrix(w_out, slice(0, (j + 1) * hidden), slice(j * d, (j + 1) * d))
    bias = T.submatrix(b_out, slice(0, 1), slice(j * d, (j + 1) * d))
    stacked = T.hstack(states[: j + 1])
    z = T.node_readout(stacked, block) if per_node else T.matmul(stacked, block)
    return T.add_row(z, bias)


# ---------------------------------------------------------------------------
# models

class _Forecaster:
    """Shared parameter handling for both model kinds."""

    config: ModelConfig
    params: Dict[str, np.ndarray]
    norm: Optional[object]

    def leaves(self) -> Dict[str, Variable]:
        return {name: T.param(value, name) for name, value in self.params.items()}

    def weight_names(self) -> List[str]:
        return [n for n in self.params if n.rsplit(".", 1)[-1].startswith("w")]

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def _check_batch(self, batch) -> np.ndarray:
        x = T.as_tensor3(batch)
        cfg = self.config
        if x.shape[1:] != (cfg.t_in, cfg.d):
            raise ShapeError(f"batch shape {x.shape} does not match (n, {cfg.t_in}, {cfg.d})")
        return x

    def forward(self, batch, leaves: Optional[Dict[str, Variable]] = None) -> Variable:
        """Run on a normalized (n, t_in, d) batch; returns the n x (t_out*d) output node."""
        raise NotImplementedError

    def predict(self, batch) -> np.ndarray:
        """Normalized (n, t_in, d) -> normalized (n, t_out, d)."""
        x = self._check_batch(batch)
        cfg = self.config
        if x.shape[0] == 0:
            return np.zeros((0, cfg.t_out, cfg.d))
        return self.forward(x).value.reshape(x.shape[0], cfg.t_out, cfg.d)


class GCGRUModel(_Forecaster):
    """Graph-convolutional GRU encoder-decoder with a sigmoid dense head."""

    def __init__(self, config: ModelConfig, a_hat: NormalizedAdjacency,
                 params: Dict[str, np.ndarray], norm=None):
        if a_hat.size != config.d:
            raise ShapeError(f"adjacency side {a_hat.size} != d={config.d}")
        self.config = replace(config, kind=GCGRU)
        self.a_hat = a_hat
        self.params = params
        self.norm = norm

    @classmethod
    def init(cls, config: ModelConfig, a_hat: NormalizedAdjacency,
             rng: np.random.Generator, norm=None) -> "GCGRUModel":
        c = config
        params: Dict[str, np.ndarray] = {}
        for side in ("enc", "dec"):
            params[f"{side}_gc.w0"] = glorot(rng, 1, c.gc_hidden)
            params[f"{side}_gc.w1"] = glorot(rng, c.gc_hidden, c.gc_out)
            for gate in ("u", "r", "c"):
                params[f"{side}_gru.w_{gate}"] = glorot(rng, c.gru_input + c.hidden, c.hidden)
            for gate in ("u", "r", "c"):
                params[f"{side}_gru.b_{gate}"] = np.zeros((1, c.hidden))
        w_out = glorot(rng, c.t_out * c.hidden, c.t_out * c.d)
        params["w_out"] = w_out * causal_head_mask(c.t_out, c.hidden, c.d)
        params["b_out"] = np.zeros((1, c.t_out * c.d))
        return cls(c, a_hat, params, norm)

    @staticmethod
    def gc_params(leaves, side) -> GCParams:
        return GCParams(leaves[f"{side}_gc.w0"], leaves[f"{side}_gc.w1"])

    @staticmethod
    def gru_params(leaves, side) -> GRUParams:
        p = f"{side}_gru."
        return GRUParams(*(leaves[p + n] for n in ("w_u", "w_r", "w_c", "b_u", "b_r", "b_c")))

    def _features(self, frame: Variable, gc_p: GCParams) -> Variable:
        g = gc_forward(frame, self.a_hat, gc_p)
        return T.concat_cols(g, frame) if self.config.input_skip else g

    def encode(self, x: np.ndarray, leaves: Dict[str, Variable]) -> Variable:
        """Encoder pass over (n, t_in, d); returns the final per-node state (n*d) x H."""
        n, t_in, d = x.shape
        gc_p = self.gc_params(leaves, "enc")
        gru_p = self.gru_params(leaves, "enc")
        h = T.constant(np.zeros((n * d, self.config.hidden)))
        for t in range(t_in):
            frame = T.constant(x[:, t, :].reshape(n * d, 1))
            h = gru_step(self._features(frame, gc_p), h, gru_p)
        return h

    def decode(self, h_enc: Variable, last_frame: np.ndarray,
               leaves: Dict[str, Variable]) -> Variable:
        """Autoregressive decoder; returns sigmoid predictions n x (t_out*d)."""
        c = self.config
        last = np.asarray(last_frame, dtype=np.float64).reshape(-1, c.d)
        n = last.shape[0]
        if h_enc.value.shape != (n * c.d, c.hidden):
            raise ShapeError(f"decode: state {h_enc.value.shape} vs {n} frames of width {c.d}")
        gc_p = self.gc_params(leaves, "dec")
        gru_p = self.gru_params(leaves, "dec")
        h = h_enc
        inp = T.constant(last)
        per_node = c.readout == NODE_READOUT
        states: List[Variable] = []
        outputs: List[Variable] = []
        for j in range(c.t_out):
            h = gru_step(self._features(T.reshape(inp, n * c.d, 1), gc_p), h, gru_p)
            states.append(h if per_node else T.block_mean_rows(h, c.d))
            y = T.sigmoid(_head_step(states, j, leaves["w_out"], leaves["b_out"],
                                     c.hidden, c.d, per_node))
            outputs.append(y)
            inp = y
        return T.hstack(outputs)

    def forward(self, batch, leaves=None) -> Variable:
        x = self._check_batch(batch)
        if leaves is None:
            leaves = {k: T.constant(v) for k, v in self.params.items()}
        h = self.encode(x, leaves)
        return self.decode(h, x[:, -1, :], leaves)


class LSTMModel(_Forecaster):
    """Sequence-to-sequence LSTM over full detector frames with a linear head."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray], norm=None):
        self.config = replace(config, kind=LSTM)
        self.params = params
        self.norm = norm

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, norm=None) -> "LSTMModel":
        c = config
        params: Dict[str, np.ndarray] = {}
        for gate in ("i", "f", "o", "c"):
            params[f"lstm.w_{gate}"] = glorot(rng, c.d + c.hidden, c.hidden)
        for gate in ("i", "f", "o", "c"):
            params[f"lstm.b_{gate}"] = np.zeros((1, c.hidden))
        w_out = glorot(rng, c.t_out * c.hidden, c.t_out * c.d)
        params["w_out"] = w_out * causal_head_mask(c.t_out, c.hidden, c.d)
        params["b_out"] = np.zeros((1, c.t_out * c.d))
        return cls(c, params, norm)

    @staticmethod
    def lstm_params(leaves) -> LSTMParams:
        names = ("w_i", "w_f", "w_o", "w_c", "b_i", "b_f", "b_o", "b_c")
        return LSTMParams(*(leaves["lstm." + n] for n in names))

    def forward(self, batch, leaves=None) -> Variable:
        x = self._check_batch(batch)
        if leaves is None:
            leaves = {k: T.constant(v) for k, v in self.params.items()}
        c = self.config
        n = x.shape[0]
        p = self.lstm_params(leaves)
        h = T.constant(np.zeros((n, c.hidden)))
        cell = T.constant(np.zeros((n, c.hidden)))
        for t in range(c.t_in):
            h, cell = lstm_step(T.constant(x[:, t, :]), h, cell, p)
        inp = T.constant(x[:, -1, :])
        states: List[Variable] = []
        outputs: List[Variable] = []
        for j in range(c.t_out):
            h, cell = lstm_step(inp, h, cell, p)
            states.append(h)
            y = _head_step(states, j, leaves["w_out"], leaves["b_out"], c.hidden, c.d)
            outputs.append(y)
            inp = y
        return T.hstack(outputs)


def model_forward(model: _Forecaster, batch) -> np.ndarray:
    """Normalized (n, t_in, d) batch -> (n, t_out, d) predictions."""
    return model.predict(batch)


def encode(model: GCGRUModel, x) -> Variable:
    """Single-sample convenience: (t_in, d) slice -> d x H final encoder state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    x = model._check_batch(x)
    leaves = {k: T.constant(v) for k, v in model.params.items()}
    return model.encode(x, leaves)


def decode(model: GCGRUModel, h_enc: Variable, last_frame) -> np.ndarray:
    """Single-sample convenience: returns the (t_out, d) prediction matrix."""
    c = model.config
    leaves = {k: T.constant(v) for k, v in model.params.items()}
    out = model.decode(h_enc, np.asarray(last_frame).reshape(1, c.d), leaves)
    return out.value.reshape(c.t_out, c.d)


def build_model(config: ModelConfig, a_hat: Optional[NormalizedAdjacency],
                rng: np.random.Generator, norm=None) -> _Forecaster:
    if config.kind == GCGRU:
        if a_hat is None:
            raise ShapeError("GC-GRU model needs a normalized adjacency")
        return GCGRUModel.init(config, a_hat, rng, norm)
    if config.kind == LSTM:
        return LSTMModel.init(config, rng, norm)
    raise ShapeError(f"unknown model kind {config.kind!r}")


def permute_model(model: GCGRUModel, perm: np.ndarray) -> GCGRUModel:
    """Relabel detectors: new detector i is old detector perm[i]."""
    perm = np.asarray(perm)
    c = model.config
    a = model.a_hat.matrix[np.ix_(perm, perm)]
    a_hat = NormalizedAdjacency(a, model.a_hat.k_hops,
                                tuple(model.a_hat.source_ids[i] for i in perm)
                                if model.a_hat.source_ids else ())
    cols = np.concatenate([j * c.d + perm for j in range(c.t_out)])
    params = {k: v.copy() for k, v in model.params.items()}
    params["w_out"] = params["w_out"][:, cols]
    params["b_out"] = params["b_out"][:, cols]
    return GCGRUModel(c, a_hat, params, model.norm)
