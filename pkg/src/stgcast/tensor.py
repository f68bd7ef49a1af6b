"""Dense float64 matrix ops with a define-by-run reverse-mode tape.

Every op returns a new :class:`Variable` holding its value, its parents and the
name of the backward rule that produced it. Rules live in ``BACKWARD_RULES``
so they can be inspected (or swapped out in tests) by name.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array (scalars become 1x1, vectors 1xn)."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


def as_tensor3(x) -> np.ndarray:
    """Coerce to a rank-3 float64 array shaped (samples, steps, detectors)."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 3:
        raise ShapeError(f"expected a rank-3 tensor (n, t, d), got shape {arr.shape}")
    return arr


class Variable:
    """A node on the tape: value, accumulated gradient, parents and rule name."""

    __slots__ = ("value", "_grad", "parents", "rule", "aux", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Variable"] = (), rule: str = "leaf",
                 aux=None, requires_grad: Optional[bool] = None, name: Optional[str] = None):
        self.value = as_matrix(value)
        self._grad = None
        self.parents = tuple(parents)
        self.rule = rule
        self.aux = aux
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = as_matrix(g)

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.value.shape}, rule={self.rule!r})"


def param(value, name: Optional[str] = None) -> Variable:
    """Trainable leaf."""
    return Variable(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def constant(value, name: Optional[str] = None) -> Variable:
    """Leaf that never receives a gradient."""
    return Variable(value, requires_grad=False, name=name)


def _shape_error(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# forward ops

def matmul(a: Variable, b: Variable) -> Variable:
    if a.value.shape[1] != b.value.shape[0]:
        raise _shape_error("matmul", a, b)
    return Variable(a.value @ b.value, (a, b), "matmul")


def add(a: Variable, b: Variable) -> Variable:
    if a.value.shape != b.value.shape:
        raise _shape_error("add", a, b)
    return Variable(a.value + b.value, (a, b), "add")


def sub(a: Variable, b: Variable) -> Variable:
    if a.value.shape != b.value.shape:
        raise _shape_error("sub", a, b)
    return Variable(a.value - b.value, (a, b), "sub")


def hadamard(a: Variable, b: Variable) -> Variable:
    if a.value.shape != b.value.shape:
        raise _shape_error("hadamard", a, b)
    return Variable(a.value * b.value, (a, b), "hadamard")


def scale(a: Variable, alpha: float) -> Variable:
    alpha = float(alpha)
    return Variable(alpha * a.value, (a,), "scale", aux=alpha)


def one_minus(a: Variable) -> Variable:
    """1 - a, entrywise."""
    return Variable(1.0 - a.value, (a,), "one_minus")


def elementwise(kind: str, a: Variable, b: Optional[Variable] = None,
                alpha: Optional[float] = None) -> Variable:
    """Dispatch by name: ``add``, ``sub``, ``hadamard`` or ``scale``."""
    if kind == "scale":
        if alpha is None:
            raise ContractError("scale requires alpha")
        return scale(a, alpha)
    ops = {"add": add, "sub": sub, "hadamard": hadamard}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if b is None:
        raise ContractError(f"{kind} is binary")
    return ops[kind](a, b)


def add_row(a: Variable, bias: Variable) -> Variable:
    """Add a 1 x cols bias to every row of ``a``."""
    if bias.value.shape != (1, a.value.shape[1]):
        raise _shape_error("add_row", a, bias)
    return Variable(a.value + bias.value, (a, bias), "add_row")


_BELOW_ONE = np.nextafter(1.0, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # input clamp keeps exp finite (result stays > 0); the output clamp stops
    # large inputs from rounding to exactly 1
    t = np.maximum(x, -700.0)
    np.negative(t, out=t)
    np.exp(t, out=t)
    t += 1.0
    np.reciprocal(t, out=t)
    return np.minimum(t, _BELOW_ONE, out=t)


def sigmoid(a: Variable) -> Variable:
    return Variable(_sigmoid(a.value), (a,), "sigmoid")


def tanh(a: Variable) -> Variable:
    t = np.tanh(a.value)
    np.clip(t, -_BELOW_ONE, _BELOW_ONE, out=t)
    return Variable(t, (a,), "tanh")


def relu(a: Variable) -> Variable:
    return Variable(np.maximum(a.value, 0.0), (a,), "relu")


def activation(kind: str, a: Variable) -> Variable:
    fns = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    if kind not in fns:
        raise ContractError(f"unknown activation {kind!r}")
    return fns[kind](a)


def concat_cols(a: Variable, b: Variable) -> Variable:
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(f"concat_cols: row mismatch {a.value.shape} vs {b.value.shape}")
    return Variable(np.concatenate([a.value, b.value], axis=1), (a, b), "concat_cols",
                    aux=a.value.shape[1])


def hstack(parts: Sequence[Variable]) -> Variable:
    """Concatenate several matrices left to right."""
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"hstack: row mismatch {[p.value.shape for p in parts]}")
    widths = [p.value.shape[1] for p in parts]
    return Variable(np.concatenate([p.value for p in parts], axis=1), tuple(parts), "hstack",
                    aux=widths)


def submatrix(a: Variable, rows: slice, cols: slice) -> Variable:
    return Variable(a.value[rows, cols], (a,), "submatrix", aux=(rows, cols))


def reshape(a: Variable, rows: int, cols: int) -> Variable:
    """Row-major reshape."""
    if rows * cols != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.value.shape} as ({rows}, {cols})")
    return Variable(a.value.reshape(rows, cols), (a,), "reshape")


def graph_mix(a_hat: np.ndarray, x: Variable) -> Variable:
    """Left-multiply each D-row block of ``x`` by the fixed D x D matrix ``a_hat``.

    ``x`` stacks ``n`` samples, each a D x F block, into an (n*D) x F matrix.
    Equivalent to ``kron(I_n, a_hat) @ x`` without building the Kronecker product.
    """
    d = a_hat.shape[0]
    rows, cols = x.value.shape
    if a_hat.shape != (d, d) or rows % d:
        raise ShapeError(f"graph_mix: adjacency {a_hat.shape} does not tile rows of {x.value.shape}")
    blocks = x.value.reshape(rows // d, d, cols)
    out = np.matmul(a_hat, blocks).reshape(rows, cols)
    return Variable(out, (x,), "graph_mix", aux=a_hat)


def block_mean_rows(x: Variable, block: int) -> Variable:
    """Average each consecutive group of ``block`` rows: (n*block) x H -> n x H."""
    rows, cols = x.value.shape
    if block <= 0 or rows % block:
        raise ShapeError(f"block_mean_rows: {rows} rows not divisible by {block}")
    out = x.value.reshape(rows // block, block, cols).mean(axis=1)
    return Variable(out, (x,), "block_mean_rows", aux=block)


def node_readout(states: Variable, w: Variable) -> Variable:
    """Per-node dot product: (n*D) x C states, C x D weights -> n x D.

    ``out[s, d] = sum_c states[s*D + d, c] * w[c, d]``; column d of ``w`` reads
    only node d's row of each sample.
    """
    rows, c = states.value.shape
    cw, d = w.value.shape
    if c != cw or d == 0 or rows % d:
        raise ShapeError(f"node_readout: states {states.value.shape} vs weights {w.value.shape}")
    s3 = states.value.reshape(rows // d, d, c)
    out = np.einsum("sdc,cd->sd", s3, w.value)
    return Variable(out, (states, w), "node_readout")


def sum_all(a: Variable) -> Variable:
    return Variable(np.array([[a.value.sum()]]), (a,), "sum_all")


def abs_sum(a: Variable) -> Variable:
    """Sum of absolute values; subgradient 0 at 0."""
    return Variable(np.array([[np.abs(a.value).sum()]]), (a,), "abs_sum")


# ---------------------------------------------------------------------------
# backward rules: rule(node, g) -> one gradient (or None) per parent

def _needs(node, i):
    return node.parents[i].requires_grad


def _bw_matmul(node, g):
    a, b = node.parents
    return (g @ b.value.T if a.requires_grad else None,
            a.value.T @ g if b.requires_grad else None)


def _bw_add(node, g):
    return g, g


def _bw_sub(node, g):
    return g, (-g if _needs(node, 1) else None)


def _bw_hadamard(node, g):
    a, b = node.parents
    return (g * b.value if a.requires_grad else None,
            g * a.value if b.requires_grad else None)


def _bw_scale(node, g):
    return (node.aux * g,)


def _bw_one_minus(node, g):
    return (-g,)


def _bw_add_row(node, g):
    return g, (g.sum(axis=0, keepdims=True) if _needs(node, 1) else None)


def _bw_sigmoid(node, g):
    s = node.value
    return (g * s * (1.0 - s),)


def _bw_tanh(node, g):
    t = node.value
    return (g * (1.0 - t * t),)


def _bw_relu(node, g):
    return (g * (node.parents[0].value > 0),)


def _bw_concat_cols(node, g):
    k = node.aux
    return g[:, :k], g[:, k:]


def _bw_hstack(node, g):
    bounds = np.cumsum([0] + list(node.aux))
    return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(node.aux)))


def _bw_submatrix(node, g):
    rows, cols = node.aux
    full = np.zeros_like(node.parents[0].value)
    full[rows, cols] = g
    return (full,)


def _bw_reshape(node, g):
    return (g.reshape(node.parents[0].value.shape),)


def _bw_graph_mix(node, g):
    a_hat = node.aux
    d = a_hat.shape[0]
    rows, cols = g.shape
    return (np.matmul(a_hat.T, g.reshape(rows // d, d, cols)).reshape(rows, cols),)


def _bw_block_mean_rows(node, g):
    block = node.aux
    n, cols = g.shape
    return (np.repeat(g / block, block, axis=0),)


def _bw_node_readout(node, g):
    states, w = node.parents
    rows, c = states.value.shape
    n, d = g.shape
    ds = (g[:, :, None] * w.value.T[None]).reshape(rows, c) if states.requires_grad else None
    dw = None
    if w.requires_grad:
        dw = np.einsum("sd,sdc->cd", g, states.value.reshape(n, d, c))
    return ds, dw


def _bw_sum_all(node, g):
    return (np.full_like(node.parents[0].value, g[0, 0]),)


def _bw_abs_sum(node, g):
    return (g[0, 0] * np.sign(node.parents[0].value),)


BACKWARD_RULES: Dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "hadamard": _bw_hadamard,
    "scale": _bw_scale,
    "one_minus": _bw_one_minus,
    "add_row": _bw_add_row,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "relu": _bw_relu,
    "concat_cols": _bw_concat_cols,
    "hstack": _bw_hstack,
    "submatrix": _bw_submatrix,
    "reshape": _bw_reshape,
    "graph_mix": _bw_graph_mix,
    "block_mean_rows": _bw_block_mean_rows,
    "node_readout": _bw_node_readout,
    "sum_all": _bw_sum_all,
    "abs_sum": _bw_abs_sum,
}


# ---------------------------------------------------------------------------
# tape

def tape_of(loss: Variable) -> List[Variable]:
    """Topologically ordered list of every node ``loss`` depends on (inputs first)."""
    order: List[Variable] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Variable, tape: Optional[List[Variable]] = None) -> None:
    """Accumulate d(loss)/d(value) into ``.grad`` of every node on the tape.

    Calling twice without :func:`reset_grads` adds the gradients twice.
    """
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got {loss.value.shape}")
    if tape is None:
        tape = tape_of(loss)
    adjoint = {id(loss): np.ones((1, 1))}
    for node in reversed(tape):
        g = adjoint.get(id(node))
        if g is None:
            continue
        if node.requires_grad or node is loss:
            # adjoints may be shared between nodes; never hand out a writable alias
            g.setflags(write=False)
            node._grad = g if node._grad is None else node._grad + g
        if not node.parents:
            continue
        grads = BACKWARD_RULES[node.rule](node, g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = adjoint.get(key)
            adjoint[key] = pg if prev is None else prev + pg


def reset_grads(variables: Iterable[Variable]) -> None:
    for v in variables:
        v.zero_grad()


# ---------------------------------------------------------------------------
# verification helpers

def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at matrix ``x``."""
    x = np.array(as_matrix(x), dtype=DTYPE)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        f_plus = float(f(x.copy()))
        x[idx] = orig - h
        f_minus = float(f(x.copy()))
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
