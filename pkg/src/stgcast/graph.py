"""Detector graph: adjacency loading, k-hop self-loop clipping, normalization, pruning."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .fileio import atomic_open
from .errors import ContractError, DegenerateGraphError, NoOverlapError, ParseError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorGraph:
    """Undirected binary adjacency over named detectors."""

    node_ids: Tuple[str, ...]
    adjacency: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.node_ids)
        adj = np.array(self.adjacency, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ShapeError(f"adjacency must be square, got {adj.shape}")
        if adj.shape[0] != len(ids):
            raise ShapeError(f"{len(ids)} node ids for a {adj.shape[0]}x{adj.shape[0]} adjacency")
        if len(set(ids)) != len(ids):
            raise ContractError("node ids must be unique")
        if not np.isin(adj, (0.0, 1.0)).all():
            raise ContractError("adjacency entries must be 0 or 1")
        if not np.array_equal(adj, adj.T):
            raise ContractError("adjacency must be symmetric")
        adj.setflags(write=False)
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "adjacency", adj)

    @property
    def size(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_matrix(cls, node_ids: Sequence[str], matrix) -> "DetectorGraph":
        """Build from an arbitrary nonnegative matrix: binarize and symmetrize."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"adjacency must be square, got {m.shape}")
        if (m < 0).any():
            raise ContractError("adjacency entries must be nonnegative")
        nonbinary = int(np.count_nonzero((m != 0) & (m != 1)))
        if nonbinary:
            logger.warning("%d nonbinary adjacency entries treated as 1", nonbinary)
        b = (m > 0).astype(np.float64)
        asym = int(np.count_nonzero(b != b.T))
        if asym:
            logger.info("symmetrizing adjacency: %d asymmetric entries", asym)
        return cls(tuple(node_ids), np.maximum(b, b.T))


@dataclass(frozen=True)
class NormalizedAdjacency:
    matrix: np.ndarray
    k_hops: int
    source_ids: Tuple[str, ...] = field(default=())

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PruneResult:
    graph: DetectorGraph
    dropped: Tuple[str, ...]
    missing: Tuple[str, ...]


def ring_graph(d: int, prefix: str = "D") -> DetectorGraph:
    """Cycle over ``d`` detectors named ``D000``, ``D001``, ..."""
    if d < 2:
        raise ContractError("ring graph needs at least 2 nodes")
    adj = np.zeros((d, d))
    for i in range(d):
        j = (i + 1) % d
        adj[i, j] = adj[j, i] = 1.0
    width = max(3, len(str(d - 1)))
    return DetectorGraph(tuple(f"{prefix}{i:0{width}d}" for i in range(d)), adj)


def khop_clipped_adjacency(g: DetectorGraph | np.ndarray, k: int = 1) -> np.ndarray:
    """min((A + I)^k, 1): k-hop reachability with self-loops."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    a = g.adjacency if isinstance(g, DetectorGraph) else np.asarray(g, dtype=np.float64)
    step = np.minimum(a + np.eye(a.shape[0]), 1.0)
    # clip after each product to keep entries bounded; same result as clipping once
    reach = step.copy()
    for _ in range(k - 1):
        reach = np.minimum(reach @ step, 1.0)
    return reach


def degree_vector(a_tilde: np.ndarray) -> np.ndarray:
    a = np.asarray(a_tilde, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"degree_vector needs a square matrix, got {a.shape}")
    if (a < 0).any():
        raise ContractError("negative adjacency entries")
    return a.sum(axis=1)


def symmetric_normalize(a_tilde: np.ndarray, k_hops: int = 1,
                        source_ids: Sequence[str] = ()) -> NormalizedAdjacency:
    """D^-1/2 A D^-1/2 with D the row-sum degree of ``a_tilde``."""
    a = np.asarray(a_tilde, dtype=np.float64)
    deg = degree_vector(a)
    if (deg <= 0).any():
        bad = [int(i) for i in np.flatnonzero(deg <= 0)]
        raise DegenerateGraphError(f"zero-degree rows {bad}; self-loops missing")
    if not np.allclose(a, a.T, rtol=0, atol=0):
        raise ContractError("normalization expects a symmetric matrix")
    # one sqrt of the degree product: exact for e.g. d_i = d_j
    m = a / np.sqrt(np.outer(deg, deg))
    m.setflags(write=False)
    return NormalizedAdjacency(m, k_hops, tuple(source_ids))


def normalized_adjacency(g: DetectorGraph, k: int = 1) -> NormalizedAdjacency:
    return symmetric_normalize(khop_clipped_adjacency(g, k), k, g.node_ids)


def prune_to_detectors(g: DetectorGraph, data_ids: Sequence[str]) -> PruneResult:
    """Induced subgraph on ``data_ids`` in data order.

    IDs present in the graph but not the data are reported as ``dropped``; IDs in
    the data without a graph node are ``missing`` and left out of the result.
    """
    data_ids = [str(i) for i in data_ids]
    index = {nid: i for i, nid in enumerate(g.node_ids)}
    keep = [i for i in data_ids if i in index]
    if not keep:
        raise NoOverlapError("adjacency and speed data share no detector ids")
    missing = tuple(i for i in data_ids if i not in index)
    kept = set(keep)
    dropped = tuple(i for i in g.node_ids if i not in kept)
    pos = [index[i] for i in keep]
    sub = g.adjacency[np.ix_(pos, pos)]
    if dropped:
        logger.info("pruned %d adjacency nodes absent from the data", len(dropped))
    if missing:
        logger.warning("%d data detectors have no adjacency node", len(missing))
    return PruneResult(DetectorGraph(tuple(keep), sub), dropped, missing)


def load_adjacency_csv(path) -> DetectorGraph:
    """Read an ID-labelled square adjacency CSV (header row and first column are IDs)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty adjacency file", path)
    header = [c.strip() for c in rows[0][1:]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if len(body) != len(header):
        raise ParseError(f"adjacency is not square: {len(header)} columns, {len(body)} rows", path)
    row_ids: List[str] = []
    matrix = np.zeros((len(header), len(header)))
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header) + 1:
            raise ParseError(f"expected {len(header) + 1} fields, got {len(row)}", path, line)
        row_ids.append(row[0].strip())
        try:
            matrix[i] = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric adjacency cell ({exc})", path, line) from None
    if row_ids != header:
        raise ParseError("row ids do not match header ids", path)
    return DetectorGraph.from_matrix(header, matrix)


def write_adjacency_csv(g: DetectorGraph, path) -> None:
    path = Path(path)
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(g.node_ids))
        for nid, row in zip(g.node_ids, g.adjacency):
            w.writerow([nid] + [str(int(v)) for v in row])


def spectral_radius(m: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Largest |eigenvalue| estimate by power iteration."""
    m = np.asarray(m, dtype=np.float64)
    v = np.random.default_rng(seed).uniform(0.5, 1.5, m.shape[0])
    est = 0.0
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        est = norm / np.linalg.norm(v)
        v = w / norm
    return float(est)
