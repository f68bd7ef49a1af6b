"""Plain-text model checkpoints.

Layout (UTF-8, ``\\n`` line endings)::

    STGCAST-CKPT-1
    header <one-line JSON: model config, train config, detector ids, norm stats>
    matrix <name> <rows> <cols>
    <one line per row, space-separated round-trip floats>
    ...
    end

The normalized adjacency is stored as matrix ``a_hat`` so a checkpoint is
self-contained. Floats use ``repr`` and parse back bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ParseError
from .fileio import atomic_open
from .graph import NormalizedAdjacency
from .nn import GCGRU, GCGRUModel, LSTMModel, ModelConfig

MAGIC = "STGCAST-CKPT-1"


def _matrix_lines(name: str, m: np.ndarray):
    m = np.asarray(m, dtype=np.float64)
    yield f"matrix {name} {m.shape[0]} {m.shape[1]}"
    for row in m:
        yield " ".join(repr(float(v)) for v in row)


def save_checkpoint(path, model, train_config: Optional[dict] = None,
                    detector_ids=None) -> Path:
    path = Path(path)
    norm = None
    if model.norm is not None:
        norm = {"min_v": model.norm.min_v, "max_v": model.norm.max_v}
    if detector_ids is None and isinstance(model, GCGRUModel):
        detector_ids = model.a_hat.source_ids
    header = {
        "model": model.config.to_dict(),
        "train": train_config,
        "norm": norm,
        "detector_ids": list(detector_ids) if detector_ids is not None else None,
        "k_hops": getattr(getattr(model, "a_hat", None), "k_hops", None),
    }
    lines = [MAGIC, "header " + json.dumps(header, sort_keys=True)]
    if isinstance(model, GCGRUModel):
        lines.extend(_matrix_lines("a_hat", model.a_hat.matrix))
    for name in sorted(model.params):
        lines.extend(_matrix_lines(name, model.params[name]))
    lines.append("end")
    with atomic_open(path) as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _parse(path: Path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != MAGIC:
        raise ParseError(f"not a checkpoint (expected magic {MAGIC!r})", path, 1)
    if len(lines) < 2 or not lines[1].startswith("header "):
        raise ParseError("missing header line", path, 2)
    header = json.loads(lines[1][len("header "):])
    matrices: Dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        line = lines[i]
        if line == "end":
            return header, matrices
        parts = line.split()
        if len(parts) != 4 or parts[0] != "matrix":
            raise ParseError(f"expected 'matrix <name> <rows> <cols>', got {line!r}", path, i + 1)
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        body = lines[i + 1:i + 1 + rows]
        try:
            m = np.array([[float(v) for v in r.split()] for r in body], dtype=np.float64)
        except ValueError:
            raise ParseError(f"bad value in matrix {name!r}", path, i + 2) from None
        if rows == 0:
            m = np.zeros((0, cols))
        if m.shape != (rows, cols):
            raise ParseError(f"matrix {name!r} is {m.shape}, header says {(rows, cols)}", path, i + 1)
        matrices[name] = m
        i += 1 + rows
    raise ParseError("truncated checkpoint (no 'end' line)", path)


def load_checkpoint(path):
    """Returns ``(model, header)``."""
    from .train import NormStats

    path = Path(path)
    header, matrices = _parse(path)
    cfg = ModelConfig(**header["model"])
    norm = NormStats(**header["norm"]) if header.get("norm") else None
    params = {k: v for k, v in matrices.items() if k != "a_hat"}
    if cfg.kind == GCGRU:
        ids = tuple(header.get("detector_ids") or ())
        a_hat = NormalizedAdjacency(matrices["a_hat"], header.get("k_hops") or cfg.k_hops, ids)
        model = GCGRUModel(cfg, a_hat, params, norm)
    else:
        model = LSTMModel(cfg, params, norm)
    return model, header
