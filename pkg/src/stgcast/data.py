"""Speed tables: CSV I/O, windowing, chronological splits, TPS and synthetic data."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fileio import atomic_open
from .errors import (
    BlockShapeError,
    ContractError,
    DegenerateInputError,
    EmptyTableError,
    GridError,
    ParseError,
)
from .graph import DetectorGraph, normalized_adjacency, ring_graph
from .seeding import rng_stream

logger = logging.getLogger(__name__)

STEP = timedelta(minutes=15)
MISSING_TOKENS = {"", "none"}
T_IN = 36
T_OUT = 12


@dataclass(frozen=True)
class SpeedTable:
    timestamps: Tuple[datetime, ...]
    detector_ids: Tuple[str, ...]
    values: np.ndarray
    missing_mask: np.ndarray

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def _check_grid(timestamps: Sequence[datetime], where: str = "") -> None:
    for i in range(1, len(timestamps)):
        delta = timestamps[i] - timestamps[i - 1]
        if delta != STEP:
            raise GridError(
                f"{where}non-uniform timestamps: {timestamps[i - 1].isoformat()} -> "
                f"{timestamps[i].isoformat()} (expected 15-minute spacing)")


def _read_rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyTableError(f"{path}: no header row") from None
        ids = tuple(h.strip() for h in header[1:])
        if not ids:
            raise ParseError("header has no detector columns", path, 1)
        stamps: List[datetime] = []
        values: List[List[float]] = []
        mask: List[List[bool]] = []
        for row in reader:
            line = reader.line_num
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != len(ids) + 1:
                raise ParseError(f"expected {len(ids) + 1} fields, got {len(row)}", path, line)
            try:
                stamps.append(datetime.fromisoformat(row[0].strip()))
            except ValueError:
                raise ParseError(f"bad timestamp {row[0]!r}", path, line) from None
            vals, miss = [], []
            for cell in row[1:]:
                token = cell.strip()
                if token.lower() in MISSING_TOKENS:
                    vals.append(0.0)
                    miss.append(True)
                    continue
                try:
                    v = float(token)
                except ValueError:
                    raise ParseError(f"non-numeric cell {token!r}", path, line) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite cell {token!r}", path, line)
                vals.append(v)
                miss.append(False)
            values.append(vals)
            mask.append(miss)
    return ids, stamps, values, mask


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def load_speed_csv(path) -> SpeedTable:
    """Parse a ``timestamp,<id1>,...`` speed CSV; ``none``/empty cells become 0."""
    path = Path(path)
    ids, stamps, values, mask = _read_rows(path)
    if not stamps:
        raise EmptyTableError(f"{path}: no data rows")
    _check_grid(stamps, f"{path}: ")
    vals = _freeze(np.array(values, dtype=np.float64).reshape(len(stamps), len(ids)))
    miss = _freeze(np.array(mask, dtype=bool).reshape(len(stamps), len(ids)))
    logger.info("loaded %s: %d rows x %d detectors, %d missing cells",
                path, vals.shape[0], vals.shape[1], int(miss.sum()))
    return SpeedTable(tuple(stamps), ids, vals, miss)


def write_speed_csv(table: SpeedTable, path) -> None:
    path = Path(path)
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + list(table.detector_ids))
        for ts, row, miss in zip(table.timestamps, table.values, table.missing_mask):
            w.writerow([ts.isoformat()] + ["none" if m else repr(float(v)) for v, m in zip(row, miss)])


@dataclass(frozen=True)
class DayBlock:
    label: str
    values: np.ndarray
    missing_mask: np.ndarray


def load_test_blocks(path, t_in: int = T_IN) -> Tuple[Tuple[str, ...], List[DayBlock]]:
    """Challenge-style test file: one block of ``t_in`` consecutive rows per calendar day."""
    path = Path(path)
    ids, stamps, values, mask = _read_rows(path)
    if not stamps:
        raise EmptyTableError(f"{path}: no data rows")
    groups: "OrderedDict[str, List[int]]" = OrderedDict()
    for i, ts in enumerate(stamps):
        groups.setdefault(ts.date().isoformat(), []).append(i)
    blocks = []
    for day, rows in groups.items():
        if len(rows) != t_in:
            raise BlockShapeError(f"day {day}: expected {t_in} rows, got {len(rows)}")
        _check_grid([stamps[i] for i in rows], f"day {day}: ")
        blocks.append(DayBlock(day, np.array([values[i] for i in rows], dtype=np.float64),
                                np.array([mask[i] for i in rows], dtype=bool)))
    return ids, blocks


# ---------------------------------------------------------------------------
# windows and splits

@dataclass(frozen=True)
class WindowedDataset:
    x: np.ndarray          # (N, t_in, D)
    y: np.ndarray          # (N, t_out, D)
    x_mask: np.ndarray
    y_mask: np.ndarray
    starts: np.ndarray     # first source row of each window
    detector_ids: Tuple[str, ...]
    t_in: int = T_IN
    t_out: int = T_OUT

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, index) -> "WindowedDataset":
        return WindowedDataset(self.x[index], self.y[index], self.x_mask[index],
                               self.y_mask[index], self.starts[index], self.detector_ids,
                               self.t_in, self.t_out)


def _windows(a: np.ndarray, start: int, length: int, count: int) -> np.ndarray:
    # (rows, D) -> read-only view (count, length, D)
    view = sliding_window_view(a[start:start + count + length - 1], length, axis=0)
    return view.transpose(0, 2, 1)


def make_windows(table: SpeedTable, t_in: int = T_IN, t_out: int = T_OUT) -> WindowedDataset:
    """Stride-1 sliding windows; inputs rows [s, s+t_in), targets [s+t_in, s+t_in+t_out)."""
    rows = table.values.shape[0]
    if t_in < 1 or t_out < 1:
        raise ContractError("t_in and t_out must be positive")
    if rows < t_in + t_out:
        raise ContractError(f"{rows} rows is fewer than t_in + t_out = {t_in + t_out}")
    n = rows - t_in - t_out + 1
    return WindowedDataset(
        x=_windows(table.values, 0, t_in, n),
        y=_windows(table.values, t_in, t_out, n),
        x_mask=_windows(table.missing_mask, 0, t_in, n),
        y_mask=_windows(table.missing_mask, t_in, t_out, n),
        starts=np.arange(n),
        detector_ids=table.detector_ids,
        t_in=t_in,
        t_out=t_out,
    )


def chronological_split(ds: WindowedDataset, ratio: float,
                        strict_no_leak: bool = False) -> Tuple[WindowedDataset, WindowedDataset]:
    """First floor(ratio*N) windows train, the rest holdout.

    With ``strict_no_leak`` the first t_in+t_out-1 holdout windows are dropped, so
    no holdout input row was a training target.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(ds)
    n_train = int(math.floor(ratio * n))
    gap = ds.t_in + ds.t_out - 1 if strict_no_leak else 0
    hold_start = n_train + gap
    if n_train == 0 or hold_start >= n:
        raise ContractError(
            f"split of {n} windows at ratio {ratio} (strict_no_leak={strict_no_leak}) "
            "leaves an empty side")
    return ds.take(slice(0, n_train)), ds.take(slice(hold_start, n))


# ---------------------------------------------------------------------------
# traffic performance score

@dataclass(frozen=True)
class TpsInput:
    speed: np.ndarray
    volume: np.ndarray
    length: np.ndarray
    free_flow: float

    def __post_init__(self):
        for name in ("speed", "volume", "length"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if not (self.speed.shape == self.volume.shape == self.length.shape):
            raise ContractError("speed, volume and length must align per segment")
        if (self.length <= 0).any():
            raise ContractError("segment lengths must be positive")
        if (self.speed < 0).any() or (self.volume < 0).any():
            raise ContractError("speeds and volumes must be nonnegative")
        if not self.free_flow > 0:
            raise ContractError("free-flow speed must be positive")


def compute_tps(inp: TpsInput) -> float:
    """Volume- and length-weighted speed relative to free flow, in percent."""
    weights = inp.volume * inp.length
    denom = float(inp.free_flow * weights.sum())
    if denom <= 0:
        raise DegenerateInputError("TPS denominator is zero (no volume on any segment)")
    tps = 100.0 * float((inp.speed * weights).sum()) / denom
    if tps > 100.0:
        logger.warning("TPS %.4f%% exceeds 100%% (speeds above free flow); clamped", tps)
        tps = 100.0
    return tps


# ---------------------------------------------------------------------------
# synthetic data

DAY_STEPS = 96


def simulate_diffusion(a_hat: np.ndarray, steps: int, rng: np.random.Generator, *,
                       mix: float = 0.6, seasonal_weight: float = 0.3,
                       noise_weight: float = 0.1, seasonal_amplitude: float = 1.0,
                       burn_in: int = 2 * DAY_STEPS, x0: Optional[np.ndarray] = None) -> np.ndarray:
    """Raw (steps, D) series of x_{t+1} = mix*A x_t + sw*seasonal(t) + nw*noise.

    ``seasonal(t) = 1 + amplitude * sin(2 pi t / 96 + phase_d)`` with one random
    phase per node. Unscaled; see :func:`generate_synthetic`.
    """
    d = a_hat.shape[0]
    phases = rng.uniform(0.0, 2.0 * np.pi, d)
    total = steps + burn_in
    noise = rng.standard_normal((total, d))
    x = np.zeros(d) if x0 is None else np.array(x0, dtype=np.float64)
    out = np.empty((total, d))
    for t in range(total):
        out[t] = x
        seasonal = 1.0 + seasonal_amplitude * np.sin(2.0 * np.pi * t / DAY_STEPS + phases)
        x = mix * (a_hat @ x) + seasonal_weight * seasonal + noise_weight * noise[t]
    return out[burn_in:]


def grid_timestamps(count: int, start: datetime = datetime(2020, 1, 1)) -> Tuple[datetime, ...]:
    return tuple(start + i * STEP for i in range(count))


def generate_synthetic(d: int, steps: int, graph: Optional[DetectorGraph] = None,
                       seed: int = 42, low: float = 20.0, high: float = 70.0,
                       **dynamics) -> SpeedTable:
    """Spatially diffused, daily-seasonal speed table rescaled to [low, high] mph."""
    if d < 2:
        raise ContractError("synthetic data needs d >= 2")
    if steps < DAY_STEPS:
        raise ContractError(f"synthetic data needs at least {DAY_STEPS} steps")
    graph = graph if graph is not None else ring_graph(d)
    if graph.size != d:
        raise ContractError(f"graph has {graph.size} nodes, expected {d}")
    a_hat = normalized_adjacency(graph).matrix
    raw = simulate_diffusion(a_hat, steps, rng_stream(seed, "synthetic"), **dynamics)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        scaled = low + (high - low) * (raw - lo) / (hi - lo)
    else:
        scaled = np.full_like(raw, 0.5 * (low + high))
    return SpeedTable(grid_timestamps(steps), graph.node_ids, _freeze(scaled),
                      _freeze(np.zeros(scaled.shape, dtype=bool)))


def autocorrelation(series: np.ndarray, lag: int) -> float:
    s = np.asarray(series, dtype=np.float64)
    a, b = s[:-lag] - s.mean(), s[lag:] - s.mean()
    return float((a * b).sum() / ((s - s.mean()) ** 2).sum())
