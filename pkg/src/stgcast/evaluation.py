"""Forecast metrics, the historical-average baseline and horizon/detector reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fileio import atomic_open
from .errors import ShapeError, UndefinedMetricError

STEP_MINUTES = 15
HOUR_GROUPS = (("1h", range(0, 4)), ("2h", range(4, 8)), ("3h", range(8, 12)))


def _pair(y_true, y_pred, mask=None):
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise ShapeError(f"y_true {yt.shape} and y_pred {yp.shape} differ")
    keep = np.ones(yt.shape, dtype=bool)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != yt.shape:
            raise ShapeError(f"mask {m.shape} does not match {yt.shape}")
        keep &= ~m
    return yt, yp, keep


def mae(y_true, y_pred, mask=None) -> float:
    """Mean absolute error over cells not flagged in ``mask``."""
    yt, yp, keep = _pair(y_true, y_pred, mask)
    if not keep.any():
        raise UndefinedMetricError("MAE undefined: every cell is masked")
    return float(np.abs(yt - yp)[keep].mean())


def rmse(y_true, y_pred, mask=None) -> float:
    yt, yp, keep = _pair(y_true, y_pred, mask)
    if not keep.any():
        raise UndefinedMetricError("RMSE undefined: every cell is masked")
    return float(np.sqrt(((yt - yp) ** 2)[keep].mean()))


def mape(y_true, y_pred, epsilon: float = 1e-6, mask=None, return_excluded: bool = False):
    """Mean absolute percentage error, in percent.

    Cells with |y_true| <= epsilon or flagged in ``mask`` are excluded. With
    ``return_excluded`` the result is ``(mape, excluded_count)``.
    """
    yt, yp, keep = _pair(y_true, y_pred, mask)
    keep &= np.abs(yt) > epsilon
    excluded = int(keep.size - keep.sum())
    if not keep.any():
        raise UndefinedMetricError("MAPE undefined: every cell is zero or masked")
    value = float(100.0 * (np.abs(yt - yp)[keep] / np.abs(yt[keep])).mean())
    return (value, excluded) if return_excluded else value


def historical_average_forecast(x, t_out: int = 12) -> np.ndarray:
    """Per-window, per-detector input mean repeated over the horizon."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (n, t_in, d), got {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    return np.repeat(mean, t_out, axis=1)


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricRow:
    label: str
    mae: float
    rmse: float
    mape: float
    count: int
    excluded: int = 0


@dataclass
class BoxStats:
    minutes: int
    min: float
    q25: float
    median: float
    q75: float
    max: float
    n_outliers: int


@dataclass
class MetricsReport:
    model: str
    overall: MetricRow
    per_horizon: List[MetricRow]
    groups: List[MetricRow]
    per_detector: List[Tuple[str, float]]
    boxplot: List[BoxStats]
    units: str = "denormalized"

    @property
    def excluded_count(self) -> int:
        return self.overall.excluded


def _metric_row(label, yt, yp, mask, epsilon) -> MetricRow:
    _, _, keep = _pair(yt, yp, mask)
    count = int(keep.sum())
    if count == 0:
        nan = float("nan")
        return MetricRow(label, nan, nan, nan, 0, int(keep.size))
    try:
        mp, excl = mape(yt, yp, epsilon, mask, return_excluded=True)
    except UndefinedMetricError:
        mp, excl = float("nan"), int(keep.size)
    return MetricRow(label, mae(yt, yp, mask), rmse(yt, yp, mask), mp, count, excl)


def box_stats(values: Sequence[float], minutes: int) -> BoxStats:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        nan = float("nan")
        return BoxStats(minutes, nan, nan, nan, nan, nan, 0)
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    iqr = q75 - q25
    outliers = int(np.count_nonzero((v < q25 - 1.5 * iqr) | (v > q75 + 1.5 * iqr)))
    return BoxStats(minutes, float(v.min()), float(q25), float(med), float(q75),
                    float(v.max()), outliers)


def _detector_mae(yt, yp, keep) -> np.ndarray:
    # (n, d) or (n, t, d) -> per-detector MAE over the leading axes
    err = np.where(keep, np.abs(yt - yp), 0.0)
    axes = tuple(range(err.ndim - 1))
    counts = keep.sum(axis=axes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, err.sum(axis=axes) / np.maximum(counts, 1), np.nan)


def horizon_report(y_true, y_pred, detector_ids: Optional[Sequence[str]] = None,
                   mask=None, model: str = "model", epsilon: float = 1e-6,
                   units: str = "denormalized") -> MetricsReport:
    """Metrics per horizon step, per hour group, per detector, plus box-plot stats."""
    yt, yp, keep = _pair(y_true, y_pred, mask)
    if yt.ndim != 3:
        raise ShapeError(f"expected (n, t_out, d), got {yt.shape}")
    m = None if mask is None else ~keep
    n, t_out, d = yt.shape
    ids = list(detector_ids) if detector_ids is not None else [str(i) for i in range(d)]
    if len(ids) != d:
        raise ShapeError(f"{len(ids)} detector ids for {d} columns")

    overall = _metric_row("overall", yt, yp, m, epsilon)
    per_horizon = []
    boxes = []
    for j in range(t_out):
        minutes = STEP_MINUTES * (j + 1)
        mj = None if m is None else m[:, j]
        per_horizon.append(_metric_row(str(minutes), yt[:, j], yp[:, j], mj, epsilon))
        boxes.append(box_stats(_detector_mae(yt[:, j], yp[:, j], keep[:, j]), minutes))
    groups = []
    for label, steps in HOUR_GROUPS:
        idx = [j for j in steps if j < t_out]
        if idx:
            mg = None if m is None else m[:, idx]
            groups.append(_metric_row(label, yt[:, idx], yp[:, idx], mg, epsilon))
    det = _detector_mae(yt, yp, keep)
    per_detector = [(ids[i], float(det[i])) for i in range(d)]
    return MetricsReport(model, overall, per_horizon, groups, per_detector, boxes, units)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_report(report: MetricsReport, out_dir, suffix: str = "") -> Dict[str, Path]:
    """Write the plot-ready CSVs; returns their paths keyed by kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "horizon": out / f"report_horizon{suffix}.csv",
        "detector": out / f"report_detector{suffix}.csv",
        "boxplot": out / f"report_boxplot{suffix}.csv",
        "groups": out / f"report_groups{suffix}.csv",
    }
    _write_csv(paths["horizon"], ["minutes", "mae", "rmse", "mape"],
               ([int(r.label), r.mae, r.rmse, r.mape] for r in report.per_horizon))
    _write_csv(paths["detector"], ["detector_id", "mae"], report.per_detector)
    _write_csv(paths["boxplot"], ["minutes", "min", "q25", "median", "q75", "max", "n_outliers"],
               ([b.minutes, b.min, b.q25, b.median, b.q75, b.max, b.n_outliers]
                for b in report.boxplot))
    _write_csv(paths["groups"], ["group", "mae", "rmse", "mape", "mape_excluded"],
               ([r.label, r.mae, r.rmse, r.mape, r.excluded]
                for r in report.groups + [report.overall]))
    return paths


def write_predictions_vs_truth(y_true, y_pred, detector_ids, path) -> None:
    """Sample-averaged prediction and observation per (horizon, detector)."""
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    pred = yp.mean(axis=0)
    obs = yt.mean(axis=0)
    rows = []
    for j in range(yt.shape[1]):
        for i, det in enumerate(detector_ids):
            rows.append([STEP_MINUTES * (j + 1), det, pred[j, i], obs[j, i]])
    _write_csv(Path(path), ["minutes", "detector_id", "predicted", "observed"], rows)
