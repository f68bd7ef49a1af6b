"""Command-line interface: ``stgcast {train,evaluate,predict,sweep,gen-synthetic}``.

Configuration is a JSON document (``--config``); every field can be overridden
with the matching long flag (``--learning-rate 0.003``). Precedence: flag, then
the ``STGCAST_SEED`` environment variable (seed only), then the config file,
then defaults.

Exit codes: 0 success, 1 numeric/training fault, 2 input/config fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DAY_STEPS,
    WindowedDataset,
    chronological_split,
    generate_synthetic,
    load_speed_csv,
    load_test_blocks,
    make_windows,
    write_speed_csv,
)
from .errors import (
    BlockShapeError,
    CompatibilityError,
    ConfigError,
    InputError,
    NumericFaultError,
    StgcastError,
)
from .evaluation import (
    historical_average_forecast,
    horizon_report,
    write_predictions_vs_truth,
    write_report,
)
from .fileio import atomic_open, sha256_file
from .graph import load_adjacency_csv, prune_to_detectors, ring_graph, write_adjacency_csv
from .nn import GCGRU, LSTM
from .seeding import SEED_ENV, seed_from_env
from .train import (
    NormStats,
    TrainConfig,
    denormalize,
    grid_search,
    normalize,
    predict_denormalized,
    train_model,
    write_grid_csv,
    write_history_csv,
)

logger = logging.getLogger("stgcast")

MODEL_LABELS = {GCGRU: "GC-GRU-N", LSTM: "LSTM"}


@dataclass
class RunConfig:
    speed_csv: Optional[str] = None
    adjacency_csv: Optional[str] = None
    checkpoint: Optional[str] = None
    baseline_checkpoint: Optional[str] = None
    test_csv: Optional[str] = None
    grid: Optional[str] = None
    out_dir: str = "out"
    jobs: int = 1
    record_timing: bool = False
    normalized_report: bool = False
    synthetic_d: int = 12
    synthetic_steps: int = 2000
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("train"))
        return d


_RUN_FIELDS = [f for f in fields(RunConfig) if f.name != "train"]
_TRAIN_FIELDS = list(fields(TrainConfig))


def _field_type(f):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if "bool" in t:
        return bool
    if "int" in t:
        return int
    if "float" in t:
        return float
    return str


def build_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None,
                 env_seed: bool = True) -> RunConfig:
    """Merge defaults <- config file <- STGCAST_SEED <- explicit overrides."""
    merged = dict(file_values or {})
    known = {f.name for f in _RUN_FIELDS} | {f.name for f in _TRAIN_FIELDS}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    if env_seed:
        merged["seed"] = seed_from_env(merged.get("seed", TrainConfig.seed))
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    run_kw = {f.name: merged[f.name] for f in _RUN_FIELDS if f.name in merged}
    train_kw = {}
    for f in _TRAIN_FIELDS:
        if f.name in merged:
            kind = _field_type(f)
            try:
                train_kw[f.name] = merged[f.name] if kind is str else kind(merged[f.name])
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {f.name}: {merged[f.name]!r}") from None
    try:
        return RunConfig(train=TrainConfig(**train_kw), **run_kw)
    except InputError as exc:
        raise ConfigError(str(exc)) from None


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform(), "stgcast": __version__}


def _write_json(path: Path, payload: dict) -> None:
    with atomic_open(path) as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(cfg: RunConfig, graph_needed: bool):
    tcfg = cfg.train
    speed = _require(cfg.speed_csv, "speed CSV")
    graph = None
    prune = None
    adjacency = None
    if graph_needed:
        adjacency = _require(cfg.adjacency_csv, "adjacency CSV")
    table = load_speed_csv(speed)
    if adjacency is not None:
        prune = prune_to_detectors(load_adjacency_csv(adjacency), table.detector_ids)
        if prune.missing:
            raise CompatibilityError(
                f"{len(prune.missing)} detectors in {speed} have no adjacency node: "
                f"{list(prune.missing)[:10]}")
        graph = prune.graph
    ds = make_windows(table, tcfg.t_in, tcfg.t_out)
    return table, ds, graph, prune


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: RunConfig) -> dict:
    """load -> prune -> normalize adjacency -> window -> split -> fit -> checkpoint."""
    tcfg = cfg.train
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, ds, graph, prune = _load_dataset(cfg, graph_needed=tcfg.model_kind == GCGRU)
    result = train_model(ds, tcfg, graph)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / f"{tcfg.model_kind}.ckpt"
    save_checkpoint(ckpt, result.model, tcfg.to_dict(), ds.detector_ids)
    history = out / f"history_{tcfg.model_kind}.csv"
    write_history_csv(result.history, history, cfg.record_timing)
    manifest = {
        "command": "train",
        "config": cfg.to_dict(),
        "seed": tcfg.seed,
        "data_checksums": {k: sha256_file(v) for k, v in
                           (("speed_csv", cfg.speed_csv), ("adjacency_csv", cfg.adjacency_csv))
                           if v},
        "pruned": {"dropped": list(prune.dropped), "missing": list(prune.missing)} if prune else None,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "train_seconds": result.train_seconds,
        "epoch_seconds": [r.seconds for r in result.history],
        "outputs": {"checkpoint": str(ckpt), "checkpoint_sha256": sha256_file(ckpt),
                    "history": str(history)},
        "environment": _environment(),
    }
    _write_json(out / f"run_manifest_{tcfg.model_kind}.json", manifest)
    logger.info("trained %s: %d epochs, best %d, %.1fs", tcfg.model_kind,
                len(result.history), result.best_epoch, result.train_seconds)
    return manifest


def _check_compatible(model, header, ds: WindowedDataset, source: str) -> None:
    c = model.config
    if (c.d, c.t_in, c.t_out) != (len(ds.detector_ids), ds.t_in, ds.t_out):
        raise CompatibilityError(
            f"{source} expects d={c.d}, t_in={c.t_in}, t_out={c.t_out}; data has "
            f"d={len(ds.detector_ids)}, t_in={ds.t_in}, t_out={ds.t_out}")
    ids = header.get("detector_ids")
    if ids and tuple(ids) != tuple(ds.detector_ids):
        raise CompatibilityError(f"{source} detector ids differ from the data's")


def _emit_reports(name, val, pred_raw, norm, out: Path, normalized: bool, ids):
    rep = horizon_report(val.y, pred_raw, ids, mask=val.y_mask, model=name)
    target = out / name
    write_report(rep, target)
    write_predictions_vs_truth(val.y, pred_raw, ids, target / "predictions_vs_truth.csv")
    if normalized and norm is not None:
        rep_n = horizon_report(normalize(val.y, norm), normalize(pred_raw, norm), ids,
                               mask=val.y_mask, model=name, units="normalized")
        write_report(rep_n, target, suffix="_normalized")
    return rep


def cmd_evaluate(cfg: RunConfig) -> dict:
    """Holdout reports for the checkpointed model, the LSTM baseline and HA."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train
    models = []
    for source in (cfg.checkpoint, cfg.baseline_checkpoint):
        if source:
            model, header = load_checkpoint(_require(source, "checkpoint"))
            models.append((model, header, source))
    if models and models[0][1].get("train"):
        saved = models[0][1]["train"]
        tcfg = replace(tcfg, split=saved["split"], strict_no_leak=saved["strict_no_leak"],
                       t_in=saved["t_in"], t_out=saved["t_out"])
    cfg = replace(cfg, train=tcfg)
    _, ds, _, _ = _load_dataset(cfg, graph_needed=False)
    train, val = chronological_split(ds, tcfg.split, tcfg.strict_no_leak)
    ids = ds.detector_ids
    summary: Dict[str, dict] = {}
    timing: Dict[str, float] = {}
    norm = None
    for model, header, source in models:
        _check_compatible(model, header, ds, source)
        name = model.config.kind
        t0 = time.perf_counter()
        pred = predict_denormalized(model, val.x)
        timing[name] = time.perf_counter() - t0
        norm = norm or model.norm
        rep = _emit_reports(name, val, pred, model.norm, out, cfg.normalized_report, ids)
        summary[name] = asdict(rep.overall)
    norm = norm or NormStats.from_arrays(train.x, train.y)
    t0 = time.perf_counter()
    ha = historical_average_forecast(val.x, ds.t_out)
    timing["ha"] = time.perf_counter() - t0
    rep = _emit_reports("ha", val, ha, norm, out, cfg.normalized_report, ids)
    summary["ha"] = asdict(rep.overall)
    _write_json(out / "eval_manifest.json", {
        "command": "evaluate", "config": cfg.to_dict(), "overall": summary,
        "inference_seconds": timing, "holdout_windows": len(val),
        "ha_definition": "per-window per-detector mean of the input window",
        "environment": _environment()})
    return summary


def _format_float(v: float) -> str:
    s = "%.17g" % v
    if not any(c in s for c in ".eEn"):
        s += ".0"
    return s


def _to_json(obj) -> str:
    """Deterministic JSON with sorted keys and 17-significant-digit floats."""
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}: {_to_json(obj[k])}" for k in sorted(obj))
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_to_json(v) for v in obj) + "]"
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    return json.dumps(obj)


def cmd_predict(cfg: RunConfig) -> dict:
    """Forecast each 36-row day block of the test file; write ``submission.json``."""
    model, header = load_checkpoint(_require(cfg.checkpoint, "checkpoint"))
    ids, blocks = load_test_blocks(_require(cfg.test_csv, "test CSV"), model.config.t_in)
    saved_ids = header.get("detector_ids")
    if len(ids) != model.config.d or (saved_ids and tuple(saved_ids) != tuple(ids)):
        raise CompatibilityError(
            f"checkpoint has d={model.config.d}, test file has d={len(ids)} "
            "(or the detector ids differ)")
    for b in blocks:
        if b.values.shape != (model.config.t_in, model.config.d):
            raise BlockShapeError(f"day {b.label}: block shape {b.values.shape}")
    if blocks:
        preds = predict_denormalized(model, np.stack([b.values for b in blocks]))
    else:
        preds = np.zeros((0, model.config.t_out, model.config.d))
    payload = {
        "model": MODEL_LABELS.get(model.config.kind, model.config.kind),
        "detector_ids": list(ids),
        "days": [{"day": b.label, "prediction": p.tolist()} for b, p in zip(blocks, preds)],
    }
    out = Path(cfg.out_dir)
    with atomic_open(out / "submission.json") as fh:
        fh.write(_to_json(payload) + "\n")
    return payload


def parse_grid(spec: Optional[str]) -> dict:
    """Grid from a JSON file path or an inline JSON object."""
    if not spec:
        raise ConfigError("a grid spec is required (--grid)")
    text = spec
    if not spec.lstrip().startswith("{"):
        p = Path(spec)
        if not p.is_file():
            raise ConfigError(f"grid spec not found: {p}")
        text = p.read_text(encoding="utf-8")
    try:
        grid = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unparseable grid spec: {exc}") from None
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise ConfigError("grid spec must map parameter names to lists of values")
    return grid


def cmd_sweep(cfg: RunConfig) -> List:
    grid = parse_grid(cfg.grid)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, ds, graph, _ = _load_dataset(cfg, graph_needed=True)
    try:
        rows = grid_search(grid, ds, cfg.train, graph, jobs=cfg.jobs)
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    write_grid_csv(sorted(rows, key=lambda r: r.combo_id), out / "grid_results.csv",
                   cfg.record_timing)
    best = rows[0]
    _write_json(out / "sweep_manifest.json", {
        "command": "sweep", "config": cfg.to_dict(), "grid": grid,
        "best": {"combo_id": best.combo_id, "params": best.params, "val_mape": best.val_mape},
        "train_seconds": {str(r.combo_id): r.train_seconds for r in rows},
        "environment": _environment()})
    print(f"best combo {best.combo_id}: {json.dumps(best.params, sort_keys=True)} "
          f"val_mape={best.val_mape:.6g}")
    return rows


def cmd_gen_synthetic(cfg: RunConfig) -> dict:
    d, steps = cfg.synthetic_d, cfg.synthetic_steps
    if d < 2:
        raise ConfigError("synthetic_d must be >= 2")
    if steps < DAY_STEPS:
        raise ConfigError(f"synthetic_steps must be >= {DAY_STEPS}")
    graph = ring_graph(d)
    table = generate_synthetic(d, steps, graph, seed=cfg.train.seed)
    out = Path(cfg.out_dir)
    speeds, adjacency = out / "speeds.csv", out / "adjacency.csv"
    write_speed_csv(table, speeds)
    write_adjacency_csv(graph, adjacency)
    return {"speed_csv": str(speeds), "adjacency_csv": str(adjacency)}


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
    "gen-synthetic": cmd_gen_synthetic,
}


# ---------------------------------------------------------------------------
# argument parsing

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgcast", description=__doc__.split("\n")[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        for f in _RUN_FIELDS + _TRAIN_FIELDS:
            kind = _field_type(f)
            if kind is bool:
                p.add_argument(_flag(f.name), dest=f.name, default=None,
                               action=argparse.BooleanOptionalAction)
            else:
                p.add_argument(_flag(f.name), dest=f.name, default=None, type=kind)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    overrides = {f.name: getattr(args, f.name) for f in _RUN_FIELDS + _TRAIN_FIELDS}
    return build_config(file_values, overrides)


def _provenance(exc: BaseException) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    if not frames:
        return "stgcast"
    return "stgcast." + Path(frames[-1].filename).stem


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg)
    except NumericFaultError as exc:
        print(f"stgcast {args.command}: numeric fault [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return 1
    except (InputError, StgcastError) as exc:
        print(f"stgcast {args.command}: error [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"stgcast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
