"""Evaluation instruments: station-masked RMSE, leave-one-station recovery
error, and the per-step variance diagnostic, plus the report and heatmap
outputs.

All reported errors are computed on denormalized (physical-unit) values.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .pipeline import GridDataset, SampleWindow

SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "rmse", "config", "wall_clock_sec"],
    "properties": {
        "schema_version": {"type": "integer"},
        "name": {"type": "string"},
        "rmse": {"type": "number", "minimum": 0},
        "sp_rmse": {"type": ["number", "null"], "minimum": 0},
        "rmse_persistence": {"type": ["number", "null"], "minimum": 0},
        "per_step_rmse": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "variance_series": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["step", "var_pred", "var_actual"],
                "properties": {
                    "step": {"type": "integer", "minimum": 0},
                    "var_pred": {"type": "number", "minimum": 0},
                    "var_actual": {"type": "number", "minimum": 0},
                },
            },
        },
        "variance_truncated": {"type": "boolean"},
        "config": {"type": "object"},
        "train_windows": {"type": "integer"},
        "eval_windows": {"type": "integer"},
        "seed": {"type": "integer"},
        "wall_clock_sec": {"type": "number", "minimum": 0},
    },
}


def worker_count() -> int:
    """Parallelism cap from GRIDCAST_THREADS; defaults to serial."""
    raw = os.environ.get("GRIDCAST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def masked_rmse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Root mean squared error over the (step, cell) pairs the mask marks."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != pred.shape:
        if mask.shape == pred.shape[-2:]:
            mask = np.broadcast_to(mask, pred.shape)
        else:
            raise DimensionError(f"mask {mask.shape} does not fit prediction {pred.shape}")
    count = mask.sum()
    if count == 0:
        raise ContractError("mask selects no cells")
    return float(np.sqrt((((pred - target) ** 2) * mask).sum() / count))


def predict(model, window: SampleWindow) -> np.ndarray:
    """Forward pass without tape recording; returns the raw (K, M, N) array."""
    return model.forward(window.inputs).data


def persistence_prediction(window: SampleWindow) -> np.ndarray:
    """The trivial forecaster: repeat the last observed pollutant frame."""
    last = window.inputs[-1, 0]
    return np.broadcast_to(last, window.target.shape).copy()


def evaluate_rmse(model, windows: Sequence[SampleWindow], dataset: GridDataset,
                  max_windows: Optional[int] = None) -> dict:
    """Masked RMSE on denormalized values, with the per-step breakdown and
    the persistence reference computed on the same windows."""
    if not windows:
        raise ContractError("no evaluation windows")
    use = windows[:max_windows] if max_windows else windows
    steps = use[0].target.shape[0]
    sq_model = np.zeros(steps)
    sq_persist = 0.0
    counts = np.zeros(steps)
    predictions = []
    for w in use:
        pred = dataset.denormalize_pollutant(predict(model, w))
        target = dataset.denormalize_pollutant(w.target)
        persist = dataset.denormalize_pollutant(persistence_prediction(w))
        mask = w.target_mask
        predictions.append(pred)
        sq_model += (((pred - target) ** 2) * mask).sum(axis=(1, 2))
        sq_persist += (((persist - target) ** 2) * mask).sum()
        counts += mask.sum(axis=(1, 2))
    total = counts.sum()
    return {
        "rmse": float(np.sqrt(sq_model.sum() / total)),
        "per_step_rmse": list(np.sqrt(sq_model / np.maximum(counts, 1))),
        "rmse_persistence": float(np.sqrt(sq_persist / total)),
        "predictions": predictions,
        "eval_windows": len(use),
    }


def _station_cells(windows: Sequence[SampleWindow]) -> list[tuple[int, int]]:
    union = np.zeros(windows[0].target_mask.shape[1:], dtype=bool)
    for w in windows:
        union |= w.target_mask.any(axis=0) > 0
    return [tuple(c) for c in np.argwhere(union)]


def _zeroed_inputs(window: SampleWindow, cell: tuple[int, int],
                   last_frame_only: bool) -> np.ndarray:
    inputs = window.inputs.copy()
    r, c = cell
    if last_frame_only:
        inputs[-1, 0, r, c] = 0.0
    else:
        inputs[:, 0, r, c] = 0.0
    return inputs


def sp_rmse(model, windows: Sequence[SampleWindow], dataset: GridDataset,
            max_windows: Optional[int] = None, last_frame_only: bool = False) -> float:
    """Leave-one-station recovery error.

    For each station cell, zero its pollutant input across the window (its
    covariates stay), run inference, and measure the denormalized error at
    that cell against the target; the result is the mean of the per-station
    RMSEs. Stations fan out over GRIDCAST_THREADS when allowed.
    """
    if not windows:
        raise ContractError("no evaluation windows")
    use = windows[:max_windows] if max_windows else windows
    cells = _station_cells(use)
    if not cells:
        raise ContractError("mask selects no cells")

    def station_error(cell) -> float:
        r, c = cell
        sq, count = 0.0, 0
        for w in use:
            mask_here = w.target_mask[:, r, c]
            if not mask_here.any():
                continue
            pred = dataset.denormalize_pollutant(
                model.forward(_zeroed_inputs(w, cell, last_frame_only)).data[:, r, c])
            target = dataset.denormalize_pollutant(w.target[:, r, c])
            sq += float((((pred - target) ** 2) * mask_here).sum())
            count += int(mask_here.sum())
        return math.sqrt(sq / count) if count else math.nan

    threads = worker_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            errors = list(pool.map(station_error, cells))
    else:
        errors = [station_error(cell) for cell in cells]
    errors = [e for e in errors if not math.isnan(e)]
    return float(np.mean(errors))


def sp_rmse_naive(model, windows: Sequence[SampleWindow], dataset: GridDataset,
                  max_windows: Optional[int] = None, last_frame_only: bool = False) -> float:
    """Plain two-loop restatement of the leave-one-station procedure, kept
    deliberately free of the batched bookkeeping above."""
    if not windows:
        raise ContractError("no evaluation windows")
    use = windows[:max_windows] if max_windows else windows
    m, n = use[0].target_mask.shape[1:]
    station_errors = []
    for r in range(m):
        for c in range(n):
            if not any(w.target_mask[:, r, c].any() for w in use):
                continue
            squared = []
            for w in use:
                modified = w.inputs.copy()
                if last_frame_only:
                    modified[-1, 0, r, c] = 0.0
                else:
                    modified[:, 0, r, c] = 0.0
                pred = model.forward(modified).data
                for k in range(w.target.shape[0]):
                    if w.target_mask[k, r, c]:
                        p = dataset.denormalize_pollutant(np.array(pred[k, r, c]))
                        a = dataset.denormalize_pollutant(np.array(w.target[k, r, c]))
                        squared.append(float(p - a) ** 2)
            if squared:
                station_errors.append(math.sqrt(sum(squared) / len(squared)))
    return float(np.mean(station_errors))


def variance_diagnostic(pred_frames: Sequence[np.ndarray],
                        actual_frames: Sequence[np.ndarray],
                        mask: np.ndarray, steps: int = 10) -> tuple[list[dict], bool]:
    """Population variance of all predicted cells vs the actual station
    values, per step. Returns the series and whether it was truncated for
    lack of steps."""
    available = min(len(pred_frames), len(actual_frames))
    truncated = available < steps
    series = []
    mask2 = np.asarray(mask) > 0
    if mask2.ndim != 2:
        raise DimensionError("variance diagnostic needs a (M, N) station mask")
    for step in range(min(steps, available)):
        pred = np.asarray(pred_frames[step], dtype=np.float64)
        actual = np.asarray(actual_frames[step], dtype=np.float64)
        station_vals = actual[mask2]
        series.append({
            "step": step,
            "var_pred": float(np.var(pred)),
            "var_actual": float(np.var(station_vals)),
        })
    return series, truncated


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rmse: float
    config: dict
    name: str = ""
    sp_rmse: Optional[float] = None
    rmse_persistence: Optional[float] = None
    per_step_rmse: list[float] = field(default_factory=list)
    variance_series: list[dict] = field(default_factory=list)
    variance_truncated: bool = False
    train_windows: int = 0
    eval_windows: int = 0
    seed: int = 0
    wall_clock_sec: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "rmse": self.rmse,
            "sp_rmse": self.sp_rmse,
            "rmse_persistence": self.rmse_persistence,
            "per_step_rmse": list(self.per_step_rmse),
            "variance_series": list(self.variance_series),
            "variance_truncated": self.variance_truncated,
            "config": self.config,
            "train_windows": self.train_windows,
            "eval_windows": self.eval_windows,
            "seed": self.seed,
            "wall_clock_sec": self.wall_clock_sec,
        }

    def validate(self) -> None:
        import jsonschema

        jsonschema.validate(self.to_dict(), REPORT_SCHEMA)

    def save(self, path) -> None:
        self.validate()
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(rmse=d["rmse"], config=d["config"], name=d.get("name", ""),
                   sp_rmse=d.get("sp_rmse"), rmse_persistence=d.get("rmse_persistence"),
                   per_step_rmse=list(d.get("per_step_rmse", [])),
                   variance_series=list(d.get("variance_series", [])),
                   variance_truncated=d.get("variance_truncated", False),
                   train_windows=d.get("train_windows", 0),
                   eval_windows=d.get("eval_windows", 0),
                   seed=d.get("seed", 0),
                   wall_clock_sec=d.get("wall_clock_sec", 0.0),
                   schema_version=d.get("schema_version", SCHEMA_VERSION))

    @classmethod
    def load(cls, path) -> "EvalReport":
        report = cls.from_dict(json.loads(Path(path).read_text()))
        report.validate()
        return report


# ---------------------------------------------------------------------------
# heatmaps


def write_pgm(path, grid: np.ndarray) -> None:
    """Binary P5 image of a normalized grid; values clamp into [0, 255]."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DimensionError(f"heatmap needs a 2-d grid, got {grid.shape}")
    pixels = np.clip(grid * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def write_heatmap_csv(path, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid, dtype=np.float64), delimiter=",", fmt="%.6f")


def export_heatmaps(out_dir, name: str, frames: Sequence[np.ndarray],
                    limit: int = 4) -> list[Path]:
    """PGM + CSV pair per frame for eyeballing interpolation quality."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    peak = max(float(np.max(f)) for f in frames[:limit]) or 1.0
    for i, frame in enumerate(frames[:limit]):
        base = out_dir / f"{name}_{i:02d}"
        write_pgm(base.with_suffix(".pgm"), np.asarray(frame) / peak)
        write_heatmap_csv(base.with_suffix(".csv"), frame)
        written += [base.with_suffix(".pgm"), base.with_suffix(".csv")]
    return written


def evaluation_wall_clock(started: float) -> float:
    return time.perf_counter() - started
