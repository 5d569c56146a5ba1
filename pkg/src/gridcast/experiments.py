"""Named experiment registry and the end-to-end run procedure.

The registry holds the six factor variants for each task (interpolation and
forecasting) plus the four architecture baselines, 16 entries total. Each
entry materializes either at the published full scale ("paper" profile) or
at a desk scale ("desk") that adapts to the dataset at hand and keeps CPU
runtimes in minutes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .evaluation import (EvalReport, evaluate_rmse, export_heatmaps, sp_rmse,
                         variance_diagnostic)
from .models import ModelConfig, build_model, save_checkpoint
from .pipeline import GridDataset
from .seeding import sub_rng, sub_seed
from .training import TrainConfig, save_loss_curve, train

INTERP, FORECAST = "interp", "forecast"

# default synthetic-city channel counts per factor set; the paper-profile
# snapshots are pinned against this layout
_PAPER_CHANNELS = {"": 1, "met": 12, "traffic": 2, "speed": 2, "external": 4, "all": 17}


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    arch: str
    task: Optional[str]            # None: decided at run time (baselines)
    factors: tuple[str, ...] = ()
    use_st_loss: bool = False


def _factor_entries(task: str) -> list[ExperimentSpec]:
    out = [ExperimentSpec(f"{task}_base", "convlstm", task)]
    for factor in ("met", "traffic", "speed", "external", "all"):
        out.append(ExperimentSpec(f"{task}_{factor}", "convlstm", task, (factor,)))
    return out


REGISTRY: dict[str, ExperimentSpec] = {
    spec.name: spec
    for spec in (
        *_factor_entries(INTERP),
        *_factor_entries(FORECAST),
        ExperimentSpec("baseline_fc_lstm", "fc_lstm", None),
        ExperimentSpec("baseline_cnn_ed", "cnn_ed", None),
        ExperimentSpec("baseline_dal", "dal", None, ("all",), use_st_loss=True),
        ExperimentSpec("baseline_convlstm_stloss", "convlstm", None, use_st_loss=True),
    )
}

SUITES: dict[str, list[str]] = {
    "all-interp": ["interp_base", "baseline_dal", "baseline_cnn_ed",
                   "baseline_fc_lstm", "baseline_convlstm_stloss"],
    "factors-interp": [s.name for s in _factor_entries(INTERP)],
    "all-forecast": ["forecast_base", "baseline_dal", "baseline_cnn_ed",
                     "baseline_fc_lstm"],
    "factors-forecast": [s.name for s in _factor_entries(FORECAST)],
}


def lookup(name: str) -> ExperimentSpec:
    if name not in REGISTRY:
        known = ", ".join(sorted(REGISTRY))
        raise ConfigError(f"unknown experiment {name!r}; registry has: {known}")
    return REGISTRY[name]


def _paper_in_channels(spec: ExperimentSpec) -> int:
    key = spec.factors[0] if spec.factors else ""
    return _PAPER_CHANNELS[key]


def paper_configs(spec: ExperimentSpec, task: Optional[str] = None,
                  ) -> tuple[ModelConfig, TrainConfig]:
    """The exact published architecture and hyperparameters for one entry."""
    task = spec.task or task
    if task not in (INTERP, FORECAST):
        raise ConfigError(f"experiment {spec.name!r} needs an explicit task")
    interp = task == INTERP
    common = dict(grid=(32, 32), in_channels=_paper_in_channels(spec),
                  use_st_loss=spec.use_st_loss, st_loss_weight=0.1,
                  dropout=0.5, l2_beta=0.01)
    if spec.arch in ("convlstm", "cnn_ed"):
        if interp:
            model = ModelConfig(arch=spec.arch, input_steps=12, output_steps=1,
                                encoder_layers=1, forecaster_layers=1,
                                channels=[64], kernel=3, **common)
        else:
            model = ModelConfig(arch=spec.arch, input_steps=12, output_steps=12,
                                encoder_layers=3, forecaster_layers=3,
                                channels=[16, 16, 32], kernel=3, **common)
    elif spec.arch == "fc_lstm":
        model = ModelConfig(arch="fc_lstm", input_steps=12,
                            output_steps=1 if interp else 12,
                            hidden_size=2000, stacked_cells=3, **common)
    else:  # dal
        model = ModelConfig(arch="dal", input_steps=12 if interp else 24,
                            output_steps=1 if interp else 12,
                            ae_layers=4, ae_width=2000, ae_epochs=20, **common)
    train_cfg = TrainConfig(learning_rate=0.001, batch_size=128, steps=200,
                            l2_beta=0.01, dropout=0.5, optimizer="adam")
    return model, train_cfg


def desk_configs(spec: ExperimentSpec, dataset: GridDataset,
                 task: Optional[str] = None,
                 ) -> tuple[ModelConfig, TrainConfig]:
    """Shrunken configuration sized to the dataset for minutes-scale CPU runs."""
    task = spec.task or task
    if task not in (INTERP, FORECAST):
        raise ConfigError(f"experiment {spec.name!r} needs an explicit task")
    interp = task == INTERP
    grid = (dataset.spec.m, dataset.spec.n)
    in_channels = len(dataset.layout.indices_for_factors(spec.factors))
    common = dict(grid=grid, in_channels=in_channels,
                  use_st_loss=spec.use_st_loss, st_loss_weight=0.002,
                  dropout=0.0, l2_beta=1e-4)
    if spec.arch in ("convlstm", "cnn_ed"):
        if interp:
            model = ModelConfig(arch=spec.arch, input_steps=6, output_steps=1,
                                encoder_layers=1, forecaster_layers=1,
                                channels=[10], kernel=3, **common)
        else:
            model = ModelConfig(arch=spec.arch, input_steps=6, output_steps=6,
                                encoder_layers=2, forecaster_layers=2,
                                channels=[8, 12], kernel=3, **common)
    elif spec.arch == "fc_lstm":
        model = ModelConfig(arch="fc_lstm", input_steps=6,
                            output_steps=1 if interp else 6,
                            hidden_size=128, stacked_cells=3, **common)
    else:
        model = ModelConfig(arch="dal", input_steps=6 if interp else 12,
                            output_steps=1 if interp else 6,
                            ae_layers=4, ae_width=48, ae_epochs=80, **common)
    train_cfg = TrainConfig(learning_rate=0.004, batch_size=8, steps=300,
                            l2_beta=1e-4, dropout=0.0, optimizer="adam")
    return model, train_cfg


def registry_snapshot() -> dict:
    """Paper-profile configs for every entry (baselines at both tasks); the
    config-fidelity test freezes this against a stored golden."""
    snapshot = {}
    for name, spec in sorted(REGISTRY.items()):
        if spec.task is not None:
            model, train_cfg = paper_configs(spec)
            snapshot[name] = {"model": model.to_dict(), "train": train_cfg.to_dict(),
                              "factors": list(spec.factors)}
        else:
            for task in (INTERP, FORECAST):
                model, train_cfg = paper_configs(spec, task)
                snapshot[f"{name}@{task}"] = {"model": model.to_dict(),
                                              "train": train_cfg.to_dict(),
                                              "factors": list(spec.factors)}
    return snapshot


@dataclass
class RunOptions:
    profile: str = "desk"
    seed: int = 0
    task: Optional[str] = None
    max_eval_windows: Optional[int] = 200
    sp_max_windows: Optional[int] = 50
    heatmap_frames: int = 4
    model_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)


def build_configs(spec: ExperimentSpec, dataset: GridDataset, opts: RunOptions,
                  ) -> tuple[ModelConfig, TrainConfig]:
    if opts.profile == "paper":
        model_cfg, train_cfg = paper_configs(spec, opts.task)
    elif opts.profile == "desk":
        model_cfg, train_cfg = desk_configs(spec, dataset, opts.task)
    else:
        raise ConfigError(f"unknown profile {opts.profile!r}; use paper or desk")
    if opts.model_overrides:
        merged = model_cfg.to_dict()
        merged.update(opts.model_overrides)
        model_cfg = ModelConfig.from_dict(merged)
    merged = train_cfg.to_dict()
    merged["seed"] = sub_seed(opts.seed, f"{spec.name}.train")
    merged.update(opts.train_overrides)
    train_cfg = TrainConfig.from_dict(merged)
    return model_cfg, train_cfg


def run_experiment(name: str, dataset: GridDataset,
                   out_dir: Optional[Path] = None,
                   opts: Optional[RunOptions] = None) -> EvalReport:
    """Train the named variant on the dataset and evaluate it.

    Interpolation runs also report the leave-one-station error and the
    per-step variance series; every run carries the persistence reference.
    """
    opts = opts or RunOptions()
    spec = lookup(name)
    started = time.perf_counter()

    model_cfg, train_cfg = build_configs(spec, dataset, opts)
    train_windows = dataset.windows("train", model_cfg.input_steps,
                                    model_cfg.output_steps, spec.factors)
    test_windows = dataset.windows("test", model_cfg.input_steps,
                                   model_cfg.output_steps, spec.factors)

    model = build_model(model_cfg, sub_rng(opts.seed, f"{name}.init"))
    result = train(model, train_windows, train_cfg)

    scores = evaluate_rmse(model, test_windows, dataset,
                           max_windows=opts.max_eval_windows)
    interp_run = model_cfg.output_steps == 1
    sp = None
    if interp_run:
        sp = sp_rmse(model, test_windows, dataset, max_windows=opts.sp_max_windows)

    # first ten evaluated steps, denormalized, for the variance comparison
    pred_frames = [p[0] for p in scores["predictions"][:10]]
    used = test_windows[:len(pred_frames)]
    actual_frames = [dataset.denormalize_pollutant(w.target[0]) for w in used]
    mask = used[0].target_mask[0] if used else np.zeros(model_cfg.grid)
    series, truncated = variance_diagnostic(pred_frames, actual_frames, mask)

    report = EvalReport(
        name=name,
        rmse=scores["rmse"],
        sp_rmse=sp,
        rmse_persistence=scores["rmse_persistence"],
        per_step_rmse=scores["per_step_rmse"],
        variance_series=series,
        variance_truncated=truncated,
        config={"experiment": name, "profile": opts.profile,
                "factors": list(spec.factors),
                "model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        train_windows=len(train_windows),
        eval_windows=scores["eval_windows"],
        seed=opts.seed,
        wall_clock_sec=time.perf_counter() - started,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / "report.json")
        save_loss_curve(out_dir / "loss_curve.csv", result.loss_curve)
        save_checkpoint(out_dir / "checkpoint", model, training_step=result.steps)
        export_heatmaps(out_dir / "heatmaps", "predicted", pred_frames,
                        limit=opts.heatmap_frames)
        export_heatmaps(out_dir / "heatmaps", "actual", actual_frames,
                        limit=opts.heatmap_frames)
    return report


def run_suite(suite: str, dataset: GridDataset, out_dir: Optional[Path] = None,
              opts: Optional[RunOptions] = None) -> list[EvalReport]:
    if suite not in SUITES:
        known = ", ".join(sorted(SUITES))
        raise ConfigError(f"unknown suite {suite!r}; available: {known}")
    opts = opts or RunOptions()
    task = INTERP if suite.endswith("interp") else FORECAST
    reports = []
    for name in SUITES[suite]:
        entry_opts = RunOptions(**{**opts.__dict__, "task": task})
        entry_dir = None if out_dir is None else Path(out_dir) / name
        reports.append(run_experiment(name, dataset, entry_dir, entry_opts))
    return reports
