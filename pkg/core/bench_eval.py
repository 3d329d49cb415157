import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from core import PowerFlowLabError
from core.dc_solver import line_flows_from_angles, solve_sample
from core.grid_model import DimensionMismatch
from core.mp_engine import MpConfig, NotConverged, mp_solve_batch
from core.neural_core import (MLP, MLP_REG, PIMP, Prediction, TrainConfig, forward,
                              line_angles_from_slots, predict_batch, prepare_dataset, train)
from core.scenario_gen import OOD, TEST, TRAIN, VAL
from utils.storage import write_json

MP_OPT = "mp_opt"
TABLE_MODELS = (MLP, MLP_REG, MP_OPT, PIMP)
EVAL_SPLITS = (TEST, OOD)

TABLE_METRICS = (
    "test_mae", "test_mape90", "ood_mae", "ood_mape90", "speedup",
    "p5_test", "p5_ood", "p5_mape_test", "p5_mape_ood",
)
TABLE_LABELS = {
    MLP: "MLP",
    MLP_REG: "MLP Reg",
    MP_OPT: "MP Opt",
    PIMP: "PIMP",
}


@dataclass
class Thresholds:
    tau_lc: float = 1e-2
    tau_loss: float = 1e-6
    tau_null: float = 1e-6
    loss_range: tuple = (0.005, 0.04)
    min_balance: float = 1e-9

    def __post_init__(self):
        self.loss_range = tuple(float(v) for v in self.loss_range)

    @classmethod
    def from_dict(cls, values):
        return cls(**{k: v for k, v in values.items() if k in cls.__dataclass_fields__})

    def to_dict(self):
        out = asdict(self)
        out["loss_range"] = list(self.loss_range)
        return out


# ---------------------------------------------------------------- ML metrics

def _select(y_true, y_pred, mask):
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise DimensionMismatch(f"targets have shape {y_true.shape}, predictions {y_pred.shape}")
    if mask is None:
        return y_true.ravel(), y_pred.ravel()
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), y_true.shape)
    return y_true[mask], y_pred[mask]


def mae(y_true, y_pred, mask=None):
    y_true, y_pred = _select(y_true, y_pred, mask)
    if y_true.size == 0:
        raise ValueError("mae over an empty selection")
    return float(np.mean(np.abs(y_true - y_pred)))


def mape90(y_true, y_pred, mask=None):
    """MAPE over the top decile of |y_true|.

    The threshold is the value of rank n - ceil(n / 10) in ascending order, so
    exactly the largest tenth (ties included) is selected. Zero targets are
    dropped; if nothing remains the result is None.
    """
    y_true, y_pred = _select(y_true, y_pred, mask)
    n = y_true.size
    if n == 0:
        raise ValueError("mape90 over an empty selection")
    magnitude = np.abs(y_true)
    n_top = max(1, math.ceil(0.1 * n))
    threshold = np.sort(magnitude)[n - n_top]
    chosen = (magnitude >= threshold) & (magnitude > 0)
    if not chosen.any():
        return None
    return float(np.mean(np.abs(y_true[chosen] - y_pred[chosen]) / magnitude[chosen]))


@dataclass
class MetricReport:
    mae: float
    mape90: object
    breakdown: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _line_matrix(theta_line):
    """(N, L, 2) extremity angles to the (N, 2L) [or | ex] layout of the targets"""
    return np.concatenate([theta_line[:, :, 0], theta_line[:, :, 1]], axis=1)


def _predicted_flows(prediction, data, grid):
    return line_flows_from_angles(prediction.theta_line[:, :, 0], prediction.theta_line[:, :, 1],
                                  data.line_status, grid.susceptances)


def metric_report(prediction, data, grid, truth):
    """MAE and MAPE90 on line angles (primary), bus angles and origin flows"""
    primary = (data.theta_line, _line_matrix(prediction.theta_line))
    breakdown = {"theta_line": {"mae": mae(*primary), "mape90": mape90(*primary)}}
    if prediction.theta_bus is not None:
        bus = (data.theta_bus, prediction.theta_bus, data.bus_mask)
        breakdown["theta_bus"] = {"mae": mae(*bus), "mape90": mape90(*bus)}
    flows = _predicted_flows(prediction, data, grid)
    breakdown["p_or"] = {"mae": mae(truth["p_or"], flows.p_or), "mape90": mape90(truth["p_or"], flows.p_or)}
    return MetricReport(breakdown["theta_line"]["mae"], breakdown["theta_line"]["mape90"], breakdown)


# ----------------------------------------------------------- physics metrics

@dataclass
class PhysicsReport:
    p1: float
    p2: float
    p3: float
    p3_applicable: bool
    p4: object
    p4_excluded: int
    p5: float
    p5_mape: object
    p5_threshold: float
    n_samples: int
    thresholds: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _proportion(hits, total):
    return float(hits) / float(total) if total else 0.0


def lc_violations(theta_line, data, grid):
    """Per-slot local-conservation error from predicted line angles.

    E = p - sum of predicted flows leaving each bus slot; only energized,
    non-slack slots are returned as valid.
    """
    n = theta_line.shape[0]
    flows = line_flows_from_angles(theta_line[:, :, 0], theta_line[:, :, 1], data.line_status, grid.susceptances)
    error = np.array(data.p, dtype=float)
    rows = np.broadcast_to(np.arange(n)[:, None], data.line_slots[:, :, 0].shape)
    np.add.at(error, (rows, data.line_slots[:, :, 0]), -flows.p_or)
    np.add.at(error, (rows, data.line_slots[:, :, 1]), -flows.p_ex)
    valid = data.bus_mask & (np.arange(error.shape[1]) != data.slack_slot[:, None])
    return error, valid, flows


def physics_report(prediction, data, grid, thresholds=None):
    thresholds = thresholds or Thresholds()
    error, valid, flows = lc_violations(prediction.theta_line, data, grid)
    losses = flows.p_or + flows.p_ex
    connected = data.line_status
    disconnected = ~connected

    p1 = _proportion(np.count_nonzero((losses < -thresholds.tau_loss) & connected), np.count_nonzero(connected))
    carrying = (np.abs(flows.p_or) + np.abs(flows.p_ex)) > thresholds.tau_null
    p2 = _proportion(np.count_nonzero(carrying & disconnected), np.count_nonzero(disconnected))

    g, d = grid.n_generators, grid.n_loads
    production = data.x[:, :g].sum(axis=1)
    consumption = data.x[:, g:g + d].sum(axis=1)
    total_losses = losses.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(production > 0, total_losses / production, np.nan)
    lo, hi = thresholds.loss_range
    p3 = _proportion(np.count_nonzero((ratio >= lo) & (ratio <= hi)), len(ratio))
    p3_applicable = bool(np.any(np.abs(losses) > thresholds.tau_loss))

    balance = production - consumption
    kept = np.abs(balance) >= thresholds.min_balance
    p4 = None
    if kept.any():
        p4 = float(np.mean(np.abs(balance[kept] - total_losses[kept]) / np.abs(balance[kept])))

    residual = np.abs(error[valid])
    p5 = _proportion(np.count_nonzero(residual > thresholds.tau_lc), residual.size)
    injected = np.abs(data.p[valid])
    nonzero = injected > thresholds.min_balance
    p5_mape = float(np.mean(residual[nonzero] / injected[nonzero])) if nonzero.any() else None

    return PhysicsReport(
        p1=p1, p2=p2, p3=p3, p3_applicable=p3_applicable,
        p4=p4, p4_excluded=int(np.count_nonzero(~kept)),
        p5=p5, p5_mape=p5_mape, p5_threshold=thresholds.tau_lc,
        n_samples=int(len(data)), thresholds=thresholds.to_dict(),
    )


# ---------------------------------------------------------------- predictors

class DcSolverPredictor:
    """Exact solver, one sample at a time; the speed-up reference"""

    name = "dc_solver"

    def infer(self, grid, dataset, data=None):
        n = len(dataset)
        theta_bus = np.zeros((n, 2 * grid.n_substations))
        theta_line = np.zeros((n, grid.n_lines, 2))
        for i, sample in enumerate(dataset.samples):
            bg, _, _, solution, _ = solve_sample(grid, sample.tau, sample.inj)
            theta_bus[i] = bg.to_slots(solution.theta)
            theta_line[i, :, 0], theta_line[i, :, 1] = bg.line_angles(solution.theta)
        return Prediction(theta_bus, theta_line)


class MpOptPredictor:
    """Flat-start message passing run to tolerance on the whole batch"""

    name = MP_OPT

    def __init__(self, config=None):
        self.config = config or MpConfig()
        self.last_result = None

    def infer(self, grid, dataset, data=None):
        data = data if data is not None else prepare_dataset(grid, dataset)
        result = mp_solve_batch(data.Y, data.p, data.slack_slot, self.config.n_layers,
                                self.config.damping, self.config.tol)
        self.last_result = result
        if not result.converged.all():
            n_bad = int(np.count_nonzero(~result.converged))
            worst = float(result.per_sample_max[-1].max())
            raise NotConverged(
                f"{n_bad} of {len(result.converged)} samples above tol {self.config.tol:.1e} "
                f"after {self.config.n_layers} layers (worst residual {worst:.3e})",
                result.theta, result.trajectory, worst)
        return Prediction(result.theta, line_angles_from_slots(result.theta, data))


class LearnedPredictor:
    def __init__(self, params, model_kind, pimp_layers=50, damping=1.0):
        self.params = params
        self.model_kind = model_kind
        self.name = model_kind
        self.pimp_layers = pimp_layers
        self.damping = damping

    def infer(self, grid, dataset, data=None):
        if data is None:
            data = prepare_dataset(grid, dataset, with_matrix=self.model_kind == PIMP)
        return predict_batch(self.params, self.model_kind, data, self.pimp_layers, self.damping)


# -------------------------------------------------------------------- timing

@dataclass
class SpeedupResult:
    ratio: float
    solver_times: list
    model_times: list

    def to_dict(self):
        return asdict(self)


def _timed(fn):
    started = time.perf_counter()
    fn()
    return time.perf_counter() - started


def speedup(predictor, grid, dataset, repeats=5, baseline=None):
    """Median over repeats of t(solver, per sample) / t(model, batched).

    Both sides include their own input preparation and exclude dataset I/O.
    One untimed warm-up pass runs on a small prefix first.
    """
    baseline = baseline or DcSolverPredictor()
    warmup = dataset.subset(min(len(dataset), 16))
    baseline.infer(grid, warmup)
    predictor.infer(grid, warmup)
    solver_times, model_times = [], []
    for _ in range(max(1, int(repeats))):
        solver_times.append(_timed(lambda: baseline.infer(grid, dataset)))
        model_times.append(_timed(lambda: predictor.infer(grid, dataset)))
    ratios = np.array(solver_times) / np.maximum(np.array(model_times), 1e-12)
    return SpeedupResult(float(np.median(ratios)), solver_times, model_times)


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    metrics: MetricReport
    physics: PhysicsReport
    prediction: Prediction

    def to_dict(self):
        return {"metrics": self.metrics.to_dict(), "physics": self.physics.to_dict()}


def evaluate_predictor(predictor, grid, dataset, thresholds=None, data=None):
    data = data if data is not None else prepare_dataset(grid, dataset)
    prediction = predictor.infer(grid, dataset, data)
    truth = dataset.to_arrays()
    return Evaluation(metric_report(prediction, data, grid, truth),
                      physics_report(prediction, data, grid, thresholds), prediction)


# ------------------------------------------------------------ benchmark table

def _summary(values):
    kept = [v for v in values if v is not None]
    if not kept:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(kept)), "std": float(np.std(kept)), "n": len(kept)}


@dataclass
class BenchmarkTable:
    grid: str
    seeds: list
    n_runs: int
    thresholds: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    reports: dict = field(default_factory=dict, repr=False)
    trajectories: dict = field(default_factory=dict, repr=False)
    warm_start: dict = field(default_factory=dict, repr=False)

    def record(self, model, metric, value):
        self.cells.setdefault(model, {}).setdefault(metric, []).append(value)

    def mark_failed(self, model, seed, error):
        self.failures.append({"model": model, "seed": seed, "error": f"{type(error).__name__}: {error}"})

    def failed(self, model):
        return [f for f in self.failures if f["model"] == model]

    def summary(self, model, metric):
        return _summary(self.cells.get(model, {}).get(metric, []))

    @property
    def models(self):
        ordered = [m for m in TABLE_MODELS if m in self.cells or self.failed(m)]
        extra = sorted(m for m in self.cells if m not in TABLE_MODELS)
        return ordered + extra

    def to_dict(self):
        return {
            "grid": self.grid,
            "seeds": list(self.seeds),
            "n_runs": self.n_runs,
            "thresholds": self.thresholds,
            "summary": {m: {k: self.summary(m, k) for k in TABLE_METRICS} for m in self.models},
            "cells": self.cells,
            "runs": self.runs,
            "timings": self.timings,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            grid=payload["grid"],
            seeds=payload.get("seeds", []),
            n_runs=payload.get("n_runs", 0),
            thresholds=payload.get("thresholds", {}),
            cells=payload.get("cells", {}),
            runs=payload.get("runs", []),
            timings=payload.get("timings", {}),
            failures=payload.get("failures", []),
        )

    def to_markdown(self):
        def cell(model, metric, percent=False):
            s = self.summary(model, metric)
            if s["mean"] is None:
                return "failed" if self.failed(model) else "n/a"
            if percent:
                return f"{100 * s['mean']:.1f}% ± {100 * s['std']:.1f}"
            if metric == "speedup":
                return f"{s['mean']:.2f} ± {s['std']:.2f}"
            return f"{s['mean']:.2e} ± {s['std']:.1e}"

        lines = [
            f"## Benchmark on {self.grid} ({self.n_runs} runs, seeds {', '.join(str(s) for s in self.seeds)})",
            "",
            "| Model | MAE test | MAPE90 test | MAE OOD | MAPE90 OOD | Speed-up | P5 test | P5 OOD |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for model in self.models:
            lines.append("| " + " | ".join([
                TABLE_LABELS.get(model, model),
                cell(model, "test_mae"), cell(model, "test_mape90"),
                cell(model, "ood_mae"), cell(model, "ood_mape90"),
                cell(model, "speedup"),
                cell(model, "p5_test", percent=True), cell(model, "p5_ood", percent=True),
            ]) + " |")
        lines += [
            "",
            f"P5 = share of (sample, non-slack bus) pairs with |E| > {self.thresholds.get('tau_lc', 1e-2):g} p.u.",
            "P3 is not applicable under DC: line losses are identically zero.",
        ]
        if self.failures:
            lines += ["", "### Failed runs", ""]
            lines += [f"- {f['model']} seed {f['seed']}: {f['error']}" for f in self.failures]
        return "\n".join(lines) + "\n"


def _train_config(train_configs, kind, seed):
    base = (train_configs or {}).get(kind) or TrainConfig(model_kind=kind)
    return replace(base, model_kind=kind, seed=int(seed))


def warm_start_comparison(params, dataset, grid, depth=50, damping=1.0, data=None):
    """Per-layer mean LC residual of MP chains from flat and from learned starts at equal depth"""
    data = data if data is not None else prepare_dataset(grid, dataset)
    if params.n_outputs != data.bus_mask.shape[1]:
        raise DimensionMismatch(f"warm start needs a bus-level network ({data.bus_mask.shape[1]} outputs), "
                                f"got {params.n_outputs}")
    theta0 = np.where(data.bus_mask, forward(params, data.x), 0.0)
    flat = mp_solve_batch(data.Y, data.p, data.slack_slot, depth, damping)
    warm = mp_solve_batch(data.Y, data.p, data.slack_slot, depth, damping, theta0=theta0)
    flat_mean = flat.per_sample_mean.mean(axis=1)
    warm_mean = warm.per_sample_mean.mean(axis=1)
    with np.errstate(divide="ignore"):
        return pd.DataFrame({
            "layer": np.arange(1, depth + 1),
            "flat_mean": flat_mean,
            "flat_std": flat.per_sample_mean.std(axis=1),
            "warm_mean": warm_mean,
            "warm_std": warm.per_sample_mean.std(axis=1),
            "log10_flat_mean": np.log10(flat_mean),
            "log10_warm_mean": np.log10(warm_mean),
        })


def run_benchmark(grid, model_kinds, datasets, n_runs, seeds, train_configs=None, mp_config=None,
                  thresholds=None, timing_repeats=5, logger=None, warm_start_depth=50, verbose=True):
    """Train and score every model kind over n_runs seeds on the test and OOD splits.

    A run that raises a domain error is recorded as failed and the loop moves on.
    """
    seeds = list(seeds)[:n_runs]
    if len(seeds) < n_runs:
        raise ValueError(f"{n_runs} runs requested but only {len(seeds)} seeds given")
    thresholds = thresholds or Thresholds()
    mp_config = mp_config or MpConfig()
    table = BenchmarkTable(grid.name, seeds, n_runs, thresholds.to_dict())
    prepared = {split: prepare_dataset(grid, ds) for split, ds in datasets.items()}

    for seed in seeds:
        for kind in model_kinds:
            run_id = f"{kind}-seed{seed}"
            if verbose:
                print(f"🔧 {run_id}")
            try:
                if kind == MP_OPT:
                    predictor = MpOptPredictor(mp_config)
                else:
                    config = _train_config(train_configs, kind, seed)
                    params, report = train(kind, prepared[TRAIN], prepared[VAL], config, logger, run_id)
                    table.reports[run_id] = report
                    predictor = LearnedPredictor(params, kind, config.pimp_layers, config.damping)

                timing = speedup(predictor, grid, datasets[TEST], timing_repeats)
                table.record(kind, "speedup", timing.ratio)
                table.timings[run_id] = timing.to_dict()

                for split in EVAL_SPLITS:
                    evaluation = evaluate_predictor(predictor, grid, datasets[split], thresholds, prepared[split])
                    table.record(kind, f"{split}_mae", evaluation.metrics.mae)
                    table.record(kind, f"{split}_mape90", evaluation.metrics.mape90)
                    table.record(kind, f"p5_{split}", evaluation.physics.p5)
                    table.record(kind, f"p5_mape_{split}", evaluation.physics.p5_mape)
                    table.runs.append({"model": kind, "seed": seed, "split": split, **evaluation.to_dict()})
                    if kind == MP_OPT:
                        table.trajectories[f"{run_id}-{split}"] = predictor.last_result.trajectory
                    if logger is not None:
                        logger.log_evaluation(run_id, kind, split, evaluation.metrics, evaluation.physics,
                                              timing.ratio if split == TEST else None)
                    if verbose:
                        print(f"   {split}: MAE {evaluation.metrics.mae:.3e} | P5 {100 * evaluation.physics.p5:.1f}%")

                if kind == PIMP and warm_start_depth:
                    table.warm_start[run_id] = warm_start_comparison(
                        predictor.params, datasets[TEST], grid, warm_start_depth, predictor.damping, prepared[TEST])
            except PowerFlowLabError as e:
                table.mark_failed(kind, seed, e)
                if logger is not None:
                    logger.log_failure(run_id, kind, e)
                else:
                    print(f"❌ {run_id} failed: {e}")
    return table


def train_size_sweep(grid, kinds, datasets, sizes, seeds, train_configs=None, logger=None, verbose=True):
    """Test MAE of each learned kind trained on growing prefixes of the train split"""
    prepared = {split: prepare_dataset(grid, datasets[split]) for split in (TRAIN, VAL, TEST)}
    truth = datasets[TEST].to_arrays()
    rows = []
    for kind in kinds:
        if kind == MP_OPT:
            continue
        for seed in seeds:
            for size in sizes:
                run_id = f"{kind}-seed{seed}-n{size}"
                row = {"model": kind, "seed": seed, "train_size": int(size),
                       "test_mae": None, "test_mape90": None, "error": ""}
                try:
                    config = _train_config(train_configs, kind, seed)
                    params, _ = train(kind, prepared[TRAIN].subset(size), prepared[VAL], config, logger, run_id)
                    prediction = LearnedPredictor(params, kind, config.pimp_layers, config.damping).infer(
                        grid, datasets[TEST], prepared[TEST])
                    metrics = metric_report(prediction, prepared[TEST], grid, truth)
                    row.update(test_mae=metrics.mae, test_mape90=metrics.mape90)
                except PowerFlowLabError as e:
                    row["error"] = str(e)
                    print(f"❌ {run_id} failed: {e}")
                if verbose and not row["error"]:
                    print(f"📊 {run_id}: test MAE {row['test_mae']:.3e}")
                rows.append(row)
    return pd.DataFrame(rows, columns=["model", "seed", "train_size", "test_mae", "test_mape90", "error"])


# ------------------------------------------------------------------- outputs

def _write_curve(frame, path, name):
    target = os.path.join(path, name)
    frame.to_csv(target, index=False, float_format="%.17g")
    return target


def export_curves(reports, trajectories, path, warm_start=None):
    """Loss, data/physics and residual-trajectory CSVs; returns the written paths"""
    os.makedirs(path, exist_ok=True)
    written = []
    by_model = {}
    for run_id, report in sorted(reports.items()):
        frame = report.to_frame()
        frame.insert(1, "run_id", run_id)
        by_model.setdefault(report.model_kind, []).append(frame)
    for model, frames in sorted(by_model.items()):
        frame = pd.concat(frames, ignore_index=True)
        written.append(_write_curve(frame[["epoch", "run_id", "train_loss", "val_loss"]], path, f"{model}_loss.csv"))
        written.append(_write_curve(frame[["epoch", "run_id", "data_loss", "physics_loss"]], path,
                                    f"{model}_data_physics.csv"))
    for label, trajectory in sorted(trajectories.items()):
        frame = trajectory.to_frame()
        frame.insert(1, "run_id", label)
        written.append(_write_curve(frame, path, f"trajectory_{label}.csv"))
    for label, frame in sorted((warm_start or {}).items()):
        frame = frame.copy()
        frame.insert(1, "run_id", label)
        written.append(_write_curve(frame, path, f"warm_start_{label}.csv"))
    return written


def write_benchmark(table, directory):
    os.makedirs(directory, exist_ok=True)
    json_path = os.path.join(directory, "benchmark.json")
    md_path = os.path.join(directory, "benchmark.md")
    write_json(json_path, table.to_dict())
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(table.to_markdown())
    return json_path, md_path
