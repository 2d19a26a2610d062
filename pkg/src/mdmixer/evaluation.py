"""Metrics, the benchmark evaluation protocol, seed aggregation, and the
interpretability exports (gate-weight heatmap, per-granularity forecasts)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import baseline_forward
from .config import BaselineConfig, ModelConfig
from .data import WindowBatch
from .model import ForecastOutput, ParamSet, forward

EVAL_BATCH = 256


@dataclass
class MetricRow:
    dataset: str
    horizon: int
    seed: int
    mse: float
    mae: float


@dataclass
class SeedSummary:
    dataset: str
    horizon: int
    runs: int
    mse_mean: float
    mse_std: float
    mae_mean: float
    mae_std: float


def mse(y: np.ndarray, y_true: np.ndarray) -> float:
    if y.shape != y_true.shape:
        raise ValueError(f"metric shapes differ: {y.shape} vs {y_true.shape}")
    diff = np.asarray(y, dtype=np.float64) - np.asarray(y_true, dtype=np.float64)
    return float(np.square(diff).mean())


def mae(y: np.ndarray, y_true: np.ndarray) -> float:
    if y.shape != y_true.shape:
        raise ValueError(f"metric shapes differ: {y.shape} vs {y_true.shape}")
    diff = np.asarray(y, dtype=np.float64) - np.asarray(y_true, dtype=np.float64)
    return float(np.abs(diff).mean())


def predict(x: np.ndarray, params: ParamSet,
            cfg: ModelConfig | BaselineConfig) -> np.ndarray:
    """Forecast (B x F x C) from either the main model or a baseline."""
    if isinstance(cfg, BaselineConfig):
        return baseline_forward(x, params, cfg)
    return forward(x, params, cfg).final


def streaming_metrics(params: ParamSet, cfg, windows: WindowBatch,
                      batch_size: int = EVAL_BATCH) -> tuple[float, float]:
    """(mse, mae) accumulated elementwise over every window, in order."""
    sq_sum = 0.0
    abs_sum = 0.0
    count = 0
    for xb, yb in windows.batches(batch_size):
        pred = predict(xb, params, cfg)
        diff = pred.astype(np.float64) - yb.astype(np.float64)
        sq_sum += float(np.square(diff).sum())
        abs_sum += float(np.abs(diff).sum())
        count += diff.size
    if count == 0:
        raise ValueError("cannot evaluate an empty split")
    return sq_sum / count, abs_sum / count


def evaluate(params: ParamSet, cfg, windows: WindowBatch, dataset: str = "",
             seed: int = 0, batch_size: int = EVAL_BATCH) -> MetricRow:
    """Run the forward pass over all windows of a split and report metrics
    in the dataset-standardized space (the space the windows live in)."""
    mse_value, mae_value = streaming_metrics(params, cfg, windows, batch_size)
    return MetricRow(dataset=dataset, horizon=cfg.horizon, seed=seed,
                     mse=mse_value, mae=mae_value)


def aggregate_seeds(rows: list[MetricRow]) -> list[SeedSummary]:
    """Mean and population std per (dataset, horizon) group, in first-seen
    group order."""
    if not rows:
        raise ValueError("no metric rows to aggregate")
    groups: dict[tuple[str, int], list[MetricRow]] = {}
    for row in rows:
        groups.setdefault((row.dataset, row.horizon), []).append(row)
    summaries = []
    for (dataset, horizon), members in groups.items():
        mses = np.array([m.mse for m in members], dtype=np.float64)
        maes = np.array([m.mae for m in members], dtype=np.float64)
        summaries.append(SeedSummary(
            dataset=dataset, horizon=horizon, runs=len(members),
            mse_mean=float(mses.mean()), mse_std=float(mses.std()),
            mae_mean=float(maes.mean()), mae_std=float(maes.std())))
    return summaries


# ---------------------------------------------------------------------------
# interpretability exports


def export_amwg(params: ParamSet, cfg: ModelConfig, batch: np.ndarray) -> np.ndarray:
    """Gate weights averaged over a batch of windows: (H x C), rows running
    coarse to fine, every column a simplex."""
    output = forward(batch, params, cfg)
    return output.gate_weights.mean(axis=0)


def write_amwg_csv(path: str | Path, heatmap: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    channels = heatmap.shape[1]
    lines = [",".join(f"channel_{c}" for c in range(channels))]
    lines += [",".join(repr(float(v)) for v in row) for row in heatmap]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_amwg_csv(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        rows = [[float(cell) for cell in row] for row in reader if row]
    return np.asarray(rows, dtype=np.float64)


def export_granularity_forecasts(output: ForecastOutput,
                                 out_dir: str | Path) -> list[Path]:
    """One CSV per head (raw length-G_i series plus its upsampled version)
    and one for the final forecast, for the first window of the batch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channels = output.final.shape[2]
    header = "kind,step," + ",".join(f"channel_{c}" for c in range(channels))
    paths = []
    for i, (raw, up) in enumerate(zip(output.per_granularity,
                                      output.upsampled), start=1):
        lines = [header]
        for step, row in enumerate(raw[0]):
            lines.append("raw," + str(step) + "," +
                         ",".join(repr(float(v)) for v in row))
        for step, row in enumerate(up[0]):
            lines.append("upsampled," + str(step) + "," +
                         ",".join(repr(float(v)) for v in row))
        path = out_dir / f"head_{i}.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(path)
    lines = [header]
    for step, row in enumerate(output.final[0]):
        lines.append("final," + str(step) + "," +
                     ",".join(repr(float(v)) for v in row))
    final_path = out_dir / "final.csv"
    final_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths.append(final_path)
    return paths


# ---------------------------------------------------------------------------
# metric file formats


def write_metric_rows(path: str | Path, rows: list[MetricRow]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["dataset,horizon,seed,mse,mae"]
    lines += [f"{r.dataset},{r.horizon},{r.seed},{r.mse!r},{r.mae!r}" for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_seed_summaries(path: str | Path, summaries: list[SeedSummary]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["dataset,horizon,runs,mse,mse_std,mae,mae_std"]
    lines += [f"{s.dataset},{s.horizon},{s.runs},{s.mse_mean!r},{s.mse_std!r},"
              f"{s.mae_mean!r},{s.mae_std!r}" for s in summaries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
