"""Losses, reverse-mode gradients, AdamW, the training loop and the
finite-difference gradient checker.

Gradients are derived by hand for every stage (fusion, softmax gate,
interpolation, mixing, prediction heads, ReLU, embedding, pooling).
Instance-normalization statistics depend only on the inputs, never on
parameters, so they enter the reverse pass as constants. The L1
subgradient at an exactly-zero residual is taken as 0.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .baselines import baseline_forward, baseline_forward_with_context, \
    init_baseline_params
from .config import BaselineConfig, ModelConfig, TrainSettings, config_echo
from .data import WindowBatch
from .evaluation import streaming_metrics
from .model import ParamSet, _interp_matrix, forward, forward_with_context, \
    granularity_schedule, init_params


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries epoch/batch indices."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class LossBreakdown:
    """Main forecast loss, per-head alignment terms, and their combination."""

    main: float
    align_per_head: list[float]
    total: float


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float


@dataclass
class TrainReport:
    epochs: list[EpochRow]
    best_epoch: int
    best_val_mse: float
    best_val_mae: float
    seed: int
    config: dict
    wall_clock_seconds: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


# ---------------------------------------------------------------------------
# losses


def main_loss(y: np.ndarray, y_true: np.ndarray) -> float:
    """Mean absolute error over all elements."""
    if y.shape != y_true.shape:
        raise ValueError(f"loss shapes differ: {y.shape} vs {y_true.shape}")
    return float(np.abs(y - y_true).mean(dtype=np.float64))


@lru_cache(maxsize=128)
def _pool_matrix(source_len: int, target_len: int) -> np.ndarray:
    """(G x F) adaptive average pooling: bin k averages source indices
    [floor(k*F/G), ceil((k+1)*F/G))."""
    mat = np.zeros((target_len, source_len), dtype=np.float64)
    for k in range(target_len):
        start = (k * source_len) // target_len
        end = -((-(k + 1) * source_len) // target_len)  # ceil division
        mat[k, start:end] = 1.0 / (end - start)
    return mat


def alignment_targets(y_true: np.ndarray, schedule: list[int]) -> list[np.ndarray]:
    """Average-pool the target sequence (B x F x C) down to each head's
    length, giving one supervision series per granularity."""
    horizon = y_true.shape[1]
    swapped = y_true.transpose(0, 2, 1)  # (B, C, F)
    targets = []
    for g in schedule:
        if g > horizon:
            raise ValueError(f"granularity {g} exceeds horizon {horizon}")
        mat = _pool_matrix(horizon, g).astype(y_true.dtype)
        targets.append((swapped @ mat.T).transpose(0, 2, 1))
    return targets


def total_loss(output, y_true: np.ndarray, cfg: ModelConfig) -> LossBreakdown:
    """Main L1 loss plus the align terms of every head (per-head forecasts
    against pooled targets, both in the input window's scale)."""
    main = main_loss(output.final, y_true)
    schedule = granularity_schedule(cfg.horizon, cfg.num_heads)
    targets = alignment_targets(y_true, schedule)
    align = [main_loss(pred, tgt)
             for pred, tgt in zip(output.per_granularity, targets)]
    total = main
    if cfg.use_align_loss:
        total = main + cfg.align_weight * (sum(align) / len(align))
    return LossBreakdown(main=main, align_per_head=align, total=total)


# ---------------------------------------------------------------------------
# reverse pass


def backward(x: np.ndarray, y_true: np.ndarray, params: ParamSet,
             cfg: ModelConfig | BaselineConfig) -> tuple[ParamSet, LossBreakdown]:
    """Exact gradients of the total loss w.r.t. every parameter tensor."""
    if isinstance(cfg, BaselineConfig):
        return _baseline_backward(x, y_true, params, cfg)
    return _model_backward(x, y_true, params, cfg)


def _check_finite(breakdown: LossBreakdown):
    if not math.isfinite(breakdown.main):
        raise FloatingPointError("non-finite main loss")
    for i, term in enumerate(breakdown.align_per_head, start=1):
        if not math.isfinite(term):
            raise FloatingPointError(f"non-finite alignment loss, head {i}")


def _model_backward(x, y_true, params, cfg: ModelConfig):
    output, ctx = forward_with_context(x, params, cfg)
    dtype = params.dtype
    y_true = np.ascontiguousarray(y_true, dtype=dtype)
    if output.final.shape != y_true.shape:
        raise ValueError(f"target shape {y_true.shape} does not match "
                         f"forecast shape {output.final.shape}")

    heads = cfg.num_heads
    channels = cfg.channels
    schedule = ctx.schedule
    targets = alignment_targets(y_true, schedule)

    main_res = output.final - y_true
    main = float(np.abs(main_res).mean(dtype=np.float64))
    align_res = [pred - tgt for pred, tgt in zip(output.per_granularity, targets)]
    align = [float(np.abs(r).mean(dtype=np.float64)) for r in align_res]
    total = main
    if cfg.use_align_loss:
        total = main + cfg.align_weight * (sum(align) / len(align))
    breakdown = LossBreakdown(main=main, align_per_head=align, total=total)
    _check_finite(breakdown)

    grads = params.zeros_like()
    std = ctx.stats.std  # (B, C); constants w.r.t. parameters

    # d total / d final, through the denormalization and into (B, C, F)
    d_final = np.sign(main_res) / main_res.size
    d_fused = (d_final * std[:, None, :]).transpose(0, 2, 1).astype(dtype, copy=False)

    # fusion: weighted heads + 1/H residual mean
    if cfg.amwg_enabled:
        weights = ctx.gate_weights                                   # (B, H, C)
        d_up = [(weights[:, i, :][:, :, None] + 1.0 / heads) * d_fused
                for i in range(heads)]
        d_weights = np.empty_like(weights)
        for i in range(heads):
            d_weights[:, i, :] = (d_fused * ctx.upsampled_norm[i]).sum(axis=2)
        # softmax over the head axis
        inner = (d_weights * weights).sum(axis=1, keepdims=True)
        d_logits = (weights * (d_weights - inner)).reshape(-1, heads * channels)
        grads["gate.fc2.weight"] += ctx.gate_act.T @ d_logits
        grads["gate.fc2.bias"] += d_logits.sum(axis=0)
        d_act = d_logits @ params["gate.fc2.weight"].T
        d_pre = d_act * (ctx.gate_pre > 0)
        grads["gate.fc1.weight"] += ctx.gate_in.T @ d_pre
        grads["gate.fc1.bias"] += d_pre.sum(axis=0)
        d_gate_in = d_pre @ params["gate.fc1.weight"].T              # (B, 2C)
        d_pool_s = d_gate_in[:, :channels]
        d_pool_t = d_gate_in[:, channels:]
    else:
        shared = d_fused * (1.0 / heads)
        d_up = [shared] * heads  # read-only below
        d_pool_s = d_pool_t = None

    # upsampling (transposed interpolation) + the alignment-loss path
    align_active = cfg.use_align_loss and cfg.align_weight != 0.0
    d_y = []
    for i, g in enumerate(schedule):
        mat = _interp_matrix(g, cfg.horizon).astype(dtype)
        d = d_up[i] @ mat.T                                          # (B, C, G_i)
        if align_active:
            scale = cfg.align_weight / (heads * align_res[i].size)
            d_gran = np.sign(align_res[i]) * scale                   # (B, G_i, C)
            d += (d_gran * std[:, None, :]).transpose(0, 2, 1)
        d_y.append(d)

    # the per-granularity forecast is the sum of both branches
    d_z_s = _mim_backward(d_y, ctx.y_s, params, grads, "s", cfg)
    d_z_t = _mim_backward(d_y, ctx.y_t, params, grads, "t", cfg)

    batch = x.shape[0]
    nd = ctx.u_s.shape[2]
    u_s_flat = ctx.u_s.reshape(-1, nd)
    u_t_flat = ctx.u_t.reshape(-1, nd)
    d_u_s = np.zeros_like(u_s_flat)
    d_u_t = np.zeros_like(u_t_flat)

    for i, g in enumerate(schedule, start=1):
        d_flat = d_z_s[i - 1].reshape(-1, g)
        grads[f"season_head_{i}.weight"] += u_s_flat.T @ d_flat
        grads[f"season_head_{i}.bias"] += d_flat.sum(axis=0)
        d_u_s += d_flat @ params[f"season_head_{i}.weight"].T

    hid = cfg.hidden
    for i, g in enumerate(schedule, start=1):
        d_flat = d_z_t[i - 1].reshape(-1, g)
        act_flat = ctx.trend_act[i - 1].reshape(-1, hid)
        grads[f"trend_head_{i}.fc2.weight"] += act_flat.T @ d_flat
        grads[f"trend_head_{i}.fc2.bias"] += d_flat.sum(axis=0)
        d_act = d_flat @ params[f"trend_head_{i}.fc2.weight"].T
        d_pre = d_act * (ctx.trend_pre[i - 1].reshape(-1, hid) > 0)
        grads[f"trend_head_{i}.fc1.weight"] += u_t_flat.T @ d_pre
        grads[f"trend_head_{i}.fc1.bias"] += d_pre.sum(axis=0)
        d_u_t += d_pre @ params[f"trend_head_{i}.fc1.weight"].T

    _embed_backward(d_u_s, d_pool_s, ctx.patches_s, params, grads, "s",
                    batch, channels, cfg)
    _embed_backward(d_u_t, d_pool_t, ctx.patches_t, params, grads, "t",
                    batch, channels, cfg)
    return grads, breakdown


def _mim_backward(d_y, y_branch, params, grads, branch, cfg: ModelConfig):
    """Distribute per-granularity gradients through the coarse-to-fine
    mixing chain; returns the gradient at each head's raw output."""
    heads = len(d_y)
    acc = [d.copy() for d in d_y]
    if cfg.mim_enabled and heads > 1:
        for i in range(heads, 1, -1):
            d_cur = acc[i - 1]
            g_cur = d_cur.shape[2]
            prev = y_branch[i - 2]
            d_flat = d_cur.reshape(-1, g_cur)
            prev_flat = prev.reshape(-1, prev.shape[2])
            grads[f"mixer_{branch}_{i}.weight"] += prev_flat.T @ d_flat
            grads[f"mixer_{branch}_{i}.bias"] += d_flat.sum(axis=0)
            acc[i - 2] += (d_flat @ params[f"mixer_{branch}_{i}.weight"].T
                           ).reshape(prev.shape)
    return acc


def _embed_backward(d_u_flat, d_pool, patches, params, grads, branch,
                    batch, channels, cfg: ModelConfig):
    n, d = cfg.num_patches, cfg.embed_dim
    d_xd = d_u_flat.reshape(batch, channels, n, d)
    if d_pool is not None:
        # the gate pooled this branch's embeddings over (N, D)
        d_xd = d_xd + d_pool[:, :, None, None] / (n * d)
    if cfg.pos_encoding == "shared":
        grads[f"pos_{branch}"] += d_xd.sum(axis=(0, 1))
    else:
        grads[f"pos_{branch}"] += d_xd.sum(axis=0)
    p_flat = patches.reshape(-1, cfg.patch_len)
    d_flat = d_xd.reshape(-1, d)
    grads[f"embed_{branch}.weight"] += p_flat.T @ d_flat
    grads[f"embed_{branch}.bias"] += d_flat.sum(axis=0)


def _baseline_backward(x, y_true, params, cfg: BaselineConfig):
    forecast, ctx = baseline_forward_with_context(x, params, cfg)
    dtype = params.dtype
    y_true = np.ascontiguousarray(y_true, dtype=dtype)
    if forecast.shape != y_true.shape:
        raise ValueError(f"target shape {y_true.shape} does not match "
                         f"forecast shape {forecast.shape}")
    res = forecast - y_true
    main = float(np.abs(res).mean(dtype=np.float64))
    breakdown = LossBreakdown(main=main, align_per_head=[], total=main)
    _check_finite(breakdown)

    grads = params.zeros_like()
    d_fore = np.sign(res) / res.size
    d_norm = (d_fore * ctx.stats.std[:, None, :]).transpose(0, 2, 1)
    d_out = d_norm.reshape(-1, cfg.horizon).astype(dtype, copy=False)

    if cfg.kind == "linear_direct":
        grads["direct.weight"] += ctx.direct_in.T @ d_out
        grads["direct.bias"] += d_out.sum(axis=0)
    else:
        grads["seasonal.weight"] += ctx.seasonal_in.T @ d_out
        grads["seasonal.bias"] += d_out.sum(axis=0)
        if cfg.kind == "decomp_linear":
            grads["trend.weight"] += ctx.trend_in.T @ d_out
            grads["trend.bias"] += d_out.sum(axis=0)
        else:
            grads["trend.fc2.weight"] += ctx.trend_act.T @ d_out
            grads["trend.fc2.bias"] += d_out.sum(axis=0)
            d_act = d_out @ params["trend.fc2.weight"].T
            d_pre = d_act * (ctx.trend_pre > 0)
            grads["trend.fc1.weight"] += ctx.trend_in.T @ d_pre
            grads["trend.fc1.bias"] += d_pre.sum(axis=0)
    return grads, breakdown


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    """Decoupled-weight-decay Adam moments plus hyperparameters."""

    m: ParamSet
    v: ParamSet
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_optimizer(params: ParamSet, settings: TrainSettings) -> OptimizerState:
    return OptimizerState(m=params.zeros_like(), v=params.zeros_like(), step=0,
                          lr=settings.lr, beta1=settings.beta1,
                          beta2=settings.beta2, eps=settings.eps,
                          weight_decay=settings.weight_decay)


def adamw_step(params: ParamSet, grads: ParamSet,
               state: OptimizerState) -> tuple[ParamSet, OptimizerState]:
    """One bias-corrected AdamW update; params and state update in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * params[name]
        params[name] -= state.lr * update
    return params, state


# ---------------------------------------------------------------------------
# training loop


def _init_for(cfg, seed: int, dtype=np.float32) -> ParamSet:
    if isinstance(cfg, BaselineConfig):
        return init_baseline_params(cfg, seed, dtype=dtype)
    return init_params(cfg, seed, dtype=dtype)


def train(cfg: ModelConfig | BaselineConfig, train_windows: WindowBatch,
          val_windows: WindowBatch,
          settings: TrainSettings) -> tuple[ParamSet, TrainReport]:
    """Seeded mini-batch training with per-epoch validation and early
    stopping on validation MSE; returns the best-validation parameters.

    Deterministic per seed: batch order comes from the seeded RNG and all
    reductions use numpy's fixed pairwise summation order.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("train and val splits must be non-empty")
    started = time.perf_counter()
    params = _init_for(cfg, settings.seed)
    state = init_optimizer(params, settings)
    rng = np.random.default_rng(settings.seed)

    rows: list[EpochRow] = []
    best_params = params.copy()
    best_epoch = 0
    best_mse = math.inf
    best_mae = math.inf
    stale = 0
    for epoch in range(1, settings.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        loss_sum = 0.0
        seen = 0
        for batch_index, (xb, yb) in enumerate(
                train_windows.batches(settings.batch_size, order)):
            try:
                grads, breakdown = backward(xb, yb, params, cfg)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"{exc} at epoch {epoch}, batch {batch_index}",
                    epoch=epoch, batch=batch_index) from exc
            if not math.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}",
                    epoch=epoch, batch=batch_index)
            adamw_step(params, grads, state)
            loss_sum += breakdown.total * len(xb)
            seen += len(xb)
        val_mse, val_mae = streaming_metrics(params, cfg, val_windows)
        rows.append(EpochRow(epoch=epoch, train_loss=loss_sum / seen,
                             val_mse=val_mse, val_mae=val_mae))
        if val_mse < best_mse:
            best_mse, best_mae, best_epoch = val_mse, val_mae, epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale > settings.patience:
                break

    report = TrainReport(epochs=rows, best_epoch=best_epoch,
                         best_val_mse=best_mse, best_val_mae=best_mae,
                         seed=settings.seed,
                         config=config_echo(cfg, settings),
                         wall_clock_seconds=time.perf_counter() - started)
    return best_params, report


def write_train_report(report: TrainReport, csv_path: str | Path,
                       summary_path: str | Path | None = None):
    """Per-epoch CSV plus a small human-readable summary block."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,train_loss,val_mse,val_mae"]
    lines += [f"{r.epoch},{r.train_loss!r},{r.val_mse!r},{r.val_mae!r}"
              for r in report.epochs]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if summary_path is not None:
        summary = [
            f"seed: {report.seed}",
            f"epochs run: {len(report.epochs)}",
            f"best epoch: {report.best_epoch}",
            f"best val mse: {report.best_val_mse!r}",
            f"best val mae: {report.best_val_mae!r}",
            f"wall clock seconds: {report.wall_clock_seconds:.3f}",
            "config:",
        ]
        summary += [f"  {k} = {v}" for k, v in sorted(report.config.items())]
        Path(summary_path).write_text("\n".join(summary) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# finite-difference gradient verification


def _loss_value(x, y_true, params, cfg) -> float:
    if isinstance(cfg, BaselineConfig):
        return main_loss(baseline_forward(x, params, cfg), y_true)
    return total_loss(forward(x, params, cfg), y_true, cfg).total


def gradcheck(cfg: ModelConfig | BaselineConfig, seed: int, h: float = 1e-5,
              tol: float = 1e-4, batch: int = 3) -> GradCheckReport:
    """Compare the reverse pass against central finite differences over
    every parameter entry, on one fixed random batch, in float64."""
    params = _init_for(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(0.0, 1.0, size=(batch, cfg.lookback, cfg.channels))
    y_true = rng.normal(0.0, 1.0, size=(batch, cfg.horizon, cfg.channels))

    grads, _ = backward(x, y_true, params, cfg)
    max_rel = 0.0
    worst = ""
    for name in params.names():
        flat = params[name].reshape(-1)
        grad_flat = grads[name].reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + h
            plus = _loss_value(x, y_true, params, cfg)
            flat[idx] = saved - h
            minus = _loss_value(x, y_true, params, cfg)
            flat[idx] = saved
            numeric = (plus - minus) / (2.0 * h)
            analytic = grad_flat[idx]
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{idx}]"
    return GradCheckReport(max_rel_err=max_rel, worst_param=worst, tolerance=tol)
