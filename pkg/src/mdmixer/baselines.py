"""Linear forecaster baselines and their dual-branch augmentation.

Three kinds, all instance-normalized and channel-shared:
  linear_direct: one lookback->horizon linear map
  decomp_linear: trend/seasonal split, one linear map per component
  dual_branch:   linear seasonal map + single-hidden-layer ReLU MLP trend
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import BaselineConfig
from .model import ParamSet, check_params_match
from .preprocess import InstanceStats, decompose, instance_denormalize, \
    instance_normalize


@dataclass
class BaselineContext:
    """Intermediates for the reverse pass (all normalized scale)."""

    stats: InstanceStats
    seasonal_in: np.ndarray | None   # (B*C, T)
    trend_in: np.ndarray | None      # (B*C, T)
    direct_in: np.ndarray | None     # (B*C, T)
    trend_pre: np.ndarray | None     # (B*C, hidden), dual_branch only
    trend_act: np.ndarray | None


def baseline_param_layout(cfg: BaselineConfig) -> dict[str, tuple[int, ...]]:
    t, f, hid = cfg.lookback, cfg.horizon, cfg.hidden
    if cfg.kind == "linear_direct":
        return {"direct.weight": (t, f), "direct.bias": (f,)}
    if cfg.kind == "decomp_linear":
        return {"seasonal.weight": (t, f), "seasonal.bias": (f,),
                "trend.weight": (t, f), "trend.bias": (f,)}
    return {"seasonal.weight": (t, f), "seasonal.bias": (f,),
            "trend.fc1.weight": (t, hid), "trend.fc1.bias": (hid,),
            "trend.fc2.weight": (hid, f), "trend.fc2.bias": (f,)}


def init_baseline_params(cfg: BaselineConfig, seed: int,
                         dtype=np.float32) -> ParamSet:
    """Same init convention as the main model: uniform +-1/sqrt(fan_in)
    weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in baseline_param_layout(cfg).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ParamSet(tensors)


def baseline_forward(x: np.ndarray, params: ParamSet,
                     cfg: BaselineConfig) -> np.ndarray:
    """Forecast (B x F x C) for a batch of lookback windows (B x T x C)."""
    return baseline_forward_with_context(x, params, cfg)[0]


def baseline_forward_with_context(x: np.ndarray, params: ParamSet,
                                  cfg: BaselineConfig):
    if x.ndim != 3 or x.shape[1] != cfg.lookback or x.shape[2] != cfg.channels:
        raise ValueError(f"baseline input shape {x.shape} does not match "
                         f"(lookback={cfg.lookback}, channels={cfg.channels})")
    check_params_match(params, cfg, layout=baseline_param_layout(cfg))
    dtype = params.dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    b, t, c = x.shape

    x_norm, stats = instance_normalize(x)
    ctx = BaselineContext(stats=stats, seasonal_in=None, trend_in=None,
                          direct_in=None, trend_pre=None, trend_act=None)

    if cfg.kind == "linear_direct":
        flat = x_norm.transpose(0, 2, 1).reshape(b * c, t)
        out = flat @ params["direct.weight"] + params["direct.bias"]
        ctx.direct_in = flat
    else:
        parts = decompose(x_norm, cfg.kernel)
        seasonal = parts.seasonal.transpose(0, 2, 1).reshape(b * c, t)
        trend = parts.trend.transpose(0, 2, 1).reshape(b * c, t)
        ctx.seasonal_in, ctx.trend_in = seasonal, trend
        out = seasonal @ params["seasonal.weight"] + params["seasonal.bias"]
        if cfg.kind == "decomp_linear":
            out = out + trend @ params["trend.weight"] + params["trend.bias"]
        else:  # dual_branch
            pre = trend @ params["trend.fc1.weight"] + params["trend.fc1.bias"]
            act = np.maximum(pre, 0)
            out = out + act @ params["trend.fc2.weight"] + params["trend.fc2.bias"]
            ctx.trend_pre, ctx.trend_act = pre, act

    forecast_norm = out.reshape(b, c, cfg.horizon).transpose(0, 2, 1)
    forecast = instance_denormalize(forecast_norm, stats)
    return forecast, ctx
