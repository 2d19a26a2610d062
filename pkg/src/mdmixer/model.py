"""Forecaster parameters and forward pass.

The network runs per lookback window: instance normalization, a
trend/seasonal split, patch embedding per branch, parallel prediction
heads at increasing output lengths, coarse-to-fine iterative mixing, a
channel-adaptive gating network, linear-interpolation upsampling and a
residual weighted fusion, with the instance scale restored at the end.

Everything is plain numpy; gradients live in ``training``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig
from .preprocess import InstanceStats, decompose, instance_denormalize, \
    instance_normalize, patch

CHECKPOINT_MAGIC = "mdmixer-checkpoint v1"


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints or tensor mismatches against a config."""


class ParamSet:
    """Ordered, named collection of learnable tensors.

    Iteration order is the canonical layout order, which fixes the RNG
    draw order at init and the blob order in checkpoints.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self._tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._tensors.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self._tensors.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._tensors.items()})

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def num_values(self) -> int:
        return sum(v.size for v in self._tensors.values())


@dataclass
class ForecastOutput:
    """Forecast plus the intermediates that explain it.

    All series are in the scale of the input window (instance stats
    restored): ``final`` (B x F x C), ``per_granularity[i]`` (B x G_i x C),
    its upsampled counterpart (B x F x C), and the per-channel head
    weights used by the fusion (B x H x C, simplex over the head axis).
    """

    final: np.ndarray
    per_granularity: list[np.ndarray]
    upsampled: list[np.ndarray]
    gate_weights: np.ndarray
    stats: InstanceStats


@dataclass
class ForwardContext:
    """Intermediates retained for the reverse pass."""

    stats: InstanceStats
    patches_s: np.ndarray        # (B, C, N, P)
    patches_t: np.ndarray
    u_s: np.ndarray              # (B, C, N*D) flattened embeddings
    u_t: np.ndarray
    z_s: list[np.ndarray]        # head outputs, seasonal (B, C, G_i)
    z_t: list[np.ndarray]
    trend_pre: list[np.ndarray]  # trend fc1 pre-activations (B, C, hidden)
    trend_act: list[np.ndarray]
    y_s: list[np.ndarray]        # mixed outputs per branch (B, C, G_i)
    y_t: list[np.ndarray]
    y_sum: list[np.ndarray]      # per-granularity forecasts, normalized scale
    upsampled_norm: list[np.ndarray]   # (B, C, F)
    gate_in: np.ndarray | None   # (B, 2C)
    gate_pre: np.ndarray | None  # (B, hidden)
    gate_act: np.ndarray | None
    gate_weights: np.ndarray     # (B, H, C)
    schedule: list[int]


def granularity_schedule(horizon: int, heads: int) -> list[int]:
    """Output lengths of the parallel heads: multiples of F/H up to F."""
    if heads < 1:
        raise ConfigError(f"heads must be >= 1, got {heads}")
    if horizon % heads != 0:
        raise ConfigError(f"heads ({heads}) must divide horizon ({horizon})")
    base = horizon // heads
    return [base * i for i in range(1, heads + 1)]


def param_layout(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for every learnable tensor."""
    n, d, p = cfg.num_patches, cfg.embed_dim, cfg.patch_len
    c, hid = cfg.channels, cfg.hidden
    heads = cfg.num_heads
    nd = n * d
    schedule = granularity_schedule(cfg.horizon, heads)
    pos_shape = (n, d) if cfg.pos_encoding == "shared" else (c, n, d)
    layout: dict[str, tuple[int, ...]] = {
        "embed_s.weight": (p, d), "embed_s.bias": (d,),
        "embed_t.weight": (p, d), "embed_t.bias": (d,),
        "pos_s": pos_shape, "pos_t": pos_shape,
    }
    for i, g in enumerate(schedule, start=1):
        layout[f"season_head_{i}.weight"] = (nd, g)
        layout[f"season_head_{i}.bias"] = (g,)
    for i, g in enumerate(schedule, start=1):
        layout[f"trend_head_{i}.fc1.weight"] = (nd, hid)
        layout[f"trend_head_{i}.fc1.bias"] = (hid,)
        layout[f"trend_head_{i}.fc2.weight"] = (hid, g)
        layout[f"trend_head_{i}.fc2.bias"] = (g,)
    for branch in ("s", "t"):
        for i in range(2, heads + 1):
            layout[f"mixer_{branch}_{i}.weight"] = (schedule[i - 2], schedule[i - 1])
            layout[f"mixer_{branch}_{i}.bias"] = (schedule[i - 1],)
    layout["gate.fc1.weight"] = (2 * c, hid)
    layout["gate.fc1.bias"] = (hid,)
    layout["gate.fc2.weight"] = (hid, heads * c)
    layout["gate.fc2.bias"] = (heads * c,)
    return layout


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero,
    positional encodings N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_layout(cfg).items():
        if name.startswith("pos_"):
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ParamSet(tensors)


def check_params_match(params: ParamSet, cfg: ModelConfig | object,
                       layout: dict[str, tuple[int, ...]] | None = None):
    """Verify names and shapes against the config's layout; raises
    CheckpointError naming the first offending tensor."""
    if layout is None:
        layout = param_layout(cfg)  # type: ignore[arg-type]
    for name, shape in layout.items():
        if name not in params:
            raise CheckpointError(f"missing tensor {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(params[name].shape)}, "
                f"config expects {tuple(shape)}")
    for name in params.names():
        if name not in layout:
            raise CheckpointError(f"unexpected tensor {name!r}")


# ---------------------------------------------------------------------------
# forward-pass building blocks


def embed(patches: np.ndarray, weight: np.ndarray, bias: np.ndarray,
          pos: np.ndarray) -> np.ndarray:
    """Project each length-P patch to the embedding space and add the
    positional encoding (broadcast over channels in shared mode)."""
    b, c, n, p = patches.shape
    out = patches.reshape(-1, p) @ weight + bias
    return out.reshape(b, c, n, -1) + pos


def mpp_seasonal(u: np.ndarray, params: ParamSet,
                 schedule: list[int]) -> list[np.ndarray]:
    """One direct linear map per head, flattened embeddings -> length G_i.
    Weights are shared across channels."""
    b, c, nd = u.shape
    flat = u.reshape(b * c, nd)
    outs = []
    for i, g in enumerate(schedule, start=1):
        z = flat @ params[f"season_head_{i}.weight"] + params[f"season_head_{i}.bias"]
        outs.append(z.reshape(b, c, g))
    return outs


def mpp_trend(u: np.ndarray, params: ParamSet,
              schedule: list[int]) -> list[np.ndarray]:
    """Two-layer per-head MLP (ReLU hidden) for the trend branch."""
    return _mpp_trend_ctx(u, params, schedule)[0]


def _mpp_trend_ctx(u, params, schedule):
    b, c, nd = u.shape
    flat = u.reshape(b * c, nd)
    outs, pres, acts = [], [], []
    for i, g in enumerate(schedule, start=1):
        pre = flat @ params[f"trend_head_{i}.fc1.weight"] + params[f"trend_head_{i}.fc1.bias"]
        act = np.maximum(pre, 0)
        z = act @ params[f"trend_head_{i}.fc2.weight"] + params[f"trend_head_{i}.fc2.bias"]
        outs.append(z.reshape(b, c, g))
        pres.append(pre.reshape(b, c, -1))
        acts.append(act.reshape(b, c, -1))
    return outs, pres, acts


def mim(z_list: list[np.ndarray],
        mixers: list[tuple[np.ndarray, np.ndarray]] | None) -> list[np.ndarray]:
    """Coarse-to-fine accumulation: each head adds a linear map of the
    previous (coarser) mixed output. ``mixers`` holds one (weight, bias)
    pair per head from the second on; None bypasses mixing entirely."""
    if mixers is None:
        return list(z_list)
    if len(mixers) != len(z_list) - 1:
        raise ValueError(f"expected {len(z_list) - 1} mixers, got {len(mixers)}")
    mixed = [z_list[0]]
    for z, (weight, bias) in zip(z_list[1:], mixers):
        mixed.append(z + mixed[-1] @ weight + bias)
    return mixed


def amwg_weights(xd_s: np.ndarray, xd_t: np.ndarray, params: ParamSet,
                 heads: int) -> np.ndarray:
    """Channel-adaptive head weights: pool each branch's embeddings to one
    scalar per channel, run the two-layer gate, softmax over heads."""
    return _amwg_ctx(xd_s, xd_t, params, heads)[0]


def _amwg_ctx(xd_s, xd_t, params, heads):
    b, c = xd_s.shape[0], xd_s.shape[1]
    pooled_s = xd_s.mean(axis=(2, 3))                       # (B, C)
    pooled_t = xd_t.mean(axis=(2, 3))
    gate_in = np.concatenate([pooled_s, pooled_t], axis=1)  # (B, 2C)
    pre = gate_in @ params["gate.fc1.weight"] + params["gate.fc1.bias"]
    act = np.maximum(pre, 0)
    logits = act @ params["gate.fc2.weight"] + params["gate.fc2.bias"]
    logits = logits.reshape(b, heads, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    weights = expd / expd.sum(axis=1, keepdims=True)        # simplex over heads
    return weights, gate_in, pre, act


@lru_cache(maxsize=128)
def _interp_matrix(source_len: int, target_len: int) -> np.ndarray:
    """(G x F) endpoint-aligned linear-interpolation matrix, float64.

    Built so that G == F gives the exact identity and both endpoints are
    copied through unchanged.
    """
    if source_len > target_len:
        raise ValueError(f"cannot upsample length {source_len} to shorter "
                         f"length {target_len}")
    mat = np.zeros((source_len, target_len), dtype=np.float64)
    if source_len == 1:
        mat[0, :] = 1.0
        return mat
    scale = (source_len - 1) / (target_len - 1)
    for j in range(target_len):
        s = j * scale
        k = int(math.floor(s))
        if k >= source_len - 1:
            mat[source_len - 1, j] = 1.0
        else:
            frac = s - k
            mat[k, j] = 1.0 - frac
            mat[k + 1, j] = frac
    return mat


def upsample(y: np.ndarray, target_len: int) -> np.ndarray:
    """Stretch (B x C x G) to (B x C x F) by endpoint-aligned linear
    interpolation; exact identity when G == F."""
    mat = _interp_matrix(y.shape[-1], target_len).astype(y.dtype)
    return y @ mat


def fuse(upsampled: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Weighted sum of the upsampled heads plus their plain average as a
    residual. ``weights`` is (B x H x C), broadcast over the output axis."""
    if len(upsampled) != weights.shape[1]:
        raise ValueError(f"{len(upsampled)} head outputs but weights cover "
                         f"{weights.shape[1]} heads")
    mean = upsampled[0].copy()
    for y in upsampled[1:]:
        mean += y
    mean /= len(upsampled)
    out = mean
    for i, y in enumerate(upsampled):
        out = out + weights[:, i, :][:, :, None] * y
    return out


# ---------------------------------------------------------------------------
# full forward pass


def forward(x: np.ndarray, params: ParamSet, cfg: ModelConfig) -> ForecastOutput:
    """Run the full pipeline on a batch of lookback windows (B x T x C)."""
    return forward_with_context(x, params, cfg)[0]


def forward_with_context(x: np.ndarray, params: ParamSet,
                         cfg: ModelConfig) -> tuple[ForecastOutput, ForwardContext]:
    if x.ndim != 3:
        raise ValueError(f"forward/input: expected 3-D (B, T, C), got shape {x.shape}")
    if x.shape[1] != cfg.lookback or x.shape[2] != cfg.channels:
        raise ValueError(f"forward/input: window shape {x.shape[1:]} does not "
                         f"match (lookback={cfg.lookback}, channels={cfg.channels})")
    check_params_match(params, cfg)
    dtype = params.dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    b = x.shape[0]
    heads = cfg.num_heads
    schedule = granularity_schedule(cfg.horizon, heads)

    x_norm, stats = instance_normalize(x)
    parts = decompose(x_norm, cfg.kernel)
    patches_s = patch(parts.seasonal, cfg.patch_len, cfg.stride).patches
    patches_t = patch(parts.trend, cfg.patch_len, cfg.stride).patches

    xd_s = embed(patches_s, params["embed_s.weight"], params["embed_s.bias"],
                 params["pos_s"])
    xd_t = embed(patches_t, params["embed_t.weight"], params["embed_t.bias"],
                 params["pos_t"])
    u_s = xd_s.reshape(b, cfg.channels, -1)
    u_t = xd_t.reshape(b, cfg.channels, -1)

    z_s = mpp_seasonal(u_s, params, schedule)
    z_t, trend_pre, trend_act = _mpp_trend_ctx(u_t, params, schedule)

    if cfg.mim_enabled:
        mixers_s = [(params[f"mixer_s_{i}.weight"], params[f"mixer_s_{i}.bias"])
                    for i in range(2, heads + 1)]
        mixers_t = [(params[f"mixer_t_{i}.weight"], params[f"mixer_t_{i}.bias"])
                    for i in range(2, heads + 1)]
        y_s = mim(z_s, mixers_s)
        y_t = mim(z_t, mixers_t)
    else:
        y_s, y_t = list(z_s), list(z_t)

    y_sum = [a + bb for a, bb in zip(y_s, y_t)]
    upsampled_norm = [upsample(y, cfg.horizon) for y in y_sum]

    if cfg.amwg_enabled:
        weights, gate_in, gate_pre, gate_act = _amwg_ctx(xd_s, xd_t, params, heads)
        fused = fuse(upsampled_norm, weights)
    else:
        weights = np.full((b, heads, cfg.channels), 1.0 / heads, dtype=dtype)
        gate_in = gate_pre = gate_act = None
        fused = upsampled_norm[0].copy()
        for y in upsampled_norm[1:]:
            fused += y
        fused /= heads

    final = instance_denormalize(fused.transpose(0, 2, 1), stats)
    per_granularity = [instance_denormalize(y.transpose(0, 2, 1), stats)
                       for y in y_sum]
    upsampled_out = [instance_denormalize(y.transpose(0, 2, 1), stats)
                     for y in upsampled_norm]

    output = ForecastOutput(final=final, per_granularity=per_granularity,
                            upsampled=upsampled_out, gate_weights=weights,
                            stats=stats)
    ctx = ForwardContext(stats=stats, patches_s=patches_s, patches_t=patches_t,
                         u_s=u_s, u_t=u_t, z_s=z_s, z_t=z_t,
                         trend_pre=trend_pre, trend_act=trend_act,
                         y_s=y_s, y_t=y_t, y_sum=y_sum,
                         upsampled_norm=upsampled_norm, gate_in=gate_in,
                         gate_pre=gate_pre, gate_act=gate_act,
                         gate_weights=weights, schedule=schedule)
    return output, ctx


# ---------------------------------------------------------------------------
# checkpoint format: text manifest (name, shape, byte offset) + one
# little-endian float32 blob per tensor, concatenated after the manifest.


def save_checkpoint(path: str | Path, params: ParamSet):
    records = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(dim) for dim in arr.shape)
        records.append(f"{name} {shape} {offset}")
        blobs.append(blob)
        offset += len(blob)
    manifest = CHECKPOINT_MAGIC + "\n" + "".join(r + "\n" for r in records) + "end\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(manifest.encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def read_checkpoint_manifest(path: str | Path) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape, without loading the blobs."""
    return {name: shape for name, shape, _ in _parse_manifest(Path(path))[0]}


def load_checkpoint(path: str | Path) -> ParamSet:
    entries, blob = _parse_manifest(Path(path))
    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: blob truncated for tensor {name!r}")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        if not np.isfinite(arr).all():
            raise CheckpointError(f"{path}: tensor {name!r} has non-finite values")
        tensors[name] = arr
    return ParamSet(tensors)


def _parse_manifest(path: Path):
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    newline = data.find(b"\n")
    if newline < 0 or data[:newline].decode("utf-8", "replace") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic line)")
    marker = b"\nend\n"
    cut = data.find(marker, newline)
    if cut < 0:
        raise CheckpointError(f"{path}: manifest missing 'end' terminator")
    manifest = data[newline + 1:cut + 1].decode("utf-8")
    blob = data[cut + len(marker):]
    entries = []
    for line in manifest.splitlines():
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}")
        name, shape_text, offset_text = fields
        try:
            shape = tuple(int(d) for d in shape_text.split("x"))
            offset = int(offset_text)
        except ValueError:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}") from None
        entries.append((name, shape, offset))
    if not entries:
        raise CheckpointError(f"{path}: checkpoint lists no tensors")
    return entries, blob
