"""Configuration objects and the flat key=value run-config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised when a configuration value violates an invariant."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the multi-granularity forecaster.

    lookback/horizon are the input/output window lengths, channels the
    number of series variables. patch_len/stride/embed_dim control the
    patch embedding, heads the number of parallel prediction heads,
    hidden the width of the trend MLP and of the gating network, kernel
    the moving-average size of the trend/seasonal split, align_weight
    the coefficient of the per-head alignment loss.
    """

    lookback: int
    horizon: int
    channels: int
    patch_len: int = 32
    stride: int = 16
    embed_dim: int = 64
    heads: int = 8
    hidden: int = 64
    kernel: int = 25
    align_weight: float = 0.01
    use_mpp: bool = True
    use_mim: bool = True
    use_amwg: bool = True
    use_align_loss: bool = True
    pos_encoding: str = "shared"  # "shared" (N x D) or "per_channel" (C x N x D)

    def __post_init__(self):
        for name in ("lookback", "horizon", "channels", "patch_len",
                     "stride", "embed_dim", "heads", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.patch_len > self.lookback:
            raise ConfigError(
                f"patch_len ({self.patch_len}) must not exceed lookback ({self.lookback})")
        if self.align_weight < 0:
            raise ConfigError(f"align_weight must be >= 0, got {self.align_weight}")
        if self.horizon % self.num_heads != 0:
            raise ConfigError(
                f"heads ({self.num_heads}) must divide horizon ({self.horizon}) "
                f"so every head has an integer output length")
        if self.pos_encoding not in ("shared", "per_channel"):
            raise ConfigError(
                f"pos_encoding must be 'shared' or 'per_channel', got {self.pos_encoding!r}")

    @property
    def num_heads(self) -> int:
        """Effective head count; a single head when parallel prediction is off."""
        return self.heads if self.use_mpp else 1

    @property
    def mim_enabled(self) -> bool:
        return self.use_mim and self.use_mpp

    @property
    def amwg_enabled(self) -> bool:
        return self.use_amwg and self.use_mpp

    @property
    def num_patches(self) -> int:
        return (self.lookback - self.patch_len) // self.stride + 2


BASELINE_KINDS = ("linear_direct", "decomp_linear", "dual_branch")


@dataclass(frozen=True)
class BaselineConfig:
    """Linear / dual-branch baseline forecasters (channel-shared weights)."""

    kind: str
    lookback: int
    horizon: int
    channels: int
    hidden: int = 64   # trend MLP width, dual_branch only
    kernel: int = 25   # moving-average size, decomposing kinds only

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}, "
                              f"expected one of {BASELINE_KINDS}")
        for name in ("lookback", "horizon", "channels", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd integer, got {self.kernel}")


@dataclass(frozen=True)
class TrainSettings:
    """Optimization loop hyperparameters (AdamW + early stopping)."""

    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")


@dataclass(frozen=True)
class SynthChannel:
    """One synthetic channel: sinusoid + linear trend + Gaussian noise."""

    period: float
    amplitude: float
    slope: float
    noise: float

    def __post_init__(self):
        if self.period < 2:
            raise ConfigError(f"synthetic channel period must be >= 2, got {self.period}")
        if self.noise < 0:
            raise ConfigError(f"synthetic channel noise must be >= 0, got {self.noise}")


# Every key the run-config format accepts, with its parsed type.
_BOOL = "bool"
_INT = "int"
_FLOAT = "float"
_STR = "str"
_KNOWN_KEYS = {
    "data.path": _STR,
    "data.name": _STR,
    "data.channels": _INT,           # only for dataset-free configs (gradcheck)
    "data.ratio_train": _FLOAT,
    "data.ratio_val": _FLOAT,
    "data.ratio_test": _FLOAT,
    "data.synth_length": _INT,
    "data.synth_channels": _STR,     # "period:amp:slope:noise, ..."
    "data.synth_seed": _INT,
    "model.kind": _STR,
    "model.lookback": _INT,
    "model.horizon": _INT,
    "model.patch_len": _INT,
    "model.stride": _INT,
    "model.embed_dim": _INT,
    "model.heads": _INT,
    "model.hidden": _INT,
    "model.kernel": _INT,
    "model.align_weight": _FLOAT,
    "model.use_mpp": _BOOL,
    "model.use_mim": _BOOL,
    "model.use_amwg": _BOOL,
    "model.use_align_loss": _BOOL,
    "model.pos_encoding": _STR,
    "train.lr": _FLOAT,
    "train.batch_size": _INT,
    "train.max_epochs": _INT,
    "train.patience": _INT,
    "train.weight_decay": _FLOAT,
    "seeds": _STR,
    "out_dir": _STR,
}


@dataclass
class RunConfig:
    """Fully resolved experiment description (data + model + training)."""

    data_path: str | None = None
    dataset_name: str = ""
    channels: int | None = None
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    synth_length: int | None = None
    synth_channels: tuple[SynthChannel, ...] = ()
    synth_seed: int = 0
    model_kind: str = "mdmixer"
    lookback: int = 96
    horizon: int = 96
    patch_len: int = 32
    stride: int = 16
    embed_dim: int = 64
    heads: int = 8
    hidden: int = 64
    kernel: int = 25
    align_weight: float = 0.01
    use_mpp: bool = True
    use_mim: bool = True
    use_amwg: bool = True
    use_align_loss: bool = True
    pos_encoding: str = "shared"
    train: TrainSettings = field(default_factory=TrainSettings)
    seeds: tuple[int, ...] = (1, 2, 3)
    out_dir: str = "runs/out"

    def validate(self):
        if self.model_kind not in ("mdmixer",) + BASELINE_KINDS:
            raise ConfigError(f"model.kind must be 'mdmixer' or one of "
                              f"{BASELINE_KINDS}, got {self.model_kind!r}")
        if self.data_path is None and self.synth_length is None and self.channels is None:
            raise ConfigError("config needs data.path, data.synth_length or data.channels")
        if self.synth_length is not None and not self.synth_channels:
            raise ConfigError("data.synth_channels required with data.synth_length")
        total = sum(self.ratios)
        if any(r < 0 for r in self.ratios) or abs(total - 1.0) > 1e-6:
            raise ConfigError(f"split ratios must be nonnegative and sum to 1, "
                              f"got {self.ratios} (sum {total:g})")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        # Resolving with a placeholder channel count runs the model-side checks
        # (head divisibility, patch geometry) before any data is touched.
        self.resolve_model(self.channels or 1)

    def resolve_model(self, channels: int) -> ModelConfig | BaselineConfig:
        """Bind the channel count (known once data is loaded) into a model config."""
        if self.model_kind == "mdmixer":
            return ModelConfig(
                lookback=self.lookback, horizon=self.horizon, channels=channels,
                patch_len=self.patch_len, stride=self.stride,
                embed_dim=self.embed_dim, heads=self.heads, hidden=self.hidden,
                kernel=self.kernel, align_weight=self.align_weight,
                use_mpp=self.use_mpp, use_mim=self.use_mim, use_amwg=self.use_amwg,
                use_align_loss=self.use_align_loss, pos_encoding=self.pos_encoding)
        return BaselineConfig(kind=self.model_kind, lookback=self.lookback,
                              horizon=self.horizon, channels=channels,
                              hidden=self.hidden, kernel=self.kernel)


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_synth_channels(raw: str) -> tuple[SynthChannel, ...]:
    channels = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        fields = part.split(":")
        if len(fields) != 4:
            raise ConfigError(
                f"data.synth_channels entry {part!r} must be period:amp:slope:noise")
        try:
            period, amp, slope, noise = (float(f) for f in fields)
        except ValueError:
            raise ConfigError(f"data.synth_channels entry {part!r} has a "
                              f"non-numeric field") from None
        channels.append(SynthChannel(period, amp, slope, noise))
    if not channels:
        raise ConfigError("data.synth_channels is empty")
    return tuple(channels)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse the flat ``key = value`` run-config format ('#' starts a comment)."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw

    def take(key, default=None):
        if key not in values:
            return default
        raw = values[key]
        kind = _KNOWN_KEYS[key]
        try:
            if kind == _INT:
                return int(raw)
            if kind == _FLOAT:
                return float(raw)
            if kind == _BOOL:
                return _parse_bool(raw, key)
            return raw
        except ValueError:
            raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None

    cfg = RunConfig()
    cfg.data_path = take("data.path")
    cfg.dataset_name = take("data.name", "")
    cfg.channels = take("data.channels")
    cfg.ratios = (take("data.ratio_train", 0.6), take("data.ratio_val", 0.2),
                  take("data.ratio_test", 0.2))
    cfg.synth_length = take("data.synth_length")
    if "data.synth_channels" in values:
        cfg.synth_channels = _parse_synth_channels(values["data.synth_channels"])
    cfg.synth_seed = take("data.synth_seed", 0)
    cfg.model_kind = take("model.kind", "mdmixer")
    cfg.lookback = take("model.lookback", 96)
    cfg.horizon = take("model.horizon", 96)
    cfg.patch_len = take("model.patch_len", 32)
    cfg.stride = take("model.stride", 16)
    cfg.embed_dim = take("model.embed_dim", 64)
    cfg.heads = take("model.heads", 8)
    cfg.hidden = take("model.hidden", 64)
    cfg.kernel = take("model.kernel", 25)
    cfg.align_weight = take("model.align_weight", 0.01)
    cfg.use_mpp = take("model.use_mpp", True)
    cfg.use_mim = take("model.use_mim", True)
    cfg.use_amwg = take("model.use_amwg", True)
    cfg.use_align_loss = take("model.use_align_loss", True)
    cfg.pos_encoding = take("model.pos_encoding", "shared")
    cfg.train = TrainSettings(
        lr=take("train.lr", 1e-3),
        batch_size=take("train.batch_size", 32),
        max_epochs=take("train.max_epochs", 30),
        patience=take("train.patience", 5),
        weight_decay=take("train.weight_decay", 0.0),
    )
    if "seeds" in values:
        try:
            cfg.seeds = tuple(int(s) for s in values["seeds"].split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"seeds: expected comma-separated integers, "
                              f"got {values['seeds']!r}") from None
    cfg.out_dir = take("out_dir", "runs/out")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def render_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to the flat format with defaults materialized."""
    lines = []

    def put(key, value):
        if value is None:
            return
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")

    put("data.path", cfg.data_path)
    put("data.name", cfg.dataset_name or None)
    put("data.channels", cfg.channels)
    put("data.ratio_train", cfg.ratios[0])
    put("data.ratio_val", cfg.ratios[1])
    put("data.ratio_test", cfg.ratios[2])
    put("data.synth_length", cfg.synth_length)
    if cfg.synth_channels:
        put("data.synth_channels", ", ".join(
            f"{c.period:g}:{c.amplitude:g}:{c.slope:g}:{c.noise:g}"
            for c in cfg.synth_channels))
        put("data.synth_seed", cfg.synth_seed)
    put("model.kind", cfg.model_kind)
    put("model.lookback", cfg.lookback)
    put("model.horizon", cfg.horizon)
    put("model.patch_len", cfg.patch_len)
    put("model.stride", cfg.stride)
    put("model.embed_dim", cfg.embed_dim)
    put("model.heads", cfg.heads)
    put("model.hidden", cfg.hidden)
    put("model.kernel", cfg.kernel)
    put("model.align_weight", cfg.align_weight)
    put("model.use_mpp", cfg.use_mpp)
    put("model.use_mim", cfg.use_mim)
    put("model.use_amwg", cfg.use_amwg)
    put("model.use_align_loss", cfg.use_align_loss)
    put("model.pos_encoding", cfg.pos_encoding)
    put("train.lr", cfg.train.lr)
    put("train.batch_size", cfg.train.batch_size)
    put("train.max_epochs", cfg.train.max_epochs)
    put("train.patience", cfg.train.patience)
    put("train.weight_decay", cfg.train.weight_decay)
    put("seeds", ",".join(str(s) for s in cfg.seeds))
    put("out_dir", cfg.out_dir)
    return "\n".join(lines) + "\n"


def config_echo(cfg: ModelConfig | BaselineConfig, train: TrainSettings | None = None) -> dict:
    """Flat dict snapshot of a resolved config, for reports."""
    echo = dataclasses.asdict(cfg)
    echo["model_class"] = type(cfg).__name__
    if train is not None:
        echo.update({f"train.{k}": v for k, v in dataclasses.asdict(train).items()})
    return echo
