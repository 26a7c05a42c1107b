"""Run configuration: plain key=value files, flag overrides, presets.

Every run directory gets one resolved snapshot; that file alone reproduces
the run.  Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .trainer import LayerSpec, NetSpec, TrainSchedule

DATASETS = ("mnist", "fmnist", "cifar10")
ESTIMATORS = ("lff", "bsff", "bgbsff", "importance")
ACTIVATIONS = ("relu", "logistic_bsn", "tiled_logistic")

# Reference hyperparameters per dataset: layerwise epoch windows (four conv
# layers plus the classifier head), conv and classifier learning rates keyed
# by tile count (single-unit runs use their own tuned rates on the two
# easier datasets).
PRESETS = {
    "mnist": {
        "windows": [[0, 5], [0, 10], [0, 15], [0, 20], [0, 100]],
        "hw": (28, 28), "in_channels": 1,
        "lr": {1: (5e-4, 5e-3), "default": (1e-3, 1e-3)},
    },
    "fmnist": {
        "windows": [[0, 20], [0, 30], [0, 40], [0, 60], [0, 120]],
        "hw": (28, 28), "in_channels": 1,
        "lr": {1: (1e-4, 1e-3), "default": (1e-3, 1e-3)},
    },
    "cifar10": {
        "windows": [[0, 25], [0, 35], [0, 50], [0, 75], [0, 150]],
        "hw": (32, 32), "in_channels": 3,
        "lr": {"default": (1e-3, 1e-3)},
    },
}

DEFAULT_CHANNELS = (20, 80, 240, 480)
DEFAULT_POOLS = ("none", "max2x2", "none", "max2x2")


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_root: str = ""
    estimator: str = "bgbsff"
    activation: str = "tiled_logistic"
    tiles: int = 3
    loss_at: str = ""            # '' = per-norm default; post_norm | post_pool
    seed: int = 1
    out_dir: str = "runs/latest"
    batch_size: int = 128
    lr_conv: float = 0.0         # 0 = preset default
    lr_classifier: float = 0.0
    windows: str = ""            # "0-5,0-10,..." overrides the preset
    channels: str = ""           # "20,80,240,480"
    kernel: int = 3
    groups: int = 10             # class-aligned group convs on even layers
    layers: int = 0              # 0 = all; n = truncated stack (n conv layers)
    subset: int = 0              # 0 = full training set
    workers: int = 1
    eval_policy: str = "expectation"
    eval_samples: int = 32
    importance_samples: int = 8

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.loss_at not in ("", "post_norm", "post_pool"):
            raise ConfigError("loss_at must be post_norm or post_pool")
        if self.tiles < 1:
            raise ConfigError("tiles must be >= 1")
        if self.estimator != "lff" and self.activation == "relu":
            raise ConfigError("stochastic estimators need stochastic units")
        if self.eval_policy not in ("expectation", "sampled"):
            raise ConfigError("eval_policy must be expectation or sampled")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path) -> dict:
    """key=value lines; '#' comments; unknown keys rejected."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults <- config file <- CLI flags (flags win)."""
    cfg = RunConfig()
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown key {key!r}")
            if value is None:
                continue
            current = getattr(cfg, key)
            if isinstance(current, bool):
                value = str(value).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            else:
                value = str(value)
            setattr(cfg, key, value)
    return cfg.validate()


def resolved_text(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration (schema v1)"]
    for f in fields(RunConfig):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def parse_windows(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" not in part:
            raise ConfigError(f"window {part!r} must look like start-end")
        a, b = part.split("-", 1)
        out.append((int(a), int(b)))
    return out


def net_from_config(cfg: RunConfig, ncat: int = 10) -> NetSpec:
    """Reference stack: plain conv on odd layers, class-aligned group conv
    plus max-pool on even layers, batch normalization everywhere except the
    final layer, whose loss sits on the raw pooled output."""
    preset = PRESETS[cfg.dataset]
    channels = (tuple(int(c) for c in cfg.channels.split(","))
                if cfg.channels else DEFAULT_CHANNELS)
    n_layers = cfg.layers or len(channels)
    channels = channels[:n_layers]
    activation = "relu" if cfg.estimator == "lff" else cfg.activation
    tiles = cfg.tiles if activation == "tiled_logistic" else 1
    layers = []
    for i, c_out in enumerate(channels):
        last = i == len(channels) - 1
        pool = "max2x2" if i % 2 == 1 else "none"
        norm = "none" if last else (
            "zscore_only" if cfg.loss_at == "post_pool" else "batchnorm")
        layers.append(LayerSpec(
            out_channels=c_out, kernel=cfg.kernel,
            groups=cfg.groups if i % 2 == 1 else 1,
            activation=activation, tiles=tiles, pool=pool, norm=norm,
            loss_at="" if last else cfg.loss_at))
    return NetSpec(preset["in_channels"], preset["hw"], ncat, layers)


def schedule_from_config(cfg: RunConfig) -> TrainSchedule:
    preset = PRESETS[cfg.dataset]
    if cfg.windows:
        windows = parse_windows(cfg.windows)
    else:
        windows = [tuple(w) for w in preset["windows"]]
        if cfg.layers:
            windows = windows[:cfg.layers] + [windows[-1]]
    lr_key = cfg.tiles if cfg.tiles in preset["lr"] else "default"
    lr_conv, lr_clf = preset["lr"][lr_key]
    return TrainSchedule(
        windows=windows,
        lr_conv=cfg.lr_conv or lr_conv,
        lr_classifier=cfg.lr_classifier or lr_clf,
        batch_size=cfg.batch_size,
        workers=cfg.workers)
