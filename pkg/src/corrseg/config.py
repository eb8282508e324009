"""Experiment configuration: the declarative description of one run and the
`section.key = value` text format used by config files and checkpoint echoes.
Unknown keys are rejected."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .blocks import BlockConfig
from .losses import LossWeights
from .volumes import Modality

MODES = ("replace", "direct", "direct_cc", "direct_cc_cg")

MISSING_TOKENS = ("t2", "t1c", "flair", "t1", "random")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol: Nesterov-momentum adaptive optimizer, plateau
    learning-rate halving, early stopping on the validation loss."""

    initial_lr: float = 5e-4
    lr_factor: float = 0.5
    lr_patience: int = 10
    early_stop_patience: int = 20
    max_epochs: int = 100
    batch_size: int = 2
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    missing: str = "random"  # modality token, or 'random' per batch

    def __post_init__(self):
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if self.initial_lr <= 0 or not 0 < self.lr_factor < 1:
            raise ValueError("need initial_lr > 0 and 0 < lr_factor < 1")
        if self.missing not in MISSING_TOKENS:
            raise ValueError(f"missing must be one of {MISSING_TOKENS}")

    def fixed_missing(self) -> Modality | None:
        return None if self.missing == "random" else Modality.from_token(self.missing)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one ablation run needs: arm, volume shape, network sizes,
    and the training protocol."""

    mode: str = "direct_cc_cg"
    shape: tuple[int, int, int] = (32, 32, 32)
    net: BlockConfig = field(default_factory=BlockConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))


def _parse_shape(value: str) -> tuple[int, int, int]:
    parts = value.replace(",", " ").split()
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"shape needs 1 or 3 integers, got {value!r}")
    return tuple(int(p) for p in parts)


def _parse_rates(value: str) -> tuple[int, ...]:
    return tuple(int(p) for p in value.replace(",", " ").split())


# key -> (target, field, parser)
_SCHEMA = {
    "data.shape": ("shape", None, _parse_shape),
    "net.base_filters": ("net", "base_filters", int),
    "net.depth": ("net", "depth", int),
    "net.dilation_rates": ("net", "dilation_rates", _parse_rates),
    "net.dropout_rate": ("net", "dropout_rate", float),
    "net.kernel_size": ("net", "kernel_size", int),
    "train.initial_lr": ("train", "initial_lr", float),
    "train.lr_factor": ("train", "lr_factor", float),
    "train.lr_patience": ("train", "lr_patience", int),
    "train.early_stop_patience": ("train", "early_stop_patience", int),
    "train.max_epochs": ("train", "max_epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.seed": ("train", "seed", int),
    "train.missing": ("train", "missing", str),
    "train.w_dice": ("weights", "w_dice", float),
    "train.w_gen": ("weights", "w_gen", float),
    "train.w_cc": ("weights", "w_cc", float),
}


class ConfigError(ValueError):
    """Malformed config text or unknown key."""


def parse_config_items(text: str) -> dict[str, object]:
    """Parse `section.key = value` lines into a validated {key: parsed} dict."""
    items: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        _, _, parser = _SCHEMA[key]
        try:
            items[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return items


def apply_config_items(base: ExperimentConfig, items: dict[str, object]) -> ExperimentConfig:
    net_updates: dict[str, object] = {}
    train_updates: dict[str, object] = {}
    weight_updates: dict[str, object] = {}
    shape = base.shape
    for key, value in items.items():
        target, fname, _ = _SCHEMA[key]
        if target == "shape":
            shape = value
        elif target == "net":
            net_updates[fname] = value
        elif target == "train":
            train_updates[fname] = value
        else:
            weight_updates[fname] = value
    net = replace(base.net, **net_updates) if net_updates else base.net
    weights = (
        replace(base.train.loss_weights, **weight_updates)
        if weight_updates
        else base.train.loss_weights
    )
    train = replace(base.train, loss_weights=weights, **train_updates)
    return replace(base, shape=shape, net=net, train=train)


def load_config_file(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    from pathlib import Path

    base = base or ExperimentConfig()
    return apply_config_items(base, parse_config_items(Path(path).read_text(encoding="utf-8")))


def format_config(config: ExperimentConfig) -> str:
    """Render a config as `section.key = value` lines (round-trips via parse)."""
    w = config.train.loss_weights
    lines = [
        f"data.shape = {' '.join(str(s) for s in config.shape)}",
        f"net.base_filters = {config.net.base_filters}",
        f"net.depth = {config.net.depth}",
        f"net.dilation_rates = {' '.join(str(r) for r in config.net.dilation_rates)}",
        f"net.dropout_rate = {config.net.dropout_rate!r}",
        f"net.kernel_size = {config.net.kernel_size}",
        f"train.initial_lr = {config.train.initial_lr!r}",
        f"train.lr_factor = {config.train.lr_factor!r}",
        f"train.lr_patience = {config.train.lr_patience}",
        f"train.early_stop_patience = {config.train.early_stop_patience}",
        f"train.max_epochs = {config.train.max_epochs}",
        f"train.batch_size = {config.train.batch_size}",
        f"train.seed = {config.train.seed}",
        f"train.missing = {config.train.missing}",
        f"train.w_dice = {w.w_dice!r}",
        f"train.w_gen = {w.w_gen!r}",
        f"train.w_cc = {w.w_cc!r}",
    ]
    return "\n".join(lines) + "\n"
