"""Configuration dataclasses and the flat key=value config file format.

One namespace holds model, loss, optimizer and run keys.  Files are plain
text, one ``key = value`` per line, ``#`` comments, lowercase booleans,
comma-joined integer tuples.  Every run echoes its fully resolved config
next to its outputs so a run can be reproduced from the echo alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults follow the base four-stage layout; tests use a much smaller
    variant.  ``stage_channels`` and ``stage_depths`` always describe four
    stages with strides 4, 8, 16 and 32 relative to the input image.
    """

    stage_channels: tuple[int, int, int, int] = (128, 256, 512, 1024)
    stage_depths: tuple[int, int, int, int] = (2, 2, 15, 2)
    state_dim: int = 16
    num_classes: int = 7
    fft_branch: bool = True
    diff_branch: bool = True
    cga: bool = True
    attention_reduction: int = 8
    seed: int = 0

    def validate(self) -> None:
        if len(self.stage_channels) != 4:
            raise ConfigError("stage_channels must have exactly 4 entries")
        if len(self.stage_depths) != 4:
            raise ConfigError("stage_depths must have exactly 4 entries")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError("stage_channels must be positive")
        if any(d <= 0 for d in self.stage_depths):
            raise ConfigError("stage_depths must be positive")
        if any(c % 2 for c in self.stage_channels):
            raise ConfigError("stage_channels must be even (gated projection splits in half)")
        if self.state_dim <= 0:
            raise ConfigError("state_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2 (no-change plus one class)")
        if self.attention_reduction <= 0:
            raise ConfigError("attention_reduction must be positive")
        if min(self.stage_channels) < self.attention_reduction:
            raise ConfigError(
                "stage_channels must all be >= attention_reduction "
                f"({min(self.stage_channels)} < {self.attention_reduction})"
            )

    @property
    def fusion_width_multiplier(self) -> int:
        """Input width of the fusion 1x1 compression, in units of C_i."""
        return 2 + (2 if self.fft_branch else 0) + (1 if self.diff_branch else 0)


@dataclass
class LossWeights:
    lambda_miou: float = 0.15
    lambda_sek: float = 0.3
    epsilon: float = 1e-6
    sek_loss: bool = True

    def validate(self) -> None:
        if self.lambda_miou < 0 or self.lambda_sek < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-3
    batch_size: int = 4
    iterations: int = 30000
    grad_clip: float = 0.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be non-negative (0 disables clipping)")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    data_root: str = ""
    out_dir: str = "runs/default"
    eval_interval: int = 1000
    seed: int = 0
    augment: bool = True

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.optim.validate()
        if self.eval_interval <= 0:
            raise ConfigError("eval_interval must be positive")

    def __post_init__(self) -> None:
        # One seed drives both weight init and batch sampling.
        self.model.seed = self.seed


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _parse_bool(key: str, s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ConfigError(f"config key '{key}' expects true or false, got '{s}'")


def _parse_int(key: str, s: str) -> int:
    try:
        return int(s, 10)
    except ValueError:
        raise ConfigError(f"config key '{key}' expects a decimal integer, got '{s}'") from None


def _parse_float(key: str, s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"config key '{key}' expects a number, got '{s}'") from None


def _parse_int4(key: str, s: str) -> tuple[int, int, int, int]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"config key '{key}' expects 4 comma-separated integers, got '{s}'")
    return tuple(_parse_int(key, p) for p in parts)  # type: ignore[return-value]


def _fmt_int4(v: tuple[int, ...]) -> str:
    return ",".join(str(x) for x in v)


# key -> (section attr on RunConfig or "" for top level, field name, parser, formatter)
_KEYS: dict[str, tuple[str, str, object, object]] = {
    "stage_channels": ("model", "stage_channels", _parse_int4, _fmt_int4),
    "stage_depths": ("model", "stage_depths", _parse_int4, _fmt_int4),
    "state_dim": ("model", "state_dim", _parse_int, str),
    "num_classes": ("model", "num_classes", _parse_int, str),
    "fft_branch": ("model", "fft_branch", _parse_bool, _fmt_bool),
    "diff_branch": ("model", "diff_branch", _parse_bool, _fmt_bool),
    "cga": ("model", "cga", _parse_bool, _fmt_bool),
    "attention_reduction": ("model", "attention_reduction", _parse_int, str),
    "lambda_miou": ("loss", "lambda_miou", _parse_float, repr),
    "lambda_sek": ("loss", "lambda_sek", _parse_float, repr),
    "epsilon": ("loss", "epsilon", _parse_float, repr),
    "sek_loss": ("loss", "sek_loss", _parse_bool, _fmt_bool),
    "learning_rate": ("optim", "learning_rate", _parse_float, repr),
    "weight_decay": ("optim", "weight_decay", _parse_float, repr),
    "batch_size": ("optim", "batch_size", _parse_int, str),
    "iterations": ("optim", "iterations", _parse_int, str),
    "grad_clip": ("optim", "grad_clip", _parse_float, repr),
    "data_root": ("", "data_root", str, str),
    "out_dir": ("", "out_dir", str, str),
    "eval_interval": ("", "eval_interval", _parse_int, str),
    "seed": ("", "seed", _parse_int, str),
    "augment": ("", "augment", _parse_bool, _fmt_bool),
}


def config_to_text(run: RunConfig) -> str:
    """Serialize a RunConfig to the flat key=value format.

    Emits every key plus a comment with the derived fusion width so the
    effective concat layout is visible in the echo.
    """
    lines = []
    for key, (section, attr, _parse, fmt) in _KEYS.items():
        obj = getattr(run, section) if section else run
        lines.append(f"{key} = {fmt(getattr(obj, attr))}")
    lines.append(f"# derived: fusion_concat_width_multiplier = {run.model.fusion_width_multiplier}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    """Parse the flat format. Unknown keys and malformed lines are errors."""
    run = RunConfig()
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not 'key = value': '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown config key '{key}' (line {lineno})")
        if key in seen:
            raise ConfigError(f"duplicate config key '{key}' (line {lineno})")
        seen.add(key)
        section, attr, parse, _fmt = _KEYS[key]
        obj = getattr(run, section) if section else run
        setattr(obj, attr, parse(key, value) if parse is not str else value)  # type: ignore[operator]
    run.model.seed = run.seed
    run.validate()
    return run


def save_config(run: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(run))


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return config_from_text(p.read_text())
