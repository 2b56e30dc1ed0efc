"""Experiment configuration stored as ``key = value`` lines with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from hcmi.objectives import VARIANTS, LossWeights

# file key -> dataclass attribute, where they differ
_RENAMED = {"lambda": "lam"}
_FILE_KEY = {v: k for k, v in _RENAMED.items()}

TOGGLES = ("loss_variant", "denoise", "mse", "dsl")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class ExperimentConfig:
    train_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "run"
    dim: int = 32
    n_c: int = 6
    n_p: int = 6
    alpha: float = 0.5
    beta: float = 0.1
    theta: float = 0.1
    lam: float = 0.1
    loss_variant: str = "hci"
    denoise: bool = True
    denoise_symmetric: bool = False
    mse: bool = True
    dsl: bool = False
    gamma: float = 1.0
    temperature_learnable: bool = False
    batch_size: int = 16
    steps: int = 2000
    learning_rate: float = 1e-3
    seed: int = 0
    positional: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.loss_variant not in VARIANTS:
            raise ConfigError(f"loss_variant must be one of {VARIANTS}, got {self.loss_variant!r}", "loss_variant")
        for key in ("dim", "n_c", "n_p", "steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2", "batch_size")
        for key in ("alpha", "beta", "theta", "lam"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{_FILE_KEY.get(key, key)} must be >= 0", _FILE_KEY.get(key, key))
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0", "gamma")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", "learning_rate")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.theta, self.lam)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def shared_items(self) -> list[tuple[str, object]]:
        """Every field except the ablation toggles, in declaration order."""
        return [(_FILE_KEY.get(f.name, f.name), getattr(self, f.name)) for f in fields(self) if f.name not in TOGGLES]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            text = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{_FILE_KEY.get(f.name, f.name)} = {text}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _coerce(key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}", key) from None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines. Unknown keys are rejected.

    Relative manifest paths resolve against ``base_dir``; ``out_dir`` too.
    """
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    pytypes = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'", key)
        attr = _RENAMED.get(key, key)
        if attr not in types or attr in _FILE_KEY and key != _FILE_KEY[attr]:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})", key)
        values[attr] = _coerce(key, raw, pytypes[types[attr]])
    if base_dir is not None:
        for key in ("train_manifest", "test_manifest", "out_dir"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
