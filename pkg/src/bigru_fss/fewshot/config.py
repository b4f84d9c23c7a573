from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping


@dataclass
class TrainConfig:
    """Everything needed to rebuild a model and replay its training run.

    ``target_organ_id`` is the organ withheld from meta-training (0 keeps
    every organ).  ``hidden_channels`` of 0 means "same as the bottleneck
    width", which makes the bidirectional output as wide as the fused
    encoder features.
    """

    K: int = 1
    n_a: int = 2
    slice_size: int = 64
    learning_rate: float = 1e-4
    iterations: int = 1000
    precision: int = 32
    seed: int = 0
    ablation_disable_gru: bool = False
    target_organ_id: int = 0
    augment_train: bool = True
    augment_adapt: bool = True
    arbitrary_rotation: bool = False
    widths: tuple[int, ...] = (16, 32, 64, 64)
    hidden_channels: int = 0
    fixed_episode: bool = False
    log_every: int = 50
    adapt_iterations: int = 100
    adapt_learning_rate: float = 0.0
    adapt_eval_every: int = 10
    adapt_patience: int = 3
    adapt_eval_slices: int = 3
    adapt_random_splits: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.n_a < 0:
            raise ValueError(f"n_a must be >= 0, got {self.n_a}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.slice_size % 2 ** len(self.widths):
            raise ValueError(f"slice_size {self.slice_size} not divisible by 2^{len(self.widths)}")
        if self.iterations < 0 or self.adapt_iterations < 0:
            raise ValueError("iteration counts must be non-negative")

    @property
    def hidden(self) -> int:
        return self.hidden_channels or self.widths[-1]

    @property
    def adapt_lr(self) -> float:
        return self.adapt_learning_rate or self.learning_rate

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: coerce(k, v) for k, v in d.items()})


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def coerce(key: str, value: Any) -> Any:
    """Convert a text value (from a config file or flag) to the field's type."""
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise KeyError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    text = value.strip()
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {value!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind.startswith("tuple"):
        return tuple(int(p) for p in text.replace(",", " ").split())
    return text
