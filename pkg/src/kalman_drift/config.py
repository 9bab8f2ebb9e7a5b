"""Experiment configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Lists (``architecture``,
``tasks``) are comma separated. Example::

    architecture = 784, 256, 10
    lr = 0.1
    tasks = identity, permute_pixels, shift_labels
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .data import NUM_CLASSES, NUM_PIXELS, TRANSFORM_KINDS, TaskSpec, make_task_sequence
from .kalman import NOISE_TRANSFORMS

LEARNERS = ("conventional", "kalman")
LEARNER_CHOICES = ("conventional", "kalman", "both")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class TrainerConfig:
    architecture: tuple[int, ...] = (NUM_PIXELS, 256, NUM_CLASSES)
    lr: float = 0.1
    batch_size: int = 64
    epochs_per_task: int = 5
    noise_floor: float = 1e-12
    noise_transform: str = "square"
    eval_every: int = 50
    seed: int = 0
    tasks: tuple[str, ...] = TRANSFORM_KINDS
    permute_seed: int = 2024
    label_offset: int = 1
    validation_size: int = 5000
    learner: str = "both"

    def learners(self) -> tuple[str, ...]:
        return LEARNERS if self.learner == "both" else (self.learner,)

    def task_sequence(self) -> list[TaskSpec]:
        return make_task_sequence(self.tasks, self.epochs_per_task,
                                  self.permute_seed, self.label_offset)

    def validate(self) -> TrainerConfig:
        """Raise ConfigError naming the first violated invariant."""
        arch = self.architecture
        if len(arch) < 2 or any(n <= 0 for n in arch):
            raise ConfigError(f"architecture: needs >= 2 positive layer sizes, got {arch}")
        checks = [
            ("lr", self.lr > 0, "must be positive"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("epochs_per_task", self.epochs_per_task >= 1, "must be >= 1"),
            ("noise_floor", self.noise_floor > 0, "must be positive"),
            ("noise_transform", self.noise_transform in NOISE_TRANSFORMS,
             f"must be one of {', '.join(NOISE_TRANSFORMS)}"),
            ("eval_every", self.eval_every >= 1, "must be >= 1"),
            ("label_offset", 1 <= self.label_offset < NUM_CLASSES,
             f"must be in [1, {NUM_CLASSES})"),
            ("validation_size", self.validation_size >= 1, "must be >= 1"),
            ("learner", self.learner in LEARNER_CHOICES,
             f"must be one of {', '.join(LEARNER_CHOICES)}"),
        ]
        for name, ok, rule in checks:
            if not ok:
                raise ConfigError(f"{name}: {rule} (got {getattr(self, name)!r})")
        if not self.tasks:
            raise ConfigError("tasks: at least one task is required")
        for kind in self.tasks:
            if kind not in TRANSFORM_KINDS:
                raise ConfigError(
                    f"tasks: unknown transform kind {kind!r} (expected one of {', '.join(TRANSFORM_KINDS)})")
        if self.tasks[0] != "identity":
            raise ConfigError(f"tasks: the first task must be 'identity', got {self.tasks[0]!r}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


_FIELDS = {f.name: f for f in dataclasses.fields(TrainerConfig)}


def _coerce(key: str, raw: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown configuration key")
    default = _FIELDS[key].default
    try:
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",")]
            items = [str(s).strip() for s in items if str(s).strip()]
            if key == "architecture":
                return tuple(int(s) for s in items)
            return tuple(items)
        if isinstance(default, int):
            return int(str(raw).strip())
        if isinstance(default, float):
            return float(str(raw).strip())
        return str(raw).strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def build_config(path=None, overrides: Mapping[str, Any] | None = None) -> TrainerConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (flags win)."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from None
        values.update(parse_config_text(text))
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = _coerce(key, raw)
    return TrainerConfig(**values).validate()
