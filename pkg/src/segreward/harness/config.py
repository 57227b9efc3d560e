"""Training configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ..grpo import GrpoConfig
from ..rewards import AccuracyConfig, LengthConfig, RewardConfig
from .scenes import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    scene_seed: int = 1234
    eval_seed: int = 4321
    n_cases: int = 64
    eval_cases: int = 64
    hard_fraction: float = 0.5
    min_objects: int = 2
    max_objects: int = 5
    image_w: int = 640
    image_h: int = 480
    grid_scale: float = 0.125
    steps: int = 200
    group_size: int = 8
    batch_size: int = 16
    learning_rate: float = 0.1
    normalize_by_std: bool = True
    epsilon: float = 1e-8
    kl_beta: float = 0.0
    anchor_n0: float = 45.0
    gamma: float = 0.05
    box_l1_reduction: str = "sum"
    enable_desc: bool = True
    enable_len: bool = True
    reward_mode: str = "box_point"
    mask_noise: float = 0.0
    init: str = "default"
    trace: bool = True

    def __post_init__(self):
        try:
            self.grpo()
            self.rewards()
            self.scenes().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.steps < 0:
            raise ConfigError("steps: must be non-negative")
        if self.n_cases < 1 or self.eval_cases < 0:
            raise ConfigError("n_cases must be positive and eval_cases non-negative")
        if self.init not in ("default", "cold"):
            raise ConfigError(f"init: unknown policy init {self.init!r}")
        if not 0 <= self.hard_fraction <= 1:
            raise ConfigError("hard_fraction: must be in [0, 1]")

    def grpo(self) -> GrpoConfig:
        return GrpoConfig(
            normalize_by_std=self.normalize_by_std,
            epsilon=self.epsilon,
            kl_beta=self.kl_beta,
            group_size=self.group_size,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
        )

    def rewards(self) -> RewardConfig:
        return RewardConfig(
            length=LengthConfig(self.anchor_n0, self.gamma),
            accuracy=AccuracyConfig(box_l1_reduction=self.box_l1_reduction),
            enable_desc=self.enable_desc,
            enable_len=self.enable_len,
            reward_mode=self.reward_mode,
        )

    def scenes(self) -> SceneConfig:
        return SceneConfig(
            image_w=self.image_w,
            image_h=self.image_h,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            grid_scale=self.grid_scale,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            kwargs[key] = _coerce(key, value, type(getattr(cls(), key)))
        return cls(**kwargs)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value, kind: type):
    if isinstance(value, str):
        text = value.strip()
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if kind in (int, float):
            try:
                number = float(text)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
            if kind is int:
                if not number.is_integer():
                    raise ConfigError(f"{key}: expected an integer, got {value!r}")
                return int(number)
            return number
        return text
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind in (int, float) and not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if kind is int and (isinstance(value, bool) or not float(value).is_integer()):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if kind in (int, float):
        return kind(value)
    return value


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        out[key] = value
    return out


def load_config_file(path) -> dict:
    """Raw mapping from a ``key = value`` file or a JSON object."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return data
    return parse_kv(text)
