"""Shared types, configuration and the seeded random-stream contract."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "RhoVariant",
    "TrainConfig",
    "RolloutRecord",
    "GroupResult",
    "BatchAccuracy",
    "validate_config",
    "load_config",
    "config_to_dict",
    "seeded_rng",
]

SAMPLER_VARIANTS = ("gaussian_curriculum", "uniform")
_CONSTANT_RE = re.compile(r"^constant\(\s*([^)]+?)\s*\)$")


class ConfigError(ValueError):
    """Raised when a TrainConfig violates one or more field constraints."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass(frozen=True)
class RhoVariant:
    """Selector for the KL scaling function: ``tanh_shifted`` or ``constant(c)``."""

    kind: str = "tanh_shifted"
    value: float | None = None

    @classmethod
    def tanh_shifted(cls) -> RhoVariant:
        return cls("tanh_shifted")

    @classmethod
    def constant(cls, c: float) -> RhoVariant:
        return cls("constant", float(c))

    @classmethod
    def parse(cls, text: str | RhoVariant) -> RhoVariant:
        if isinstance(text, RhoVariant):
            return text
        text = str(text).strip()
        if text == "tanh_shifted":
            return cls.tanh_shifted()
        m = _CONSTANT_RE.match(text)
        if m is None:
            raise ConfigError([f"rho_variant: unrecognised value {text!r}"])
        try:
            return cls.constant(float(m.group(1)))
        except ValueError:
            raise ConfigError([f"rho_variant: bad constant in {text!r}"]) from None

    def __str__(self) -> str:
        if self.kind == "constant":
            return f"constant({self.value!r})"
        return self.kind


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    batch_size: int = 16
    base_kl_coeff: float = 0.02
    clip_threshold: float = 0.2
    ema_factor: float = 0.9
    curriculum_mean: float = 0.5
    curriculum_std: float = 0.35
    adv_eps: float = 1e-8
    learning_rate: float = 0.5
    total_steps: int = 500
    seed: int = 0
    rho_variant: RhoVariant = field(default_factory=RhoVariant.tanh_shifted)
    sampler_variant: str = "gaussian_curriculum"
    sampling_temperature: float = 1.0

    @classmethod
    def grpo(cls, **overrides: Any) -> TrainConfig:
        """The GRPO baseline: constant rho of 1 and uniform question sampling."""
        overrides.setdefault("rho_variant", RhoVariant.constant(1.0))
        overrides.setdefault("sampler_variant", "uniform")
        return validate_config(cls(**overrides))

    @property
    def is_grpo(self) -> bool:
        return (
            self.rho_variant == RhoVariant.constant(1.0)
            and self.sampler_variant == "uniform"
        )

    def replace(self, **changes: Any) -> TrainConfig:
        return validate_config(dataclasses.replace(self, **changes))


def _is_int(v: Any) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_real(v: Any) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) and math.isfinite(v)


def validate_config(cfg: TrainConfig) -> TrainConfig:
    """Return ``cfg`` unchanged if every field constraint holds, else raise ConfigError."""
    problems = []

    def positive_int(name):
        v = getattr(cfg, name)
        if not _is_int(v) or v <= 0:
            problems.append(f"{name}: must be a positive integer, got {v!r}")

    def real(name, lo=None, hi=None, lo_open=False, hi_open=False):
        v = getattr(cfg, name)
        if not _is_real(v):
            problems.append(f"{name}: must be a finite real, got {v!r}")
            return
        if lo is not None and (v < lo or (lo_open and v == lo)):
            problems.append(f"{name}: must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            problems.append(f"{name}: must be {'<' if hi_open else '<='} {hi}, got {v!r}")

    positive_int("group_size")
    positive_int("batch_size")
    real("base_kl_coeff", lo=0.0)
    real("clip_threshold", lo=0.0, lo_open=True)
    real("ema_factor", lo=0.0, hi=1.0, hi_open=True)
    real("curriculum_mean", lo=0.0, hi=1.0)
    real("curriculum_std", lo=0.0, lo_open=True)
    real("adv_eps", lo=0.0, lo_open=True)
    real("learning_rate", lo=0.0)
    positive_int("total_steps")
    real("sampling_temperature", lo=0.0, lo_open=True)

    if not _is_int(cfg.seed) or not -(2**63) <= cfg.seed < 2**64:
        problems.append(f"seed: must be a 64-bit integer, got {cfg.seed!r}")
    rho = cfg.rho_variant
    if not isinstance(rho, RhoVariant) or rho.kind not in ("tanh_shifted", "constant"):
        problems.append(f"rho_variant: unsupported {rho!r}")
    elif rho.kind == "constant" and not (_is_real(rho.value) and rho.value > 0):
        problems.append(f"rho_variant: constant must be a positive finite real, got {rho.value!r}")
    if cfg.sampler_variant not in SAMPLER_VARIANTS:
        problems.append(f"sampler_variant: must be one of {SAMPLER_VARIANTS}, got {cfg.sampler_variant!r}")

    if problems:
        raise ConfigError(problems)
    return cfg


_FIELD_NAMES = tuple(f.name for f in dataclasses.fields(TrainConfig))


def config_from_dict(data: dict[str, Any]) -> TrainConfig:
    unknown = sorted(set(data) - set(_FIELD_NAMES))
    if unknown:
        raise ConfigError([f"{k}: unknown config key" for k in unknown])
    kwargs = dict(data)
    if "rho_variant" in kwargs:
        kwargs["rho_variant"] = RhoVariant.parse(kwargs["rho_variant"])
    return validate_config(TrainConfig(**kwargs))


def config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    out = {name: getattr(cfg, name) for name in _FIELD_NAMES}
    out["rho_variant"] = str(cfg.rho_variant)
    return out


def load_config(path: str | Path) -> TrainConfig:
    """Load a TrainConfig from a JSON file whose top-level keys are the field names."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return config_from_dict(data)


@dataclass(frozen=True)
class RolloutRecord:
    question_id: str
    tokens: tuple[int, ...]
    logprob_old: tuple[float, ...]
    reward: int

    def __post_init__(self):
        if len(self.tokens) < 1 or len(self.tokens) != len(self.logprob_old):
            raise ValueError("tokens and logprob_old must have equal length >= 1")
        if self.reward not in (0, 1) or isinstance(self.reward, float):
            raise ValueError(f"reward must be binary 0/1, got {self.reward!r}")


@dataclass(frozen=True)
class GroupResult:
    question_id: str
    rollouts: tuple[RolloutRecord, ...]
    empirical_pass_rate: float = field(init=False)

    def __post_init__(self):
        if not self.rollouts:
            raise ValueError("a group needs at least one rollout")
        for r in self.rollouts:
            if r.question_id != self.question_id:
                raise ValueError("rollout question_id does not match its group")
        object.__setattr__(self, "rollouts", tuple(self.rollouts))
        object.__setattr__(self, "empirical_pass_rate", sum(self.rewards) / len(self.rollouts))

    @property
    def rewards(self) -> list[int]:
        return [r.reward for r in self.rollouts]

    @property
    def tokens(self) -> np.ndarray:
        return np.array([r.tokens for r in self.rollouts], dtype=np.int64)

    @property
    def logprob_old(self) -> np.ndarray:
        return np.array([r.logprob_old for r in self.rollouts], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rollouts)


@dataclass(frozen=True)
class BatchAccuracy:
    value: float
    n_rollouts: int

    def __post_init__(self):
        if self.n_rollouts <= 0:
            raise ValueError("n_rollouts must be positive")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.value}")

    @classmethod
    def from_rewards(cls, rewards: Sequence[int]) -> BatchAccuracy:
        rewards = list(rewards)
        if not rewards:
            raise ValueError("cannot take the accuracy of an empty batch")
        if any(r not in (0, 1) for r in rewards):
            raise ValueError("rewards must be binary")
        return cls(sum(rewards) / len(rewards), len(rewards))


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Deterministic, platform-independent random stream keyed by (seed, label).

    Distinct labels give independent streams, so work split across labels
    (one per question, one per step) is unaffected by evaluation order.
    """
    s = int(seed) % (1 << 64)
    entropy = [s & 0xFFFFFFFF, s >> 32, *_label_words(stream_label)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
