"""Adaptive focusing parameters from positive-sample prediction quality.

``gamma_ad = clamp(-ln(mean p over positives), gamma - delta, gamma + delta)``
and ``alpha_ad = w / gamma_ad``. Values are detached constants: nothing here is
differentiated by the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Union

import numpy as np

from .losses import PROB_FLOOR, DomainError, FocusParams, LossKind, Sample


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class SamplingMode(str, Enum):
    ALL_LEVEL = "all-level"
    LEVEL_WISE = "level-wise"
    PER_SAMPLE = "per-sample"


Scope = Union[int, str]
GLOBAL = "global"


@dataclass(frozen=True)
class FocusConfig:
    alpha_base: float = 0.25
    gamma_base: float = 2.0
    w: float = 0.5
    delta: float = 0.5
    sampling_mode: SamplingMode = SamplingMode.LEVEL_WISE
    loss_kind: LossKind = LossKind.HPF
    num_levels: int = 5

    def __post_init__(self):
        try:
            object.__setattr__(self, "sampling_mode", SamplingMode(self.sampling_mode))
        except ValueError:
            raise ConfigError(f"sampling_mode: unknown mode {self.sampling_mode!r}") from None
        try:
            object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        except ValueError:
            raise ConfigError(f"loss_kind: unknown loss {self.loss_kind!r}") from None
        if not 0.0 < self.alpha_base < 1.0:
            raise ConfigError(f"alpha_base must lie in (0, 1), got {self.alpha_base}")
        if not self.gamma_base > 0.0:
            raise ConfigError(f"gamma_base must be > 0, got {self.gamma_base}")
        if not self.w > 0.0:
            raise ConfigError(f"w must be > 0, got {self.w}")
        if not self.delta >= 0.0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if not self.gamma_base - self.delta > 0.0:
            raise ConfigError(
                f"delta: gamma_base - delta must be > 0 (gamma_base={self.gamma_base}, delta={self.delta})"
            )
        if self.w / (self.gamma_base - self.delta) >= 1.0:
            raise ConfigError(
                f"w: w / (gamma_base - delta) must be < 1 so alpha stays in (0, 1), got w={self.w}"
            )
        if int(self.num_levels) != self.num_levels or self.num_levels < 1:
            raise ConfigError(f"num_levels must be a positive integer, got {self.num_levels}")

    @property
    def gamma_range(self) -> tuple[float, float]:
        return self.gamma_base - self.delta, self.gamma_base + self.delta

    @property
    def static_params(self) -> FocusParams:
        return FocusParams(self.alpha_base, self.gamma_base)


@dataclass(frozen=True)
class ScheduleSnapshot:
    """One resolved schedule. ``gamma_raw`` is NaN when the scope had no positives."""

    level: Scope
    gamma_raw: float
    gamma_clamped: float
    alpha: float
    n_pos: int
    mean_pos_prob: float

    @property
    def params(self) -> FocusParams:
        return FocusParams(self.alpha, self.gamma_clamped)

    @property
    def fallback(self) -> bool:
        return self.n_pos == 0


def gamma_raw(positive_probs) -> float:
    """``-ln`` of the mean positive probability (mean first, then log)."""
    probs = np.asarray(positive_probs, dtype=float).ravel()
    if probs.size == 0:
        raise ValueError("gamma_raw needs at least one positive probability")
    if np.isnan(probs).any() or (probs <= 0).any() or (probs > 1).any():
        raise DomainError("positive probabilities must lie in (0, 1]")
    # fsum is exactly rounded, which makes the result order independent.
    return -math.log(math.fsum(probs.tolist()) / probs.size)


def clamp_gamma(raw: float, cfg: FocusConfig) -> float:
    lo, hi = cfg.gamma_range
    return min(max(raw, lo), hi)


def alpha_from_gamma(gamma_ad: float, cfg: FocusConfig) -> float:
    if not gamma_ad > 0:
        raise DomainError(f"gamma_ad must be > 0, got {gamma_ad}")
    return cfg.w / gamma_ad


def fallback_snapshot(cfg: FocusConfig, scope: Scope = GLOBAL) -> ScheduleSnapshot:
    return ScheduleSnapshot(
        level=scope,
        gamma_raw=math.nan,
        gamma_clamped=cfg.gamma_base,
        alpha=alpha_from_gamma(cfg.gamma_base, cfg),
        n_pos=0,
        mean_pos_prob=0.0,
    )


def snapshot_from_probs(positive_probs, cfg: FocusConfig, scope: Scope = GLOBAL) -> ScheduleSnapshot:
    """Compose ``gamma_raw -> clamp_gamma -> alpha_from_gamma`` over one scope."""
    probs = np.maximum(np.asarray(positive_probs, dtype=float).ravel(), PROB_FLOOR)
    if probs.size == 0:
        return fallback_snapshot(cfg, scope)
    mean = math.fsum(probs.tolist()) / probs.size
    raw = -math.log(mean)
    g = clamp_gamma(raw, cfg)
    return ScheduleSnapshot(
        level=scope,
        gamma_raw=raw,
        gamma_clamped=g,
        alpha=alpha_from_gamma(g, cfg),
        n_pos=int(probs.size),
        mean_pos_prob=mean,
    )


def static_snapshot(positive_probs, cfg: FocusConfig, scope: Scope = GLOBAL) -> ScheduleSnapshot:
    """Snapshot for a non-adaptive loss: fixed ``(alpha_base, gamma_base)``.

    ``gamma_raw`` is still measured so static runs can be compared with
    adaptive ones on the same diagnostics.
    """
    snap = snapshot_from_probs(positive_probs, cfg, scope)
    return ScheduleSnapshot(
        level=scope,
        gamma_raw=snap.gamma_raw,
        gamma_clamped=cfg.gamma_base,
        alpha=cfg.alpha_base,
        n_pos=snap.n_pos,
        mean_pos_prob=snap.mean_pos_prob,
    )


def per_sample_gamma(positive_probs, cfg: FocusConfig) -> np.ndarray:
    """Per-positive ``clamp(-ln p_i)`` used by the per-sample mode."""
    probs = np.maximum(np.asarray(positive_probs, dtype=float), PROB_FLOOR)
    lo, hi = cfg.gamma_range
    return np.clip(-np.log(probs), lo, hi)


def _positive_probs(samples) -> np.ndarray:
    if hasattr(samples, "positive_probs"):
        return samples.positive_probs()
    return np.array([s.prob for s in samples if s.positive], dtype=float)


def resolve_focus(
    samples: Iterable[Sample], cfg: FocusConfig, scope: Scope = GLOBAL
) -> ScheduleSnapshot:
    """Resolve ``(alpha_ad, gamma_ad)`` from the positives in ``samples``.

    Accepts a list of :class:`Sample` or a ``SampleSet``. A sample is positive
    when its hard label is 1 or its quality is above 0; its probability enters
    the mean unweighted. With no positives the static baseline
    ``(w / gamma_base, gamma_base)`` is returned.
    """
    return snapshot_from_probs(_positive_probs(samples), cfg, scope)
