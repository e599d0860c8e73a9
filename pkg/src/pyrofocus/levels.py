"""Level-wise loss pipeline: split by pyramid level, resolve focus, level mean.

The total classification loss is the unweighted mean over ``L`` levels of each
level's mean per-sample loss. Empty levels contribute 0 and still count in the
``1/L``. Focus parameters are constants with respect to the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .losses import DomainError, LossKind, Sample, loss_grads, loss_values
from .scheduler import (
    GLOBAL,
    FocusConfig,
    SamplingMode,
    ScheduleSnapshot,
    per_sample_gamma,
    snapshot_from_probs,
    static_snapshot,
)


@dataclass
class SampleSet:
    """Struct-of-arrays collection of samples.

    ``label`` is the hard 0/1 label and ``quality`` the continuous target; a
    sample is positive iff ``label == 1``. ``features`` is optional and only
    carried by simulator output.
    """

    logit: np.ndarray
    label: np.ndarray
    level: np.ndarray
    quality: Optional[np.ndarray] = None
    prob: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.logit = np.asarray(self.logit, dtype=float).ravel()
        self.label = np.asarray(self.label, dtype=np.int8).ravel()
        self.level = np.asarray(self.level, dtype=np.int64).ravel()
        n = self.logit.size
        if self.quality is None:
            self.quality = self.label.astype(float)
        else:
            self.quality = np.asarray(self.quality, dtype=float).ravel()
        if self.prob is None:
            self.prob = expit(self.logit)
        else:
            self.prob = np.asarray(self.prob, dtype=float).ravel()
        for name in ("label", "level", "quality", "prob"):
            if getattr(self, name).size != n:
                raise ValueError(f"{name} has {getattr(self, name).size} entries, expected {n}")
        if ((self.label != 0) & (self.label != 1)).any():
            raise DomainError("labels must be 0 or 1")
        if (self.quality < 0).any() or (self.quality > 1).any():
            raise DomainError("quality targets must lie in [0, 1]")
        if ((self.quality > 0) != (self.label == 1)).any():
            raise DomainError("quality must be > 0 exactly for positive labels")

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "SampleSet":
        samples = list(samples)
        return cls(
            logit=np.array([s.logit for s in samples], dtype=float),
            label=np.array([1 if s.positive else 0 for s in samples], dtype=np.int8),
            level=np.array([s.level for s in samples], dtype=np.int64),
            quality=np.array([s.target.value for s in samples], dtype=float),
            prob=np.array([s.prob for s in samples], dtype=float),
        )

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(np.empty(0), np.empty(0, dtype=np.int8), np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.logit.size

    @property
    def positive(self) -> np.ndarray:
        return self.label == 1

    def positive_probs(self) -> np.ndarray:
        return self.prob[self.label == 1]

    def target(self, kind: LossKind) -> np.ndarray:
        return self.quality if LossKind(kind).uses_quality else self.label

    def take(self, idx) -> "SampleSet":
        # Rows of a validated set need no re-validation.
        out = object.__new__(SampleSet)
        out.logit = self.logit[idx]
        out.label = self.label[idx]
        out.level = self.level[idx]
        out.quality = self.quality[idx]
        out.prob = self.prob[idx]
        out.features = None if self.features is None else self.features[idx]
        return out

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        if not parts:
            return cls.empty()
        feats = [p.features for p in parts]
        return cls(
            logit=np.concatenate([p.logit for p in parts]),
            label=np.concatenate([p.label for p in parts]),
            level=np.concatenate([p.level for p in parts]),
            quality=np.concatenate([p.quality for p in parts]),
            prob=np.concatenate([p.prob for p in parts]),
            features=None if any(f is None for f in feats) else np.concatenate(feats),
        )


def as_sample_set(samples: Union[SampleSet, Sequence[Sample]]) -> SampleSet:
    if isinstance(samples, SampleSet):
        return samples
    return SampleSet.from_samples(samples)


@dataclass
class LevelBatch:
    """All samples of one level.

    ``index`` maps rows back to positions in the pre-split input. Batches built
    by hand may leave it as None; they are then read in concatenation order.
    """

    level: int
    samples: SampleSet
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.samples.level != self.level).any():
            raise ValueError(f"batch for level {self.level} holds samples of other levels")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class LevelFocus:
    """Resolved parameters for one level: scalars, or per-sample arrays."""

    snapshot: ScheduleSnapshot
    alpha: Union[float, np.ndarray]
    gamma: Union[float, np.ndarray]


@dataclass
class LevelLossReport:
    level: int
    snapshot: ScheduleSnapshot
    loss_sum: float
    loss_mean: float
    pos_loss_mass: float
    neg_loss_mass: float
    n: int
    n_pos: int


@dataclass
class Evaluation:
    """Everything one pass over the levels produces.

    ``losses`` and ``grads`` are aligned with the original sample order;
    ``grads`` already carries the ``1/L`` and per-level ``1/n`` factors.
    """

    total: float
    reports: list
    losses: np.ndarray
    grads: np.ndarray
    focus: list = field(repr=False)


def split_by_level(samples, num_levels: int) -> list[LevelBatch]:
    """Stable partition into ``num_levels`` batches; empty levels are kept."""
    ss = as_sample_set(samples)
    if len(ss) and (ss.level.min() < 0 or ss.level.max() >= num_levels):
        bad = ss.level[(ss.level < 0) | (ss.level >= num_levels)][0]
        raise DomainError(f"sample level {bad} outside [0, {num_levels - 1}]")
    batches = []
    for lv in range(num_levels):
        idx = np.flatnonzero(ss.level == lv)
        batches.append(LevelBatch(lv, ss.take(idx), idx))
    return batches


def _snapshot(probs, cfg: FocusConfig, scope) -> ScheduleSnapshot:
    if cfg.loss_kind.adaptive:
        return snapshot_from_probs(probs, cfg, scope)
    return static_snapshot(probs, cfg, scope)


def global_snapshot(batches: Sequence[LevelBatch], cfg: FocusConfig) -> ScheduleSnapshot:
    """One snapshot over the union of all levels' positives."""
    probs = np.concatenate([b.samples.positive_probs() for b in batches]) if batches else []
    return _snapshot(probs, cfg, GLOBAL)


def level_focus(
    batch: LevelBatch, cfg: FocusConfig, snapshot: Optional[ScheduleSnapshot] = None
) -> LevelFocus:
    mode = cfg.sampling_mode
    if snapshot is None:
        if mode is SamplingMode.ALL_LEVEL:
            raise ValueError("all-level mode needs the caller to supply the global snapshot")
        snapshot = _snapshot(batch.samples.positive_probs(), cfg, batch.level)
    if mode is SamplingMode.PER_SAMPLE and cfg.loss_kind.adaptive:
        pos = batch.samples.positive
        gamma = np.full(len(batch), snapshot.gamma_clamped)
        gamma[pos] = per_sample_gamma(batch.samples.prob[pos], cfg)
        alpha = np.full(len(batch), snapshot.alpha)
        alpha[pos] = cfg.w / gamma[pos]
        return LevelFocus(snapshot, alpha, gamma)
    return LevelFocus(snapshot, snapshot.alpha, snapshot.gamma_clamped)


def resolve_levels(batches: Sequence[LevelBatch], cfg: FocusConfig) -> list[LevelFocus]:
    """Resolve focus for every level according to ``cfg.sampling_mode``."""
    shared = None
    if cfg.sampling_mode is SamplingMode.ALL_LEVEL:
        shared = global_snapshot(batches, cfg)
    return [level_focus(b, cfg, shared) for b in batches]


def _report(batch: LevelBatch, focus: LevelFocus, losses: np.ndarray) -> LevelLossReport:
    pos = batch.samples.positive
    pos_mass = float(losses[pos].sum())
    neg_mass = float(losses[~pos].sum())
    total = pos_mass + neg_mass
    n = len(batch)
    return LevelLossReport(
        level=batch.level,
        snapshot=focus.snapshot,
        loss_sum=total,
        loss_mean=total / n if n else 0.0,
        pos_loss_mass=pos_mass,
        neg_loss_mass=neg_mass,
        n=n,
        n_pos=int(pos.sum()),
    )


def level_loss(
    batch: LevelBatch, cfg: FocusConfig, snapshot: Optional[ScheduleSnapshot] = None
) -> LevelLossReport:
    """Loss report for one level.

    In all-level mode ``snapshot`` must be the global one; in the other modes
    it defaults to the level's own resolution.
    """
    focus = level_focus(batch, cfg, snapshot)
    s = batch.samples
    losses = loss_values(s.prob, s.target(cfg.loss_kind), focus.alpha, focus.gamma, cfg.loss_kind)
    return _report(batch, focus, np.asarray(losses, dtype=float))


def evaluate(
    batches: Sequence[LevelBatch], cfg: FocusConfig, focus: Optional[Sequence[LevelFocus]] = None
) -> Evaluation:
    """Loss, reports, per-sample losses and logit gradients in one pass.

    Pass ``focus`` (from :func:`resolve_levels`) to hold the schedule fixed,
    e.g. when finite-differencing the loss.
    """
    if focus is None:
        focus = resolve_levels(batches, cfg)
    n_levels = len(batches)
    n_total = sum(len(b) for b in batches)
    losses = np.zeros(n_total)
    grads = np.zeros(n_total)
    reports = []
    if any(b.index is None for b in batches):
        offsets = np.cumsum([0] + [len(b) for b in batches])
        positions = [np.arange(offsets[i], offsets[i + 1]) for i in range(n_levels)]
    else:
        positions = [b.index for b in batches]
    for batch, lf, pos in zip(batches, focus, positions):
        s = batch.samples
        target = s.target(cfg.loss_kind)
        lv = np.asarray(loss_values(s.prob, target, lf.alpha, lf.gamma, cfg.loss_kind), dtype=float)
        reports.append(_report(batch, lf, lv))
        if len(batch):
            g = loss_grads(s.prob, target, lf.alpha, lf.gamma, cfg.loss_kind)
            losses[pos] = lv
            grads[pos] = g / (n_levels * len(batch))
    total = 0.0
    for r in reports:
        total += r.loss_mean
    total = total / n_levels if n_levels else 0.0
    return Evaluation(total, reports, losses, grads, list(focus))


def total_cls_loss(
    batches: Sequence[LevelBatch], cfg: FocusConfig, focus: Optional[Sequence[LevelFocus]] = None
) -> tuple[float, list[LevelLossReport]]:
    ev = evaluate(batches, cfg, focus)
    return ev.total, ev.reports


def total_cls_grad(
    batches: Sequence[LevelBatch], cfg: FocusConfig, focus: Optional[Sequence[LevelFocus]] = None
) -> np.ndarray:
    """d(total_cls_loss)/d(logit) per sample, aligned with the input order."""
    return evaluate(batches, cfg, focus).grads
