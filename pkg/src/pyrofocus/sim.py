"""Desk-scale multi-level training simulator.

Each pyramid level is a separate linear logistic model over a small feature
space. Per iteration, every level receives ``samples_per_iter`` fresh samples
from two class-conditional Gaussians; a ``hard_fraction`` of them come from a
pair of heavily overlapping Gaussians instead, so they stay hard under any
linear model. Positive rates differ between levels to produce level
discrepancy. Training is plain SGD with momentum on the level-mean
classification loss.

Randomness is keyed on ``(seed, stream tag, iteration)`` so that the data at a
given iteration never depends on the model or on earlier draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata, spearmanr

from .levels import SampleSet, evaluate, split_by_level
from .scheduler import ConfigError, FocusConfig

_TRAIN, _EVAL, _INIT = 0, 1, 2

DRIFT_RATES = (0.02, 0.05, 0.10, 0.20, 0.35)


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"model parameters or logits became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class StreamConfig:
    """Synthetic stream layout. ``samples_per_iter`` is per level."""

    num_levels: int = 5
    positive_rate: tuple = DRIFT_RATES
    hard_fraction: Union[float, tuple] = 0.3
    samples_per_iter: int = 256
    feature_dim: int = 2
    noise_scale: float = 0.5
    seed: int = 0
    separation: float = 3.0
    hard_separation: float = 0.5
    quality_low: float = 0.7
    fixed: bool = False
    identical_levels: bool = False

    def __post_init__(self):
        L = self.num_levels
        if int(L) != L or L < 1:
            raise ConfigError(f"num_levels must be a positive integer, got {L}")
        rates = tuple(float(r) for r in np.atleast_1d(self.positive_rate))
        if len(rates) != L:
            raise ConfigError(f"positive_rate has {len(rates)} entries, expected num_levels={L}")
        if not all(0.0 < r < 1.0 for r in rates):
            raise ConfigError(f"positive_rate entries must lie in (0, 1), got {rates}")
        object.__setattr__(self, "positive_rate", rates)
        hf = np.atleast_1d(np.asarray(self.hard_fraction, dtype=float))
        if hf.size == 1:
            hf = np.repeat(hf, L)
        if hf.size != L:
            raise ConfigError(f"hard_fraction has {hf.size} entries, expected 1 or num_levels={L}")
        if ((hf < 0) | (hf > 1)).any():
            raise ConfigError(f"hard_fraction entries must lie in [0, 1], got {hf.tolist()}")
        object.__setattr__(self, "hard_fraction", tuple(hf.tolist()))
        if self.samples_per_iter < 1:
            raise ConfigError(f"samples_per_iter must be >= 1, got {self.samples_per_iter}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not self.noise_scale > 0:
            raise ConfigError(f"noise_scale must be > 0, got {self.noise_scale}")
        if not 0.0 < self.quality_low <= 1.0:
            raise ConfigError(f"quality_low must lie in (0, 1], got {self.quality_low}")
        if self.identical_levels and (len(set(rates)) > 1 or len(set(hf.tolist())) > 1):
            raise ConfigError("identical_levels needs equal positive_rate and hard_fraction on every level")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def drift_scenario(seed: int = 0, **overrides) -> StreamConfig:
    """Default drift setting: five levels with divergent positive rates."""
    return StreamConfig(seed=seed, **overrides)


def separable_scenario(seed: int = 0, **overrides) -> StreamConfig:
    overrides.setdefault("hard_fraction", 0.0)
    return StreamConfig(seed=seed, **overrides)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    iters: int = 5000
    momentum: float = 0.9
    decay_at: tuple = (2 / 3, 8 / 9)
    decay_factor: float = 0.1
    eval_iters: int = 8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        object.__setattr__(self, "decay_at", tuple(float(f) for f in self.decay_at))

    def lr_at(self, it: int) -> float:
        lr = self.lr
        for frac in self.decay_at:
            if it >= int(round(frac * self.iters)):
                lr *= self.decay_factor
        return lr


@dataclass
class ToyModel:
    """Independent linear logit per level: ``x . weights[l] + bias[l]``."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def initial(cls, cfg: StreamConfig, prior: float = 0.01) -> "ToyModel":
        # Small Gaussian weights and a bias encoding a low positive prior.
        rng = np.random.default_rng([cfg.seed, _INIT])
        rows = 1 if cfg.identical_levels else cfg.num_levels
        weights = rng.normal(0.0, 0.01, size=(rows, cfg.feature_dim))
        weights = np.repeat(weights, cfg.num_levels // rows, axis=0)
        bias = np.full(cfg.num_levels, -math.log((1 - prior) / prior))
        return cls(weights, bias)

    def logits(self, features: np.ndarray, level: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            return np.einsum("ij,ij->i", features, self.weights[level]) + self.bias[level]

    def copy(self) -> "ToyModel":
        return ToyModel(self.weights.copy(), self.bias.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.bias).all())


def draw_stream(cfg: StreamConfig, it: int, tag: int = _TRAIN):
    """Features, labels, quality targets, levels and hard flags for one iteration.

    With ``cfg.identical_levels`` one level's draw is repeated on every level.
    """
    rng = np.random.default_rng([cfg.seed, tag, it])
    L, n, d = cfg.num_levels, cfg.samples_per_iter, cfg.feature_dim
    rows = 1 if cfg.identical_levels else L
    m = rows * n
    drawn_level = np.repeat(np.arange(rows), n)
    rate = np.asarray(cfg.positive_rate)[drawn_level]
    hard_frac = np.asarray(cfg.hard_fraction)[drawn_level]
    label = (rng.random(m) < rate).astype(np.int8)
    hard = rng.random(m) < hard_frac
    sep = np.where(hard, cfg.hard_separation, cfg.separation)
    direction = np.full(d, 1.0 / math.sqrt(d))
    sign = 2.0 * label - 1.0
    features = (sign * sep)[:, None] * direction + cfg.noise_scale * rng.standard_normal((m, d))
    q = rng.uniform(cfg.quality_low, 1.0, size=m)
    quality = np.where(label == 1, q, 0.0)
    if rows == 1 and L > 1:
        features = np.tile(features, (L, 1))
        label, quality, hard = np.tile(label, L), np.tile(quality, L), np.tile(hard, L)
    return features, label, quality, np.repeat(np.arange(L), n), hard


def generate_iteration(cfg: StreamConfig, model: ToyModel, it: int, tag: int = _TRAIN) -> SampleSet:
    """Samples of iteration ``it`` with logits from ``model``.

    Deterministic in ``(cfg.seed, it)``; with ``cfg.fixed`` every iteration
    reuses the draw of iteration 0.
    """
    features, label, quality, level, _ = draw_stream(cfg, 0 if cfg.fixed else it, tag)
    return SampleSet(
        logit=model.logits(features, level),
        label=label,
        level=level,
        quality=quality,
        features=features,
    )


def hard_easy_split(per_sample_losses, t: float) -> tuple[float, float, int]:
    """Split losses at threshold ``t``: hard means ``loss > t``.

    Returns ``(hard_mass, easy_mass, hard_count)``.
    """
    if not t >= 0:
        raise ValueError(f"threshold t must be >= 0, got {t}")
    losses = np.asarray(per_sample_losses, dtype=float)
    hard = losses > t
    return float(losses[hard].sum()), float(losses[~hard].sum()), int(hard.sum())


_LEVEL_FIELDS = (
    "gamma_raw",
    "gamma_ad",
    "alpha",
    "n",
    "n_pos",
    "mean_pos_prob",
    "loss_sum",
    "loss_mean",
    "pos_mass",
    "neg_mass",
    "hard_mass",
)


@dataclass
class TrainingTrace:
    """Per-iteration record of a training run, stored column-wise.

    Per-level arrays have shape ``(iters, num_levels)``; ``total_loss``,
    ``hard_share``, ``hard_grad_share`` and ``lr`` have shape ``(iters,)``.
    ``gamma_raw`` is NaN where a level had no positives. ``losses`` holds the
    per-sample losses of every iteration only when recording was requested.
    """

    num_levels: int
    t: float
    gamma_raw: np.ndarray
    gamma_ad: np.ndarray
    alpha: np.ndarray
    n: np.ndarray
    n_pos: np.ndarray
    mean_pos_prob: np.ndarray
    loss_sum: np.ndarray
    loss_mean: np.ndarray
    pos_mass: np.ndarray
    neg_mass: np.ndarray
    hard_mass: np.ndarray
    total_loss: np.ndarray
    hard_share: np.ndarray
    hard_grad_share: np.ndarray
    lr: np.ndarray
    final_accuracy: np.ndarray = field(default_factory=lambda: np.empty(0))
    final_auc: np.ndarray = field(default_factory=lambda: np.empty(0))
    overall_accuracy: float = math.nan
    model: Optional[ToyModel] = None
    losses: Optional[np.ndarray] = None

    @classmethod
    def allocate(cls, iters: int, num_levels: int, t: float = math.nan) -> "TrainingTrace":
        per_level = {name: np.zeros((iters, num_levels)) for name in _LEVEL_FIELDS}
        for name in ("n", "n_pos"):
            per_level[name] = np.zeros((iters, num_levels), dtype=np.int64)
        return cls(
            num_levels=num_levels,
            t=t,
            total_loss=np.zeros(iters),
            hard_share=np.zeros(iters),
            hard_grad_share=np.zeros(iters),
            lr=np.zeros(iters),
            **per_level,
        )

    def __len__(self) -> int:
        return self.total_loss.size

    @property
    def iters(self) -> int:
        return len(self)

    @property
    def pos_prop(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n > 0, self.n_pos / np.maximum(self.n, 1), 0.0)

    @property
    def level_hard_share(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.loss_sum > 0, self.hard_mass / np.where(self.loss_sum > 0, self.loss_sum, 1.0), 0.0)

    def equals(self, other: "TrainingTrace") -> bool:
        """Bitwise equality of every recorded array and scalar."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name == "model":
                if (a is None) != (b is None):
                    return False
                if a is not None and not (
                    np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
                ):
                    return False
            elif isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or a.shape != b.shape:
                    return False
                if not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                    return False
            elif isinstance(a, float) and math.isnan(a):
                if not (isinstance(b, float) and math.isnan(b)):
                    return False
            elif a != b:
                return False
        return True


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_model(cfg: StreamConfig, model: ToyModel, n_iters: int = 8):
    """Per-level accuracy (threshold 0.5) and AUC on a held-out stream.

    Returns ``(accuracy_per_level, auc_per_level, overall_accuracy)``.
    """
    parts = [generate_iteration(cfg, model, it, tag=_EVAL) for it in range(n_iters)]
    ss = SampleSet.concat(parts)
    correct = (ss.prob > 0.5) == (ss.label == 1)
    acc = np.zeros(cfg.num_levels)
    auc = np.zeros(cfg.num_levels)
    for lv in range(cfg.num_levels):
        m = ss.level == lv
        acc[lv] = correct[m].mean() if m.any() else math.nan
        auc[lv] = _auc(ss.logit[m], ss.label[m])
    overall = float(correct.mean()) if len(ss) else math.nan
    return acc, auc, overall


def train(
    stream: StreamConfig,
    focus: FocusConfig,
    opt: OptimConfig = OptimConfig(),
    t: Optional[float] = None,
    record_losses: bool = False,
) -> TrainingTrace:
    """Run ``opt.iters`` SGD steps on the level-mean loss and record a trace.

    ``t`` is the hard-case loss threshold; by default it is the median
    per-sample loss of iteration 0.
    """
    if focus.num_levels != stream.num_levels:
        raise ConfigError(
            f"num_levels: focus has {focus.num_levels}, stream has {stream.num_levels}"
        )
    L, d = stream.num_levels, stream.feature_dim
    model = ToyModel.initial(stream)
    vel_w = np.zeros_like(model.weights)
    vel_b = np.zeros_like(model.bias)
    trace = TrainingTrace.allocate(opt.iters, L, math.nan if t is None else float(t))
    kept = []

    for it in range(opt.iters):
        lr = opt.lr_at(it)
        samples = generate_iteration(stream, model, it)
        if not np.isfinite(samples.logit).all():
            # Overflowing logits mean the run has already blown up.
            raise DivergenceError(it)
        batches = split_by_level(samples, L)
        ev = evaluate(batches, focus)
        losses, grads = ev.losses, ev.grads
        if it == 0 and t is None:
            trace.t = float(np.median(losses)) if losses.size else 0.0
        if record_losses:
            kept.append(losses.copy())

        hard = losses > trace.t
        lvl = samples.level
        trace.hard_mass[it] = np.bincount(lvl, weights=np.where(hard, losses, 0.0), minlength=L)
        for lv, rep in enumerate(ev.reports):
            snap = rep.snapshot
            trace.gamma_raw[it, lv] = snap.gamma_raw
            trace.gamma_ad[it, lv] = snap.gamma_clamped
            trace.alpha[it, lv] = snap.alpha
            trace.mean_pos_prob[it, lv] = snap.mean_pos_prob
            trace.n[it, lv] = rep.n
            trace.n_pos[it, lv] = rep.n_pos
            trace.loss_sum[it, lv] = rep.loss_sum
            trace.loss_mean[it, lv] = rep.loss_mean
            trace.pos_mass[it, lv] = rep.pos_loss_mass
            trace.neg_mass[it, lv] = rep.neg_loss_mass
        mass = trace.loss_sum[it].sum()
        trace.hard_share[it] = trace.hard_mass[it].sum() / mass if mass > 0 else 0.0
        x = samples.features
        gnorm = np.abs(grads) * np.sqrt(1.0 + np.einsum("ij,ij->i", x, x))
        gtot = gnorm.sum()
        trace.hard_grad_share[it] = gnorm[hard].sum() / gtot if gtot > 0 else 0.0
        trace.total_loss[it] = ev.total
        trace.lr[it] = lr

        grad_b = np.bincount(lvl, weights=grads, minlength=L)
        grad_w = np.stack(
            [np.bincount(lvl, weights=grads * x[:, k], minlength=L) for k in range(d)], axis=1
        )
        vel_w = opt.momentum * vel_w + grad_w
        vel_b = opt.momentum * vel_b + grad_b
        with np.errstate(over="ignore", invalid="ignore"):
            model.weights = model.weights - lr * vel_w
            model.bias = model.bias - lr * vel_b
        if not model.is_finite():
            raise DivergenceError(it)

    if opt.iters == 0 and t is None:
        trace.t = 0.0
    trace.final_accuracy, trace.final_auc, trace.overall_accuracy = evaluate_model(
        stream, model, opt.eval_iters
    )
    trace.model = model
    if record_losses:
        trace.losses = np.array(kept)
    return trace


def drift_curve(trace: TrainingTrace, t: Optional[float] = None) -> np.ndarray:
    """Hard-case share of the loss mass per iteration.

    At the trace's own threshold this is the recorded series. Other
    thresholds need the per-sample losses (``train(..., record_losses=True)``).
    """
    if t is None or t == trace.t:
        return trace.hard_share.copy()
    if trace.losses is None:
        raise ValueError("a threshold other than trace.t needs per-sample losses; train with record_losses=True")
    losses = trace.losses
    mass = losses.sum(axis=1)
    hard_mass = np.where(losses > t, losses, 0.0).sum(axis=1)
    return np.where(mass > 0, hard_mass / np.where(mass > 0, mass, 1.0), 0.0)


def tail_mean(series: Sequence[float], frac: float = 0.1) -> float:
    """Mean over the final ``frac`` of a series (at least one element)."""
    arr = np.asarray(series, dtype=float)
    k = max(1, int(math.ceil(frac * arr.size)))
    return float(arr[-k:].mean())


def gamma_trend(trace: TrainingTrace) -> float:
    """Spearman correlation of the level-averaged ``gamma_raw`` with iteration."""
    g = trace.gamma_raw
    valid = ~np.isnan(g).all(axis=1)
    series = np.nanmean(g[valid], axis=1)
    its = np.flatnonzero(valid)
    if its.size < 2:
        return math.nan
    return float(spearmanr(its, series).correlation)
