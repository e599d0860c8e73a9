"""
Focal-family classification losses and their gradients with respect to the logit.

Every loss here is a function of a sigmoid probability ``p`` and a target, with
a pair of focusing parameters ``(alpha, gamma)``:

* ``fl`` / ``hpf``: ``-alpha (1-p)^gamma log p`` for positives and
  ``-(1-alpha) p^gamma log(1-p)`` for negatives. ``hpf`` is the same form but
  is fed parameters produced by the focus scheduler.
* ``pfqfl``: ``-|q-p|^gamma ((1-alpha)(1-q) log(1-p) + alpha q log p)``.
* ``pfvfl``: ``-q (q log p + (1-q) log(1-p))`` for ``q > 0`` and
  ``-alpha p^gamma log(1-p)`` for ``q = 0``.

Plain QFL / VFL are the ``pfqfl`` / ``pfvfl`` forms with static parameters.

The array helpers (``loss_values`` / ``loss_grads``) broadcast over numpy
arrays, including per-sample ``alpha`` and ``gamma``; the scalar functions are
thin checked wrappers around them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

import numpy as np
from scipy.special import expit
from scipy.special import logit as _logit

PROB_FLOOR = 1e-9


class DomainError(ValueError):
    """An input lies outside the domain of a loss or schedule function."""


class LossKind(str, Enum):
    FL = "fl"
    HPF = "hpf"
    PF_QFL = "pfqfl"
    PF_VFL = "pfvfl"

    @property
    def uses_quality(self) -> bool:
        return self in (LossKind.PF_QFL, LossKind.PF_VFL)

    @property
    def adaptive(self) -> bool:
        """Whether the loss takes its parameters from the focus scheduler."""
        return self is not LossKind.FL


@dataclass(frozen=True)
class HardLabel:
    y: int

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DomainError(f"hard label must be 0 or 1, got {self.y!r}")

    @property
    def positive(self) -> bool:
        return self.y == 1

    @property
    def value(self) -> float:
        return float(self.y)


@dataclass(frozen=True)
class Quality:
    q: float

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise DomainError(f"quality target must lie in [0, 1], got {self.q!r}")

    @property
    def positive(self) -> bool:
        return self.q > 0

    @property
    def value(self) -> float:
        return float(self.q)


Target = Union[HardLabel, Quality]


@dataclass(frozen=True)
class FocusParams:
    alpha: float
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not self.gamma >= 0.0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma!r}")


@dataclass(frozen=True)
class Sample:
    """One classification candidate: logit, target and pyramid level.

    ``prob`` is the cached sigmoid of ``logit``. Use :meth:`from_prob` to build
    a sample from a probability directly (including the limits 0 and 1).
    """

    logit: float
    target: Target
    level: int = 0
    prob: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "prob", float(expit(self.logit)))
        if self.level < 0:
            raise DomainError(f"level must be non-negative, got {self.level}")

    @classmethod
    def from_prob(cls, prob: float, target: Target, level: int = 0) -> "Sample":
        _check_prob(prob)
        sample = cls(float(_logit(prob)), target, level)
        object.__setattr__(sample, "prob", float(prob))
        return sample

    @property
    def positive(self) -> bool:
        return self.target.positive


def sigmoid(z):
    return expit(z)


def clamp_prob(p):
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def _check_prob(p):
    arr = np.asarray(p, dtype=float)
    if np.isnan(arr).any() or (arr < 0).any() or (arr > 1).any():
        raise DomainError(f"probability must lie in [0, 1], got {p!r}")


def _check_quality(q):
    arr = np.asarray(q, dtype=float)
    if np.isnan(arr).any() or (arr < 0).any() or (arr > 1).any():
        raise DomainError(f"quality target must lie in [0, 1], got {q!r}")


def _check_label(y):
    arr = np.asarray(y)
    if not np.isin(arr, (0, 1)).all():
        raise DomainError(f"hard label must be 0 or 1, got {y!r}")


# Unchecked array kernels. ``p`` must already be clamped.


def _focal(p, y, alpha, gamma):
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log1p(-p)
    return np.where(y == 1, pos, neg)


def _focal_grad(p, y, alpha, gamma):
    pos = alpha * (1.0 - p) ** gamma * (gamma * p * np.log(p) - (1.0 - p))
    neg = (1.0 - alpha) * p**gamma * (p - gamma * (1.0 - p) * np.log1p(-p))
    return np.where(y == 1, pos, neg)


def _qfl(p, q, alpha, gamma):
    ce = (1.0 - alpha) * (1.0 - q) * np.log1p(-p) + alpha * q * np.log(p)
    return -np.abs(q - p) ** gamma * ce


def _qfl_grad(p, q, alpha, gamma):
    d = p - q
    ad = np.abs(d)
    ce = (1.0 - alpha) * (1.0 - q) * np.log1p(-p) + alpha * q * np.log(p)
    dce = alpha * q * (1.0 - p) - (1.0 - alpha) * (1.0 - q) * p
    # |d|^(gamma-1) blows up at d == 0 for gamma < 1; the modulator term is
    # defined as 0 there (the loss sits at its minimum).
    with np.errstate(divide="ignore", invalid="ignore"):
        dmod = gamma * ad ** (gamma - 1.0) * np.sign(d) * p * (1.0 - p)
    dmod = np.where(ad == 0, 0.0, dmod)
    return -(dmod * ce + ad**gamma * dce)


def _vfl(p, q, alpha, gamma):
    pos = -q * (q * np.log(p) + (1.0 - q) * np.log1p(-p))
    neg = -alpha * p**gamma * np.log1p(-p)
    return np.where(q > 0, pos, neg)


def _vfl_grad(p, q, alpha, gamma):
    pos = q * (p - q)
    neg = alpha * p**gamma * (p - gamma * (1.0 - p) * np.log1p(-p))
    return np.where(q > 0, pos, neg)


_KERNELS = {
    LossKind.FL: (_focal, _focal_grad),
    LossKind.HPF: (_focal, _focal_grad),
    LossKind.PF_QFL: (_qfl, _qfl_grad),
    LossKind.PF_VFL: (_vfl, _vfl_grad),
}


def loss_values(prob, target, alpha, gamma, kind: LossKind):
    """Per-sample loss for arrays of probabilities and targets.

    ``target`` is a 0/1 label array for ``fl``/``hpf`` and a quality array for
    ``pfqfl``/``pfvfl``. ``alpha``/``gamma`` may be scalars or per-sample
    arrays. Probabilities are clamped to ``[PROB_FLOOR, 1 - PROB_FLOOR]``.
    """
    fn, _ = _KERNELS[LossKind(kind)]
    return fn(clamp_prob(prob), target, alpha, gamma)


def loss_grads(prob, target, alpha, gamma, kind: LossKind):
    """Per-sample d(loss)/d(logit); ``alpha``/``gamma`` are held constant."""
    _, fn = _KERNELS[LossKind(kind)]
    return fn(clamp_prob(prob), target, alpha, gamma)


def focal_loss(prob: float, y: int, params: FocusParams) -> float:
    _check_prob(prob)
    _check_label(y)
    return float(_focal(clamp_prob(prob), y, params.alpha, params.gamma))


def hpf_loss(prob: float, y: int, params: FocusParams) -> float:
    """Focal loss evaluated with scheduler-produced ``(alpha_ad, gamma_ad)``."""
    _check_prob(prob)
    _check_label(y)
    return float(_focal(clamp_prob(prob), y, params.alpha, params.gamma))


def pf_qfl(prob: float, q: float, params: FocusParams) -> float:
    _check_prob(prob)
    _check_quality(q)
    return float(_qfl(clamp_prob(prob), q, params.alpha, params.gamma))


def pf_vfl(prob: float, q: float, params: FocusParams) -> float:
    _check_prob(prob)
    _check_quality(q)
    return float(_vfl(clamp_prob(prob), q, params.alpha, params.gamma))


def target_value(target: Target, kind: LossKind) -> float:
    """Numeric target for ``kind``: the hard label, or the quality score.

    A quality target maps to the hard label ``q > 0`` for the focal kinds, and
    a hard label is a degenerate quality score for the quality kinds.
    """
    if LossKind(kind).uses_quality:
        return target.value
    return 1.0 if target.positive else 0.0


def loss_grad_logit(sample: Sample, params: FocusParams, kind: LossKind) -> float:
    """Analytic d(loss)/d(logit) of one sample under ``kind``."""
    try:
        kind = LossKind(kind)
    except ValueError:
        raise DomainError(f"unsupported loss kind {kind!r}") from None
    if math.isnan(sample.prob):
        raise DomainError("sample probability is NaN")
    t = target_value(sample.target, kind)
    return float(loss_grads(sample.prob, t, params.alpha, params.gamma, kind))


def sample_loss(sample: Sample, params: FocusParams, kind: LossKind) -> float:
    kind = LossKind(kind)
    t = target_value(sample.target, kind)
    return float(loss_values(sample.prob, t, params.alpha, params.gamma, kind))
