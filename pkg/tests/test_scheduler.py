import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyrofocus import (
    ConfigError,
    DomainError,
    FocusConfig,
    HardLabel,
    LossKind,
    Quality,
    Sample,
    SampleSet,
    SamplingMode,
    alpha_from_gamma,
    clamp_gamma,
    gamma_raw,
    resolve_focus,
)
from pyrofocus.scheduler import per_sample_gamma, snapshot_from_probs

CFG = FocusConfig()


def test_gamma_raw_examples():
    assert gamma_raw([1.0, 1.0, 1.0]) == 0.0
    assert abs(gamma_raw([math.exp(-2)]) - 2.0) <= 1e-12
    assert abs(gamma_raw([0.2, 0.8]) - math.log(2)) <= 1e-12


def test_gamma_raw_errors():
    with pytest.raises(ValueError):
        gamma_raw([])
    with pytest.raises(DomainError):
        gamma_raw([0.0, 0.5])
    with pytest.raises(DomainError):
        gamma_raw([1.5])


def test_clamp_examples():
    assert clamp_gamma(2.0, CFG) == 2.0
    assert clamp_gamma(0.0, CFG) == 1.5
    assert clamp_gamma(5.3, CFG) == 2.5


def test_alpha_examples():
    assert alpha_from_gamma(2.0, CFG) == 0.25
    assert abs(alpha_from_gamma(2.5, CFG) - 0.2) <= 1e-12
    assert abs(alpha_from_gamma(1.5, CFG) - 1 / 3) <= 1e-12
    with pytest.raises(DomainError):
        alpha_from_gamma(0.0, CFG)


def test_default_coupling_recovers_static_alpha():
    # w = alpha * gamma at the defaults, so the unclamped centre gives alpha back.
    assert CFG.w == CFG.alpha_base * CFG.gamma_base
    assert alpha_from_gamma(CFG.gamma_base, CFG) == CFG.alpha_base


def test_resolve_focus_examples():
    pos = [Sample.from_prob(1.0 - 1e-16, HardLabel(1)) for _ in range(4)]
    snap = resolve_focus(pos, CFG)
    assert snap.gamma_raw == pytest.approx(0.0, abs=1e-9)
    assert snap.gamma_clamped == 1.5 and abs(snap.alpha - 1 / 3) <= 1e-12

    neg = [Sample(-3.0, HardLabel(0)), Sample(1.0, HardLabel(0))]
    snap = resolve_focus(neg, CFG, scope=3)
    assert snap.fallback and snap.n_pos == 0 and snap.level == 3
    assert snap.gamma_clamped == 2.0 and snap.alpha == 0.25
    assert math.isnan(snap.gamma_raw)

    snap = resolve_focus([Sample.from_prob(math.exp(-2), HardLabel(1))] + neg, CFG)
    assert abs(snap.gamma_clamped - 2.0) <= 1e-12 and abs(snap.alpha - 0.25) <= 1e-12
    assert snap.n_pos == 1


def test_quality_targets_count_as_positive():
    ss = [Sample.from_prob(0.2, Quality(0.9)), Sample.from_prob(0.8, Quality(0.3)), Sample.from_prob(0.9, Quality(0.0))]
    snap = resolve_focus(ss, FocusConfig(loss_kind=LossKind.PF_QFL))
    assert snap.n_pos == 2
    assert abs(snap.gamma_raw - math.log(2)) <= 1e-12


def test_resolve_focus_accepts_sample_set():
    ss = SampleSet(logit=[0.0, 2.0, -1.0], label=[1, 1, 0], level=[0, 0, 0])
    snap = resolve_focus(ss, CFG)
    expect = -math.log((0.5 + 1 / (1 + math.exp(-2.0))) / 2)
    assert snap.gamma_raw == pytest.approx(expect, abs=1e-12)


def test_per_sample_gamma():
    p = np.array([math.exp(-1.7), 1.0, 1e-6])
    np.testing.assert_allclose(per_sample_gamma(p, CFG), [1.7, 1.5, 2.5], atol=1e-12)


@pytest.mark.parametrize(
    "kwargs,field",
    [
        ({"alpha_base": 1.2}, "alpha_base"),
        ({"gamma_base": 0.0}, "gamma_base"),
        ({"w": -1.0}, "w"),
        ({"delta": -0.1}, "delta"),
        ({"delta": 2.0}, "delta"),
        ({"w": 2.0}, "w"),
        ({"num_levels": 0}, "num_levels"),
        ({"sampling_mode": "random"}, "sampling_mode"),
        ({"loss_kind": "bce"}, "loss_kind"),
    ],
)
def test_config_validation_names_field(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        FocusConfig(**kwargs)


def test_config_accepts_strings():
    cfg = FocusConfig(sampling_mode="all-level", loss_kind="pfvfl")
    assert cfg.sampling_mode is SamplingMode.ALL_LEVEL and cfg.loss_kind is LossKind.PF_VFL


prob_lists = st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=1, max_size=40)


@settings(max_examples=300, deadline=None)
@given(probs=prob_lists, seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(probs, seed):
    perm = np.random.default_rng(seed).permutation(len(probs))
    assert gamma_raw(probs) == gamma_raw([probs[i] for i in perm])


@settings(max_examples=300, deadline=None)
@given(a=prob_lists, b=prob_lists)
def test_gamma_raw_strictly_decreasing_in_mean(a, b):
    ma, mb = math.fsum(a) / len(a), math.fsum(b) / len(b)
    if ma < mb:
        assert gamma_raw(a) > gamma_raw(b)


@settings(max_examples=300, deadline=None)
@given(
    probs=prob_lists,
    gamma=st.floats(0.5, 4.0),
    delta=st.floats(0.0, 0.45),
)
def test_clamp_and_alpha_ranges(probs, gamma, delta):
    w = 0.2 * (gamma - delta)
    cfg = FocusConfig(gamma_base=gamma, delta=delta, w=w)
    snap = snapshot_from_probs(probs, cfg)
    assert gamma - delta <= snap.gamma_clamped <= gamma + delta
    assert w / (gamma + delta) - 1e-15 <= snap.alpha <= w / (gamma - delta) + 1e-15


@settings(max_examples=200, deadline=None)
@given(g1=st.floats(0.0, 6.0), g2=st.floats(0.0, 6.0))
def test_alpha_gamma_negative_coupling(g1, g2):
    a1 = alpha_from_gamma(clamp_gamma(g1, CFG), CFG)
    a2 = alpha_from_gamma(clamp_gamma(g2, CFG), CFG)
    c1, c2 = clamp_gamma(g1, CFG), clamp_gamma(g2, CFG)
    if c1 < c2:
        assert a1 > a2
    elif c1 == c2:
        assert a1 == a2
