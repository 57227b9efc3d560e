import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from segreward.grpo import (
    GroupTooSmall,
    GrpoConfig,
    categorical_kl,
    group_advantages,
    grpo_objective,
    kl_estimate,
    regularized_objective,
)
from segreward.rewards import LengthMismatch

RAW = GrpoConfig(normalize_by_std=False)


def test_advantage_examples():
    assert group_advantages([1, 0, 1, 0], RAW).values.tolist() == [0.5, -0.5, 0.5, -0.5]
    assert group_advantages([2, 2, 2], RAW).values.tolist() == [0, 0, 0]
    assert group_advantages([2, 2, 2]).values.tolist() == [0, 0, 0]
    a = group_advantages([3, 1]).values
    # population std of {3, 1} is 1
    assert a[0] == pytest.approx(1 / (1 + 1e-8), abs=1e-12)
    assert a[1] == pytest.approx(-1 / (1 + 1e-8), abs=1e-12)


def test_group_too_small():
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])


def test_config_validation():
    for bad in (dict(group_size=1), dict(epsilon=0), dict(kl_beta=-1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)
    cfg = GrpoConfig()
    assert (cfg.group_size, cfg.batch_size, cfg.kl_beta, cfg.normalize_by_std) == (8, 16, 0.0, True)


def test_objective_examples():
    assert grpo_objective([0, 0], [-1, -3]) == 0
    assert grpo_objective([1, -1], [-1, -2]) == 0.5
    with pytest.raises(LengthMismatch):
        grpo_objective([1], [-1, -2])


def test_kl_examples():
    assert kl_estimate([-1.0, -2.0], [-1.0, -2.0]) == 0.0
    assert kl_estimate([0.0], [math.log(2)]) == pytest.approx(2 - math.log(2) - 1, abs=1e-12)
    with pytest.raises(LengthMismatch):
        kl_estimate([0.0], [0.0, 0.0])


def test_regularized_examples():
    assert regularized_objective(0.5, 0.3, 0) == 0.5
    assert regularized_objective(0.5, 0.3, 1) == pytest.approx(0.2, abs=1e-12)
    assert regularized_objective(0.5, 0.3, 10) == pytest.approx(-2.5, abs=1e-12)


def test_categorical_kl():
    p = np.array([0.5, 0.5])
    q = np.array([0.25, 0.75])
    assert categorical_kl(p, p) == 0.0
    assert categorical_kl(p, q) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)


rewards = st.lists(st.floats(-10, 10), min_size=2, max_size=16)


@given(rewards, st.booleans())
def test_zero_sum(r, norm):
    assert abs(group_advantages(r, GrpoConfig(normalize_by_std=norm)).values.sum()) <= 1e-9


@given(rewards, st.floats(-50, 50), st.booleans())
def test_shift_invariance(r, c, norm):
    cfg = GrpoConfig(normalize_by_std=norm)
    a = group_advantages(r, cfg).values
    b = group_advantages([x + c for x in r], cfg).values
    assert np.allclose(a, b, atol=1e-6)
    lp = -np.arange(1, len(r) + 1, dtype=float)
    assert grpo_objective(a, lp) == pytest.approx(grpo_objective(b, lp), abs=1e-5)


@given(rewards, st.floats(0.1, 10))
def test_scale_behaviour(r, c):
    scaled = [x * c for x in r]
    raw = group_advantages(r, RAW).values
    assert np.allclose(group_advantages(scaled, RAW).values, c * raw, atol=1e-9)
    a = group_advantages(r).values
    b = group_advantages(scaled).values
    if np.std(r) > 1e-3:
        assert np.allclose(a, b, atol=1e-6)


@given(st.lists(st.floats(-20, 0), min_size=1, max_size=20))
def test_kl_zero_on_identical(lp):
    assert kl_estimate(lp, lp) == 0.0


@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(-20, 0)), min_size=1, max_size=20))
def test_kl_estimate_non_negative(pairs):
    a, b = zip(*pairs)
    assert kl_estimate(a, b) >= 0.0
