from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from dyncomm.core import ConfigurationError
from dyncomm.policy import (
    EpsilonSchedule,
    bernoulli_logp,
    infer_participation,
    sample_participation,
)


def test_symmetric_credits_logp():
    c = np.array([0.5, 0.5, 0.5])
    act = sample_participation(c, 0.0, np.random.default_rng(0))
    assert act.logp == pytest.approx(3 * math.log(0.5), abs=1e-12)


def test_near_deterministic_policy():
    delta = 1e-4
    c = np.full(4, 1.0 - delta)
    ones = 0
    n = 20_000
    rng = np.random.default_rng(1)
    for _ in range(n):
        act = sample_participation(c, 0.0, rng)
        if act.a.all():
            ones += 1
            assert act.logp == pytest.approx(4 * math.log(1 - delta), abs=1e-12)
    assert ones / n > (1 - delta) ** 4 - 0.01


def test_epsilon_one_complements_draw():
    # With eps = 1 every entry is flipped: P(a_1 = 1) becomes 1 - c_1.
    c = np.array([0.9, 0.1])
    rng = np.random.default_rng(2)
    n = 100_000
    count_a0 = 0
    for _ in range(n):
        act = sample_participation(c, 1.0, rng)
        count_a0 += act.a[0] == 1
        expected = bernoulli_logp(c, act.a)
        assert act.logp == expected
    assert abs(count_a0 / n - 0.1) < 0.01


def test_logp_is_post_flip_executed_action():
    c = np.array([0.8, 0.2, 0.6])
    rng = np.random.default_rng(3)
    for _ in range(1000):
        act = sample_participation(c, 0.3, rng)
        probs = np.where(act.a == 1, c, 1 - c)
        assert act.logp == float(np.sum(np.log(probs)))
        assert math.exp(act.logp) == pytest.approx(float(np.prod(probs)), rel=1e-12)


def test_action_vector_frequencies_match_pmf():
    # All 2^3 participation vectors within 3 standard errors of the product pmf.
    c = np.array([0.2, 0.5, 0.8])
    n = 100_000
    rng = np.random.default_rng(4)
    counts = {bits: 0 for bits in itertools.product((0, 1), repeat=3)}
    for _ in range(n):
        act = sample_participation(c, 0.0, rng)
        counts[tuple(int(v) for v in act.a)] += 1
    for bits, count in counts.items():
        p = float(np.prod([c[i] if b else 1 - c[i] for i, b in enumerate(bits)]))
        se = math.sqrt(p * (1 - p) / n)
        assert abs(count / n - p) <= 3 * se, (bits, count / n, p)


def test_sample_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        sample_participation(np.array([0.5]), 1.5, rng)
    with pytest.raises(ConfigurationError):
        sample_participation(np.array([0.0, 0.5]), 0.0, rng)  # unclamped credit
    with pytest.raises(ConfigurationError):
        sample_participation(np.array([]), 0.0, rng)


def test_infer_strict_mean_threshold():
    a = infer_participation(np.array([0.9, 0.1, 0.5]))
    assert a.tolist() == [1, 0, 0]


def test_infer_two_above_mean():
    a = infer_participation(np.array([0.8, 0.7, 0.1, 0.1]))
    assert a.tolist() == [1, 1, 0, 0]


def test_infer_all_equal_falls_back_to_top1():
    a = infer_participation(np.array([0.5, 0.5, 0.5]))
    assert a.tolist() == [1, 0, 0]


def test_infer_fallback_fires_iff_all_equal():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        c = rng.uniform(0.1, 0.9, size=int(rng.integers(2, 8)))
        a = infer_participation(c)
        if np.all(c == c[0]):
            assert a.sum() == 1
        else:
            assert np.array_equal(a, (c > c.mean()).astype(np.int8))
            assert a.sum() >= 1


def test_infer_invariant_under_positive_affine_transform():
    rng = np.random.default_rng(6)
    for _ in range(500):
        c = rng.uniform(0.05, 0.95, size=6)
        alpha = float(rng.uniform(0.1, 3.0))
        beta = float(rng.uniform(-0.5, 0.5))
        assert np.array_equal(infer_participation(c), infer_participation(alpha * c + beta))


def test_epsilon_schedule_linear_decay():
    sched = EpsilonSchedule(start=0.1, end=0.01, decay_iterations=100)
    assert sched.value(0) == 0.1
    assert sched.value(50) == pytest.approx(0.055)
    assert sched.value(100) == 0.01
    assert sched.value(500) == 0.01
    with pytest.raises(ConfigurationError):
        EpsilonSchedule(start=0.01, end=0.1)
