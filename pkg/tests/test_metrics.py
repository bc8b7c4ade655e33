import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_bma_lab.metrics import (
    entropy,
    kl,
    summarize_finite,
    tv,
    tv_kl_lemma_check,
)


def test_tv_identical():
    p = [0.2, 0.3, 0.5]
    assert tv(p, p) == 0.0


def test_tv_disjoint_point_masses():
    assert tv([1.0, 0.0], [0.0, 1.0]) == 1.0


def test_tv_hand_value():
    assert tv([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.25, abs=1e-15)


def test_tv_support_mismatch():
    with pytest.raises(ValueError):
        tv([0.5, 0.5], [0.2, 0.3, 0.5])


def test_kl_identical():
    assert kl([0.3, 0.7], [0.3, 0.7]) == 0.0


def test_kl_hand_value():
    expected = 0.5 * math.log(2) + 0.5 * math.log(2.0 / 3.0)
    assert kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.14384, abs=1e-5)


def test_kl_infinite_flag():
    assert kl([1.0, 0.0], [0.0, 1.0]) == math.inf


def test_entropy_uniform():
    assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)


def test_entropy_point_mass():
    assert entropy([0.0, 1.0, 0.0]) == 0.0


def test_entropy_hand_value():
    assert entropy([0.9, 0.1]) == pytest.approx(0.325083, abs=1e-6)


def _random_dist(rng, k):
    return rng.dirichlet(np.ones(k))


def test_tv_symmetry_and_triangle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 10))
        p, q, r = (_random_dist(rng, k) for _ in range(3))
        assert tv(p, q) == pytest.approx(tv(q, p), abs=1e-12)
        assert tv(p, r) <= tv(p, q) + tv(q, r) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=12),
       st.lists(st.floats(0.01, 10.0), min_size=2, max_size=12))
def test_kl_nonnegative_zero_iff_equal(wp, wq):
    k = min(len(wp), len(wq))
    p = np.array(wp[:k]) / sum(wp[:k])
    q = np.array(wq[:k]) / sum(wq[:k])
    d = kl(p, q)
    assert d >= -1e-12
    if tv(p, q) > 1e-9:
        assert d > 0


def test_tv_kl_lemma_identical():
    rep = tv_kl_lemma_check([0.4, 0.6], [0.4, 0.6])
    assert rep.tv == 0.0 and rep.kl == 0.0 and rep.holds


def test_tv_kl_lemma_random_sweep():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        k = int(rng.integers(2, 17))
        p = _random_dist(rng, k)
        q = _random_dist(rng, k) + 1e-9
        q /= q.sum()
        rep = tv_kl_lemma_check(p, q)
        assert rep.holds


def test_pinsker_hand_value():
    rep = tv_kl_lemma_check([0.5, 0.5], [0.25, 0.75])
    assert rep.tv == pytest.approx(0.25, abs=1e-12)
    assert rep.pinsker_bound == pytest.approx(math.sqrt(0.14384 / 2), abs=1e-4)
    assert rep.tv <= rep.pinsker_bound


def test_tv_kl_lemma_requires_positive_q():
    with pytest.raises(ValueError):
        tv_kl_lemma_check([0.5, 0.5], [1.0, 0.0])


def test_summarize_finite_skips_and_counts():
    out = summarize_finite([1.0, 2.0, math.inf, 3.0])
    assert out["mean"] == pytest.approx(2.0)
    assert out["n_flagged"] == 1
    assert out["n_finite"] == 3


def test_summarize_all_flagged():
    out = summarize_finite([math.inf, math.inf])
    assert math.isnan(out["mean"]) and out["n_flagged"] == 2


def test_distribution_validation():
    with pytest.raises(ValueError):
        tv([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        tv([-0.1, 1.1], [0.5, 0.5])
