from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lkda.autodiff import ContractError
from lkda.metrics import (DistributionError, EvalRecord, accuracy, consistency_clk, delta_acc,
                          fidelity_fkg, jsd, report, sparsity)


def oracle_jsd(p, q, lam):
    """Direct two-KL computation written independently of the library."""
    total = 0.0
    for i in range(len(p)):
        m = lam * p[i] + (1 - lam) * q[i]
        if p[i] > 0:
            total += lam * p[i] * math.log(p[i] / m)
        if q[i] > 0:
            total += (1 - lam) * q[i] * math.log(q[i] / m)
    return total


def _dist(rng, n, sparse=False):
    x = rng.random(n)
    if sparse:
        x[rng.random(n) < 0.3] = 0.0
        if x.sum() == 0:
            x[0] = 1.0
    return x / x.sum()


def _rec(gold, full, det):
    return EvalRecord(gold, np.asarray(full, float), np.asarray(det, float))


def test_jsd_matches_oracle_on_1000_pairs():
    rng = np.random.default_rng(0)
    for i in range(1000):
        n = int(rng.integers(2, 7))
        p, q = _dist(rng, n, sparse=i % 3 == 0), _dist(rng, n, sparse=i % 5 == 0)
        lam = float(rng.uniform(0.05, 0.95)) if i % 2 else 0.5
        assert abs(jsd(p, q, lam) - oracle_jsd(p, q, lam)) < 1e-10


def test_jsd_examples():
    assert jsd([1.0, 0.0], [0.0, 1.0], 0.5) == pytest.approx(math.log(2), abs=1e-12)
    p = np.array([0.2, 0.5, 0.3])
    assert jsd(p, p, 0.5) == 0.0
    # 0.5*(0.7 ln(0.7/0.6) + 0.3 ln(0.3/0.4)) + 0.5*(0.5 ln(0.5/0.6) + 0.5 ln(0.5/0.4))
    assert jsd([0.7, 0.3], [0.5, 0.5], 0.5) == pytest.approx(0.021005925701837062, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_jsd_symmetric_and_bounded(n, seed):
    rng = np.random.default_rng(seed)
    p, q = _dist(rng, n, sparse=True), _dist(rng, n, sparse=True)
    a, b = jsd(p, q, 0.5), jsd(q, p, 0.5)
    assert a == b
    assert 0.0 <= a <= math.log(2) + 1e-15


def test_jsd_rejects_bad_inputs():
    with pytest.raises(DistributionError):
        jsd([0.5, 0.5], [1.0, 0.0, 0.0])
    with pytest.raises(DistributionError):
        jsd([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(DistributionError):
        jsd([0.5, 0.5], [0.5, 0.5], lam=1.0)


def test_fidelity_examples():
    one = [1.0, 0.0]
    two = [0.0, 1.0]
    assert fidelity_fkg([_rec(0, one, one)] * 3) == 1.0
    assert fidelity_fkg([_rec(0, one, two)] * 3) == 0.0
    recs = [_rec(0, one, one), _rec(1, two, two), _rec(0, one, one), _rec(0, one, two)]
    assert fidelity_fkg(recs) == 0.75
    with pytest.raises(ContractError):
        fidelity_fkg([])


def test_fidelity_invariant_to_monotone_rescaling():
    rng = np.random.default_rng(1)
    recs, rescaled = [], []
    for _ in range(50):
        s1, s2 = rng.normal(size=4), rng.normal(size=4)
        p = lambda s, t=1.0: np.exp(s / t) / np.exp(s / t).sum()
        recs.append(_rec(0, p(s1), p(s2)))
        rescaled.append(_rec(0, p(3 * s1 + 1, 0.5), p(2 * s2 - 4, 2.0)))
    assert fidelity_fkg(recs) == fidelity_fkg(rescaled)


def test_consistency_examples():
    rng = np.random.default_rng(2)
    same = [_rec(0, p, p) for p in (_dist(rng, 4) for _ in range(5))]
    assert consistency_clk(same) == 0.0
    disjoint = [_rec(0, [1, 0, 0, 0], [0, 0, 1, 0])] * 4
    assert consistency_clk(disjoint) == pytest.approx(math.log(2), abs=1e-12)
    mixed = [_rec(0, _dist(rng, 4), _dist(rng, 4)) for _ in range(20)]
    expect = np.mean([oracle_jsd(r.full, r.detached, 0.5) for r in mixed])
    assert consistency_clk(mixed) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ContractError):
        consistency_clk([])


def test_sparsity_and_delta():
    assert sparsity(0, 12) == 0.0
    assert sparsity(12, 12) == 1.0
    assert sparsity(3, 12) == 0.25
    with pytest.raises(ContractError):
        sparsity(13, 12)
    assert delta_acc(0.8, 0.8) == 0.0
    assert delta_acc(0.8, 0.5) == pytest.approx(0.3)
    assert delta_acc(0.5, 0.8) == pytest.approx(-0.3)


def test_report_fields_and_json():
    recs = [_rec(0, [0.6, 0.4], [0.3, 0.7]), _rec(1, [0.2, 0.8], [0.1, 0.9])]
    rep = report(recs)
    assert rep.N == 2 and rep.accuracy_full == 1.0 and rep.accuracy_detached == 0.5
    assert rep.f_kg == 0.5
    assert '"f_kg": 0.5' in rep.to_json()
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)


def test_metrics_pure():
    rng = np.random.default_rng(3)
    recs = [_rec(1, _dist(rng, 4), _dist(rng, 4)) for _ in range(10)]
    assert report(recs) == report(recs)
