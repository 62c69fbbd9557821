from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qempo.closed_form import (Method, MethodParams, center, implied_reward, optimal_policy,
                               qempo_kl_optimal, qempo_optimal, rlhf_optimal, tempered_entropy,
                               tempered_entropy_derivative, tempered_softmax)
from qempo.core import AlignmentInstance, entropy, kl_divergence
from qempo.errors import InvalidArgument, SupportMismatch
from qempo.oracle import finite_diff_gradient


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def inst_of(r, q=None):
    return AlignmentInstance.from_arrays("t", r, q)


def test_method_params_validation_and_inverse_forms():
    with pytest.raises(InvalidArgument):
        MethodParams.rlhf(0.0)
    with pytest.raises(InvalidArgument):
        MethodParams.qempo(math.inf)
    p = MethodParams.qempo_inverse(4e-3)
    assert p.lam == pytest.approx(250.0)
    p = MethodParams.qempo_kl_inverse(4e-3, 1e-2)
    assert p.lam1 == pytest.approx(250.0) and p.lam2 == pytest.approx(2.5)
    assert MethodParams.rlhf(1e-2).as_dict() == {"beta": 1e-2}


def test_rlhf_examples():
    res = rlhf_optimal(inst_of([1, 0, 0]), 1.0)
    w = np.array([math.e, 1, 1])
    np.testing.assert_allclose(res.dist.probs, w / w.sum(), rtol=1e-14)
    np.testing.assert_allclose(res.dist.probs, [0.5761, 0.2119, 0.2119], atol=1e-4)
    q = [0.2, 0.3, 0.5]
    np.testing.assert_allclose(rlhf_optimal(inst_of([2, 2, 2], q), 0.7).dist.probs, q, rtol=1e-14)
    res = rlhf_optimal(inst_of([1, 0, 0.5], q), 1e-2)
    assert np.all(np.isfinite(res.dist.probs)) and res.dist.probs[0] == pytest.approx(1.0)


def test_rlhf_reports_consistent_measurements():
    inst = inst_of([1.0, -0.5, 0.25], [0.5, 0.3, 0.2])
    res = rlhf_optimal(inst, 0.8)
    assert res.entropy == pytest.approx(entropy(res.dist))
    assert res.kl_to_ref == pytest.approx(kl_divergence(res.dist, inst.ref_probs))
    assert res.expected_reward == pytest.approx(float(res.dist.probs @ inst.rewards))
    ref_term = np.sum(inst.ref_probs * np.exp(inst.rewards / 0.8))
    assert res.log_partition == pytest.approx(math.log(ref_term))


def test_qempo_examples():
    np.testing.assert_allclose(qempo_optimal(inst_of([1, 0]), 1.0).dist.probs,
                               [sig(1), sig(-1)], rtol=1e-14)
    np.testing.assert_allclose(qempo_optimal(inst_of([3, 3, 3], [0.1, 0.1, 0.8]), 5.0).dist.probs,
                               [1 / 3] * 3, rtol=1e-14)
    a = qempo_optimal(inst_of([1, 0, 2], [0.1, 0.1, 0.8]), 0.7).dist.probs
    b = qempo_optimal(inst_of([1, 0, 2], [0.6, 0.2, 0.2]), 0.7).dist.probs
    np.testing.assert_array_equal(a, b)


def test_qempo_kl_examples():
    res = qempo_kl_optimal(inst_of([0, 0], [0.9, 0.1]), 1.0, 1.0)
    w = np.sqrt([0.9, 0.1])
    np.testing.assert_allclose(w, [0.9487, 0.3162], atol=1e-4)
    np.testing.assert_allclose(res.dist.probs, w / w.sum(), rtol=1e-14)
    np.testing.assert_allclose(res.dist.probs, [0.75, 0.25], atol=1e-12)
    # square-root amplification of a smaller reference mass
    assert math.sqrt(0.9) / 0.9 == pytest.approx(1.05, abs=5e-3)
    assert math.sqrt(0.3) / 0.3 == pytest.approx(1.83, abs=5e-3)
    q = [0.6, 0.3, 0.1]
    np.testing.assert_allclose(qempo_kl_optimal(inst_of([1, 1, 1], q), 1.0, 1e8).dist.probs, q,
                               atol=1e-7)
    res = optimal_policy(inst_of([1, 0, 0.5], q), MethodParams.qempo_kl_inverse(4e-3, 1e-2))
    assert np.all(np.isfinite(res.dist.probs))


def test_zero_reference_entries_are_excluded():
    inst = inst_of([1.0, 5.0, 0.0], [0.5, 0.0, 0.5])
    res = rlhf_optimal(inst, 1.0)
    assert res.dist.probs[1] == 0.0 and res.excluded == (1,)
    res = qempo_kl_optimal(inst, 1.0, 1.0)
    assert res.dist.probs[1] == 0.0
    res = qempo_optimal(inst, 1.0)
    assert res.dist.probs[1] > 0.5 and res.kl_to_ref == math.inf


def test_tempered_examples():
    np.testing.assert_allclose(tempered_softmax([1, 0], 1), [sig(1), sig(-1)], rtol=1e-14)
    np.testing.assert_allclose(tempered_softmax([1, 0], 2), [0.8808, 0.1192], atol=1e-4)
    np.testing.assert_allclose(tempered_softmax([4, 4, 4], 9.0), [1 / 3] * 3, rtol=1e-14)
    d = tempered_entropy_derivative([1, 0], 1.0)
    assert d == pytest.approx(-sig(1) * sig(-1), rel=1e-14)
    assert round(d, 4) == -0.1966
    assert tempered_entropy_derivative([2, 2, 2], 3.0) == 0.0
    with pytest.raises(InvalidArgument):
        tempered_softmax([1, 0], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(0.05, 5.0))
def test_tempered_derivative_matches_finite_differences(z, s):
    z = np.asarray(z)
    analytic = tempered_entropy_derivative(z, s)
    fd = finite_diff_gradient(lambda v: tempered_entropy(z, float(v[0])), [s], 1e-6)[0]
    assert abs(analytic - fd) <= 1e-5 * max(abs(fd), 1e-3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(0.01, 5.0),
       st.floats(0.01, 5.0))
def test_tempered_entropy_is_nonincreasing(z, s1, s2):
    lo, hi = sorted((s1, s2))
    assert tempered_entropy(z, hi) <= tempered_entropy(z, lo) + 1e-12


@pytest.mark.parametrize("params", [MethodParams.rlhf(0.7), MethodParams.qempo(1.3),
                                    MethodParams.qempo_kl(2.0, 0.5)])
def test_implied_reward_round_trip(params):
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        inst = AlignmentInstance.from_arrays("r", rng.normal(size=n), rng.dirichlet(np.ones(n)))
        dist = optimal_policy(inst, params).dist
        got = center(implied_reward(dist, inst, params))
        np.testing.assert_allclose(got, center(inst.rewards), atol=1e-9)


def test_implied_reward_of_reference_is_zero_under_rlhf():
    inst = inst_of([1.0, 1.0, 1.0], [0.2, 0.3, 0.5])
    got = center(implied_reward(inst.ref_probs, inst, MethodParams.rlhf(2.0)))
    np.testing.assert_allclose(got, 0.0, atol=1e-15)
    with pytest.raises(SupportMismatch):
        implied_reward([1.0, 0.0, 0.0], inst, MethodParams.qempo(1.0))


def test_method_enum_values():
    assert {m.value for m in Method} == {"rlhf", "qempo", "qempo_kl"}
