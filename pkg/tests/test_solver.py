from __future__ import annotations

import math

import numpy as np
import pytest

from qempo.closed_form import qempo_kl_optimal, qempo_optimal, rlhf_optimal
from qempo.core import AlignmentInstance, entropy, kl_divergence
from qempo.errors import InvalidArgument
from qempo.solver import (ConstraintSpec, SolveStatus, constraint_levels,
                          solve_min_kl_multiplier, solve_qempo_kl_multipliers,
                          solve_qempo_multiplier, verify_kkt)

from conftest import random_instance


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def inst_of(r, q=None):
    return AlignmentInstance.from_arrays("t", r, q)


def test_constraint_levels_examples():
    spec = constraint_levels(inst_of([2.5, 2.5, 2.5], [0.2, 0.3, 0.5]), 1.0)
    assert spec.reward_floor == pytest.approx(2.5) and spec.kl_budget == pytest.approx(0.0, abs=1e-15)
    spec = constraint_levels(inst_of([1, 0]), 1.0)
    p = sig(1.0)
    k_oracle = p * math.log(2 * p) + (1 - p) * math.log(2 * (1 - p))
    assert spec.reward_floor == pytest.approx(p, rel=1e-14)
    assert spec.kl_budget == pytest.approx(k_oracle, rel=1e-12)
    # exact value 0.110944 (a quoted 0.1115 is off in the third digit)
    assert round(spec.kl_budget, 6) == 0.110944
    far = constraint_levels(inst_of([1, 0, 3], [0.2, 0.3, 0.5]), 1e6)
    assert far.reward_floor == pytest.approx(0.2 + 1.5, abs=1e-5)
    assert far.kl_budget == pytest.approx(0.0, abs=1e-10)


def test_constraint_spec_validation():
    with pytest.raises(InvalidArgument):
        ConstraintSpec(math.nan)
    with pytest.raises(InvalidArgument):
        ConstraintSpec(0.0, -1.0)


def test_qempo_multiplier_examples():
    rep = solve_qempo_multiplier(inst_of([1, 0]), sig(1.0), 1e-10)
    assert rep.status is SolveStatus.BINDING
    assert rep.multipliers["lambda"] == pytest.approx(1.0, abs=1e-8)
    rep = solve_qempo_multiplier(inst_of([1, 0]), 0.7311, 1e-8)
    assert rep.multipliers["lambda"] == pytest.approx(1.0, abs=1e-3)
    rep = solve_qempo_multiplier(inst_of([1, 0]), 0.4)
    assert rep.status is SolveStatus.SLACK and rep.multipliers["lambda"] == 0.0
    np.testing.assert_allclose(rep.dist.probs, [0.5, 0.5])
    rep = solve_qempo_multiplier(inst_of([1, 0]), 1.5)
    assert rep.status is SolveStatus.INFEASIBLE and not rep.feasible and rep.dist is None


def test_qempo_multiplier_at_max_reward_concentrates_on_argmax():
    rep = solve_qempo_multiplier(inst_of([1, 1, 0]), 1.0)
    assert rep.status is SolveStatus.BINDING and rep.multipliers["lambda"] == math.inf
    np.testing.assert_allclose(rep.dist.probs, [0.5, 0.5, 0.0])


def test_min_kl_multiplier_matches_rlhf():
    rng = np.random.default_rng(8)
    for _ in range(50):
        inst = random_instance(rng)
        beta = float(rng.choice([0.3, 1.0, 3.0]))
        spec = constraint_levels(inst, beta)
        rep = solve_min_kl_multiplier(inst, spec.reward_floor, 1e-10)
        if rep.status is SolveStatus.SLACK:
            continue
        assert rep.multipliers["lambda"] == pytest.approx(1.0 / beta, rel=1e-6)


@pytest.mark.parametrize("step_rule", ["newton", "gradient"])
def test_qempo_kl_solver_feasible_at_rlhf_levels(step_rule):
    rng = np.random.default_rng(21)
    for _ in range(30):
        inst = random_instance(rng, min_ref=0.01)
        beta = float(rng.choice([0.5, 1.0, 2.0]))
        spec = constraint_levels(inst, beta)
        rep = solve_qempo_kl_multipliers(inst, spec, 1e-8, step_rule=step_rule)
        assert rep.feasible
        p = rep.dist.probs
        assert p @ inst.rewards >= spec.reward_floor - 1e-8
        assert kl_divergence(p, inst.ref_probs) <= spec.kl_budget + 1e-8
        assert entropy(p) >= rlhf_optimal(inst, beta).entropy - 1e-8


def test_qempo_kl_solver_entropy_not_below_rlhf():
    rng = np.random.default_rng(22)
    for _ in range(30):
        inst = random_instance(rng, min_ref=0.01)
        beta = float(rng.choice([0.5, 1.0, 2.0]))
        spec = constraint_levels(inst, beta)
        spec = ConstraintSpec(spec.reward_floor, spec.kl_budget * 1.5)
        rep = solve_qempo_kl_multipliers(inst, spec, 1e-8)
        assert entropy(rep.dist) >= rlhf_optimal(inst, beta).entropy - 1e-8
        lam1, lam2 = rep.multipliers["lambda1"], rep.multipliers["lambda2"]
        if 0 < lam1 < math.inf and 0 < lam2 < math.inf:
            np.testing.assert_allclose(rep.dist.probs, qempo_kl_optimal(inst, lam1, lam2).dist.probs,
                                       atol=1e-7)
            assert verify_kkt(inst, rep.dist, spec, rep.multipliers, 1e-7).passed


def test_qempo_kl_solver_slack_and_infeasible():
    inst = inst_of([0.5, 0.5, 0.5])
    rep = solve_qempo_kl_multipliers(inst, ConstraintSpec(0.5, 0.1))
    assert rep.multipliers == {"lambda1": 0.0, "lambda2": 0.0}
    assert rep.constraint_status["kl"] is SolveStatus.SLACK
    np.testing.assert_allclose(rep.dist.probs, [1 / 3] * 3)
    rep = solve_qempo_kl_multipliers(inst_of([1, 0]), ConstraintSpec(1.5, 0.1))
    assert rep.status is SolveStatus.INFEASIBLE
    with pytest.raises(InvalidArgument):
        solve_qempo_kl_multipliers(inst_of([1, 0]), ConstraintSpec(0.5))
    with pytest.raises(InvalidArgument):
        solve_qempo_kl_multipliers(inst_of([1, 0]), ConstraintSpec(0.5, 0.1), step_rule="adam")


def test_qempo_kl_solver_kl_binds_with_nonuniform_reference():
    inst = inst_of([0.5, 0.5, 0.5], [0.7, 0.2, 0.1])
    rep = solve_qempo_kl_multipliers(inst, ConstraintSpec(0.5, 0.05), 1e-9)
    assert rep.constraint_status["kl"] is SolveStatus.BINDING
    assert kl_divergence(rep.dist, inst.ref_probs) == pytest.approx(0.05, abs=1e-8)


def test_solve_report_serializes_infinities():
    rep = solve_qempo_multiplier(inst_of([1, 1, 0]), 1.0)
    d = rep.to_dict()
    assert d["multipliers"]["lambda"] == "inf" and d["status"] == "binding"


def test_verify_kkt_examples():
    inst = inst_of([1, 0, 0.3], [0.2, 0.5, 0.3])
    rep = solve_qempo_multiplier(inst, 0.6, 1e-12)
    spec = ConstraintSpec(0.6)
    assert verify_kkt(inst, qempo_optimal(inst, rep.multipliers["lambda"]).dist, spec,
                      rep.multipliers, 1e-8).passed
    bad = verify_kkt(inst, [1 / 3] * 3, ConstraintSpec(1 / 3 * 1.3), {"lambda": 1.0}, 1e-8)
    assert not bad.stationarity
    flat = inst_of([2, 2, 2])
    ok = verify_kkt(flat, [1 / 3] * 3, ConstraintSpec(2.0), {"lambda": 1.0}, 1e-8)
    assert ok.stationarity
    neg = verify_kkt(inst, qempo_optimal(inst, 1.0).dist, spec, {"lambda": -1.0}, 1e-8)
    assert not neg.dual_feasibility and not neg.passed


def test_verify_kkt_min_kl_objective():
    inst = inst_of([1, 0, 0.3], [0.2, 0.5, 0.3])
    spec = constraint_levels(inst, 0.5)
    res = rlhf_optimal(inst, 0.5)
    assert verify_kkt(inst, res.dist, spec, {"lambda": 2.0}, 1e-8, objective="kl").passed
    assert not verify_kkt(inst, res.dist, spec, {"lambda": 1.0}, 1e-8, objective="kl").passed
