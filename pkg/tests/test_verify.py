from __future__ import annotations

import numpy as np
import pytest

from qempo.core import AlignmentInstance
from qempo.scenario import load_bundled
from qempo.verify import CHECKS, VerifyOptions, in_qempo_regime, regime_lambda, run_checks


@pytest.fixture(scope="module")
def default_results():
    return run_checks(load_bundled("default").instances, VerifyOptions(workers=2))


def test_bundled_default_suite_passes_every_check(default_results):
    failed = [(r.check, r.instance_id, r.detail) for r in default_results if r.status == "fail"]
    assert not failed
    suite = load_bundled("default")
    assert len(default_results) == len(suite) * len(CHECKS)
    passed_checks = {r.check for r in default_results if r.status == "pass"}
    assert passed_checks == set(CHECKS)


def test_regime_violation_is_skipped_not_failed(default_results):
    skewed = [r for r in default_results
              if r.instance_id == "skewed-ref-4" and r.check == "qempo_vs_qempo_kl_entropy"]
    assert skewed[0].status == "skip" and "0.05" in skewed[0].detail["reason"]


def test_tampered_outputs_fail_stationarity():
    inst = AlignmentInstance.from_arrays("t", [1.0, 0.0, 0.4], [0.3, 0.3, 0.4])
    results = run_checks([inst], VerifyOptions(perturb=1e-3))
    by = {r.check: r for r in results}
    for name in ("min_kl_optimality", "qempo_optimality", "qempo_kl_optimality"):
        assert by[name].status == "fail"
        assert by[name].detail["kkt"]["stationarity"] is False
    assert by["implied_reward_round_trip"].status == "fail"


def test_regime_helpers():
    assert regime_lambda(1.0, 1.0) == pytest.approx(0.01)
    assert regime_lambda(1.0, 0.001) == pytest.approx(1.0 / 1.001)
    assert in_qempo_regime(AlignmentInstance.from_arrays("a", [1, 0], [0.05, 0.95]))
    assert not in_qempo_regime(AlignmentInstance.from_arrays("a", [1, 0], [0.04, 0.96]))


def test_results_serialize():
    inst = AlignmentInstance.from_arrays("t", [1.0, 0.0], [0.5, 0.5])
    for r in run_checks([inst]):
        d = r.to_dict()
        assert d["status"] in ("pass", "fail", "skip")
        assert all(not isinstance(v, np.ndarray) for v in d["detail"].values())
