"""Per-instance checks of the optimality, ordering and identity results.

Each check returns a :class:`CheckResult` with status ``pass``, ``fail`` or
``skip``. A skip always carries the reason, e.g. an instance too large for the
grid oracle or outside the regime where an ordering is claimed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .closed_form import (MethodParams, center, implied_reward, optimal_policy, qempo_kl_optimal,
                          qempo_optimal, rlhf_optimal, tempered_entropy,
                          tempered_entropy_derivative)
from .core import (AlignmentInstance, PolicyDistribution, alignment_kl_decomposition, entropy,
                   kl_divergence, policy_gradient_objective, quality_mass)
from .errors import QempoError
from .oracle import (MAX_CANDIDATES, SimplexGrid, certify_max_entropy, certify_min_kl,
                     finite_diff_gradient)
from .solver import (ConstraintSpec, constraint_levels, solve_qempo_kl_multipliers,
                     solve_qempo_multiplier, verify_kkt)

PASS, FAIL, SKIP = "pass", "fail", "skip"

ORDERING_LAMBDA2 = (0.1, 1.0, 10.0)
REGIME_MIN_REF = 0.05
REGIME_PRODUCT = 0.01


@dataclass(frozen=True)
class VerifyOptions:
    beta: float = 1.0
    epsilon: float = 0.05
    grid_step: float = 0.01
    tol: float = 1e-8
    perturb: float = 0.0          # relative tamper applied to closed-form outputs (negative control)
    workers: int = 1


@dataclass
class CheckResult:
    check: str
    instance_id: str
    status: str
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"check": self.check, "instance_id": self.instance_id, "status": self.status,
                "detail": _jsonable(self.detail)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _tamper(dist: PolicyDistribution, rel: float) -> PolicyDistribution:
    """Deterministic multiplicative tamper that keeps the vector a distribution."""
    if rel == 0.0:
        return dist
    n = dist.n
    wiggle = 1.0 + rel * np.cos(np.arange(n) * 2.0 + 1.0)
    p = dist.probs * wiggle
    return PolicyDistribution(dist.instance_id, p / p.sum())


def _grid(inst: AlignmentInstance, opts: VerifyOptions) -> SimplexGrid | None:
    if inst.n > MAX_CANDIDATES:
        return None
    return SimplexGrid(inst.n, opts.grid_step)


def check_decomposition(inst, opts):
    if inst.num_positive == 0 or inst.num_negative == 0:
        return SKIP, {"reason": "needs both quality labels"}
    hi = (1 - opts.epsilon) / inst.num_positive
    lo = opts.epsilon / inst.num_negative
    if not hi > lo:
        return SKIP, {"reason": "epsilon too large for the label counts"}
    dists = [optimal_policy(inst, MethodParams.rlhf(opts.beta)).dist,
             PolicyDistribution(inst.id, np.full(inst.n, 1.0 / inst.n))]
    worst = 0.0
    for d in dists:
        dec = alignment_kl_decomposition(d, inst, opts.epsilon)
        worst = max(worst, abs(dec.kl + dec.entropy + dec.quality_term))
    return (PASS if worst <= 1e-9 else FAIL), {"max_abs_residual": worst}


def check_pg_equals_quality(inst, opts):
    """With 0/1 rewards the expected reward is exactly the mass on positives."""
    if not inst.has_binary_quality_rewards:
        return SKIP, {"reason": "rewards are not 0/1 quality indicators"}
    d = rlhf_optimal(inst, opts.beta).dist
    a, b = policy_gradient_objective(d, inst), quality_mass(d, inst)
    return (PASS if a == b else FAIL), {"objective": a, "quality_mass": b}


def check_min_kl(inst, opts):
    """RLHF optimum is the minimum-KL policy at its own reward level."""
    if np.any(inst.ref_probs == 0.0):
        return SKIP, {"reason": "reference policy has zeros"}
    res = rlhf_optimal(inst, opts.beta)
    spec = ConstraintSpec(res.expected_reward)
    dist = _tamper(res.dist, opts.perturb)
    kkt = verify_kkt(inst, dist, spec, {"lambda": 1.0 / opts.beta}, opts.tol, objective="kl")
    detail = {"kkt": kkt.to_dict()}
    ok = kkt.passed
    grid = _grid(inst, opts)
    if grid is None:
        detail["oracle"] = f"skipped: n={inst.n} exceeds {MAX_CANDIDATES}"
    else:
        cert = certify_min_kl(inst, dist, spec.reward_floor, grid, workers=opts.workers)
        detail["oracle"] = cert.to_dict()
        ok = ok and cert.passed
    return (PASS if ok else FAIL), detail


def check_qempo(inst, opts):
    """QEMPO at the RLHF reward level is the entropy maximizer."""
    R = rlhf_optimal(inst, opts.beta).expected_reward
    rep = solve_qempo_multiplier(inst, R, opts.tol)
    if not rep.feasible:
        return FAIL, {"solve": rep.to_dict()}
    lam = rep.multipliers["lambda"]
    if not math.isfinite(lam):
        return SKIP, {"reason": "reward floor at the maximum reward", "solve": rep.to_dict()}
    dist = qempo_optimal(inst, lam).dist if lam > 0 else rep.dist
    dist = _tamper(dist, opts.perturb)
    kkt = verify_kkt(inst, dist, ConstraintSpec(R), rep.multipliers, opts.tol)
    detail = {"lambda": lam, "kkt": kkt.to_dict()}
    ok = kkt.passed
    grid = _grid(inst, opts)
    if grid is not None:
        cert = certify_max_entropy(inst, dist, R, grid, None, rep.multipliers,
                                   workers=opts.workers)
        detail["oracle"] = cert.to_dict()
        ok = ok and cert.passed
    return (PASS if ok else FAIL), detail


def certification_budget(inst: AlignmentInstance, beta: float, tol: float = 1e-8) -> ConstraintSpec:
    """Reward floor from RLHF at ``beta``; KL budget halfway between RLHF's KL and QEMPO's.

    At RLHF's own KL the two constraints admit only the RLHF policy, so the
    certification uses a budget that leaves a nontrivial feasible set.
    """
    spec = constraint_levels(inst, beta)
    rep = solve_qempo_multiplier(inst, spec.reward_floor, tol)
    kl_q = kl_divergence(rep.dist, inst.ref_probs)
    return ConstraintSpec(spec.reward_floor, spec.kl_budget + 0.5 * (kl_q - spec.kl_budget))


def check_qempo_kl(inst, opts):
    if np.any(inst.ref_probs == 0.0):
        return SKIP, {"reason": "reference policy has zeros"}
    spec = certification_budget(inst, opts.beta, opts.tol)
    rep = solve_qempo_kl_multipliers(inst, spec, opts.tol)
    if not rep.feasible:
        return FAIL, {"solve": rep.to_dict()}
    l1, l2 = rep.multipliers["lambda1"], rep.multipliers["lambda2"]
    if not (math.isfinite(l1) and math.isfinite(l2)):
        return SKIP, {"reason": "multipliers diverge at this budget", "solve": rep.to_dict()}
    dist = qempo_kl_optimal(inst, l1, l2).dist if (l1 > 0 and l2 > 0) else rep.dist
    dist = _tamper(dist, opts.perturb)
    kkt = verify_kkt(inst, dist, spec, rep.multipliers, opts.tol)
    detail = {"lambda1": l1, "lambda2": l2, "kl_budget": spec.kl_budget, "kkt": kkt.to_dict()}
    ok = kkt.passed
    grid = _grid(inst, opts)
    if grid is not None:
        cert = certify_max_entropy(inst, dist, spec.reward_floor, grid, spec.kl_budget,
                                   rep.multipliers, workers=opts.workers)
        detail["oracle"] = cert.to_dict()
        ok = ok and cert.passed
    return (PASS if ok else FAIL), detail


def check_kl_ordering(inst, opts):
    """QEMPO-KL with lambda1 = lambda2 / beta has at least RLHF's entropy."""
    if np.any(inst.ref_probs == 0.0):
        return SKIP, {"reason": "reference policy has zeros"}
    h_rlhf = rlhf_optimal(inst, opts.beta).entropy
    margins = []
    for lam2 in ORDERING_LAMBDA2:
        h = qempo_kl_optimal(inst, lam2 / opts.beta, lam2).entropy
        margins.append(h - h_rlhf)
    worst = min(margins)
    return (PASS if worst >= -1e-9 else FAIL), {"min_entropy_margin": worst}


def in_qempo_regime(inst: AlignmentInstance) -> bool:
    return bool(np.all(inst.ref_probs >= REGIME_MIN_REF))


def regime_lambda(lam1: float, lam2: float) -> float:
    """Largest lambda allowed by lambda <= lam1/(lam2+1) and (lam2/lam1)·lambda <= 0.01."""
    return min(lam1 / (lam2 + 1.0), REGIME_PRODUCT * lam1 / lam2)


def check_qempo_ordering(inst, opts):
    """QEMPO has at least QEMPO-KL's entropy inside the small-multiplier regime."""
    if not in_qempo_regime(inst):
        return SKIP, {"reason": f"some reference probability is below {REGIME_MIN_REF}"}
    margins = []
    lam1 = 1.0 / opts.beta
    for lam2 in ORDERING_LAMBDA2:
        lam = regime_lambda(lam1, lam2)
        h_q = qempo_optimal(inst, lam).entropy
        h_kl = qempo_kl_optimal(inst, lam1, lam2).entropy
        margins.append(h_q - h_kl)
    worst = min(margins)
    return (PASS if worst >= -1e-6 else FAIL), {"min_entropy_margin": worst}


def check_tempered(inst, opts):
    """Entropy of softmax(s·r) is nonincreasing in s and its derivative is -s·Var."""
    z = inst.rewards
    s_grid = np.geomspace(0.05, 20.0, 12)
    ents = [tempered_entropy(z, s) for s in s_grid]
    mono = all(b <= a + 1e-12 for a, b in zip(ents, ents[1:]))
    worst = 0.0
    for s in (0.3, 1.0, 3.0):
        analytic = tempered_entropy_derivative(z, s)
        fd = finite_diff_gradient(lambda v: tempered_entropy(z, float(v[0])), [s], 1e-6)[0]
        worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-6))
    ok = mono and worst <= 1e-5
    return (PASS if ok else FAIL), {"monotone": mono, "max_rel_derivative_error": worst}


def check_round_trip(inst, opts):
    if np.any(inst.ref_probs == 0.0):
        return SKIP, {"reason": "reference policy has zeros"}
    target = center(inst.rewards)
    worst = 0.0
    for params in (MethodParams.rlhf(opts.beta), MethodParams.qempo(1.0 / opts.beta),
                   MethodParams.qempo_kl(1.0 / opts.beta, 1.0)):
        d = _tamper(optimal_policy(inst, params).dist, opts.perturb)
        worst = max(worst, float(np.max(np.abs(center(implied_reward(d, inst, params)) - target))))
    return (PASS if worst <= 1e-9 else FAIL), {"max_abs_error": worst}


CHECKS: dict[str, Callable] = {
    "decomposition": check_decomposition,
    "pg_equals_quality": check_pg_equals_quality,
    "min_kl_optimality": check_min_kl,
    "qempo_optimality": check_qempo,
    "qempo_kl_optimality": check_qempo_kl,
    "qempo_kl_vs_rlhf_entropy": check_kl_ordering,
    "qempo_vs_qempo_kl_entropy": check_qempo_ordering,
    "tempered_entropy": check_tempered,
    "implied_reward_round_trip": check_round_trip,
}


def run_checks(instances, opts: VerifyOptions = VerifyOptions()) -> list[CheckResult]:
    out = []
    for inst in instances:
        for name, fn in CHECKS.items():
            try:
                status, detail = fn(inst, opts)
            except QempoError as exc:
                status, detail = FAIL, {"error": f"{type(exc).__name__}: {exc}"}
            out.append(CheckResult(name, inst.id, status, detail))
    return out
