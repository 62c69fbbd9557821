"""Multipliers for the reward-floor and KL-budget constrained programs.

Three programs are handled:

* ``min_kl``   minimize KL(pi || pi_ref)  s.t. E_pi[r] >= R        (pi ∝ pi_ref·exp(lambda·r))
* ``qempo``    maximize H(pi)             s.t. E_pi[r] >= R        (pi ∝ exp(lambda·r))
* ``qempo_kl`` maximize H(pi)             s.t. E_pi[r] >= R, KL <= K

The single-constraint programs are solved by bisection on lambda, using that
E[r] under an exponential tilt is nondecreasing in the tilt. The two-constraint
program is solved by projected ascent on its concave dual.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .closed_form import rlhf_optimal
from .core import (AlignmentInstance, DistLike, FloatArray, PolicyDistribution, as_probs,
                   kl_divergence, log_softmax, logsumexp)
from .errors import ConvergenceFailure, InvalidArgument, SupportMismatch

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 10_000
LAMBDA_CAP = 1e6


class SolveStatus(str, enum.Enum):
    SLACK = "slack"
    BINDING = "binding"
    INFEASIBLE = "infeasible"
    SATURATED = "saturated"


@dataclass(frozen=True)
class ConstraintSpec:
    reward_floor: float
    kl_budget: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.reward_floor):
            raise InvalidArgument("reward_floor must be finite")
        if self.kl_budget is not None and not (math.isfinite(self.kl_budget) and self.kl_budget >= 0):
            raise InvalidArgument(f"kl_budget must be a finite value >= 0, got {self.kl_budget!r}")


@dataclass
class SolveReport:
    program: str
    status: SolveStatus
    multipliers: dict[str, float]
    residuals: dict[str, float]
    constraint_status: dict[str, SolveStatus]
    iterations: int
    dist: PolicyDistribution | None
    note: str = ""
    dual_values: list[float] = field(default_factory=list, repr=False)

    @property
    def feasible(self) -> bool:
        return self.status is not SolveStatus.INFEASIBLE

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")
        return {
            "program": self.program,
            "status": self.status.value,
            "multipliers": {k: num(v) for k, v in self.multipliers.items()},
            "residuals": {k: num(v) for k, v in self.residuals.items()},
            "constraint_status": {k: v.value for k, v in self.constraint_status.items()},
            "iterations": self.iterations,
            "probs": None if self.dist is None else [float(p) for p in self.dist.probs],
            "note": self.note,
        }


def constraint_levels(inst: AlignmentInstance, beta: float) -> ConstraintSpec:
    """Reward floor and KL budget realized by the RLHF policy at ``beta``."""
    res = rlhf_optimal(inst, beta)
    return ConstraintSpec(reward_floor=res.expected_reward, kl_budget=res.kl_to_ref)


def _check_tol(tol: float):
    if not (tol > 0 and math.isfinite(tol)):
        raise InvalidArgument(f"tol must be positive, got {tol!r}")


def _embed(inst: AlignmentInstance, support: np.ndarray, sub_probs: FloatArray) -> PolicyDistribution:
    probs = np.zeros(inst.n)
    probs[support] = sub_probs
    return PolicyDistribution(inst.id, probs)


def _infeasible(program: str, names: tuple[str, ...], note: str) -> SolveReport:
    return SolveReport(program=program, status=SolveStatus.INFEASIBLE,
                       multipliers={}, residuals={},
                       constraint_status={n: SolveStatus.INFEASIBLE for n in names},
                       iterations=0, dist=None, note=note)


def _tilt_solve(inst: AlignmentInstance, base: FloatArray, R: float, tol: float,
                program: str) -> SolveReport:
    """Bisection for pi ∝ exp(base + lam·r) with E[r] = R, lam >= 0."""
    _check_tol(tol)
    support = np.isfinite(base)
    r = inst.rewards[support]
    b = base[support]

    def mean_reward(lam: float) -> float:
        return float(np.exp(log_softmax(b + lam * r)) @ r)

    def report(lam, status, iters, probs, note=""):
        dist = _embed(inst, support, probs)
        res = float(dist.probs @ inst.rewards) - R
        return SolveReport(program=program, status=status, multipliers={"lambda": lam},
                           residuals={"reward": res}, constraint_status={"reward": status},
                           iterations=iters, dist=dist, note=note)

    r_max = float(r.max())
    if R > r_max + tol:
        return _infeasible(program, ("reward",), f"reward floor {R!r} exceeds max reward {r_max!r}")
    if mean_reward(0.0) >= R:
        return report(0.0, SolveStatus.SLACK, 0, np.exp(log_softmax(b)))
    if R >= r_max:
        # the optimum concentrates on the argmax set; lambda diverges
        top = r == r_max
        return report(math.inf, SolveStatus.BINDING, 0,
                      np.where(top, np.exp(log_softmax(np.where(top, b, -np.inf))), 0.0),
                      note="reward floor at max reward; limit policy on the argmax set")

    lo, hi, iters = 0.0, 1.0, 0
    while mean_reward(hi) < R:
        lo, hi = hi, 2.0 * hi
        iters += 1
        if hi > LAMBDA_CAP:
            if mean_reward(hi) >= R - tol:
                break
            return report(hi, SolveStatus.SATURATED, iters, np.exp(log_softmax(b + hi * r)),
                          note=f"lambda exceeded {LAMBDA_CAP:g} before the floor was met")
    # continue past |E[r] - R| <= tol until the bracket collapses, so lambda itself is accurate
    while hi - lo > 1e-13 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        iters += 1
        if mean_reward(mid) < R:
            lo = mid
        else:
            hi = mid
    lam = min((lo, hi), key=lambda v: abs(mean_reward(v) - R))
    out = report(lam, SolveStatus.BINDING, iters, np.exp(log_softmax(b + lam * r)))
    if abs(out.residuals["reward"]) > tol:
        out.status = out.constraint_status["reward"] = SolveStatus.SATURATED
        out.note = "bisection could not reach the requested tolerance"
    return out


def solve_qempo_multiplier(inst: AlignmentInstance, R: float, tol: float = DEFAULT_TOL) -> SolveReport:
    """lambda for max-entropy under E[r] >= R. The report carries ``multipliers['lambda']``."""
    return _tilt_solve(inst, np.zeros(inst.n), R, tol, "qempo")


def solve_min_kl_multiplier(inst: AlignmentInstance, R: float, tol: float = DEFAULT_TOL) -> SolveReport:
    """lambda for min KL(pi || pi_ref) under E[r] >= R; candidates with pi_ref = 0 get no mass."""
    with np.errstate(divide="ignore"):
        base = np.log(inst.ref_probs)
    return _tilt_solve(inst, base, R, tol, "min_kl")


# --- QEMPO-KL dual ascent --------------------------------------------------------------

class _Dual:
    """Concave dual g(l1, l2) = -(1 + l2)·LSE(phi) + l1·R - l2·K,
    phi = (l1·r + l2·ln pi_ref) / (1 + l2), over the support of pi_ref."""

    def __init__(self, r: FloatArray, ref_log: FloatArray, R: float, K: float):
        self.r, self.ref_log, self.R, self.K = r, ref_log, R, K

    def scores(self, lam: FloatArray) -> FloatArray:
        l1, l2 = lam
        return (l1 * self.r + l2 * self.ref_log) / (1.0 + l2)

    def evaluate(self, lam: FloatArray):
        l1, l2 = lam
        phi = self.scores(lam)
        log_p = log_softmax(phi)
        p = np.exp(log_p)
        value = -(1.0 + l2) * logsumexp(phi) + l1 * self.R - l2 * self.K
        er = float(p @ self.r)
        kl = max(float(p @ (log_p - self.ref_log)), 0.0)
        grad = np.array([self.R - er, kl - self.K])
        feats = np.stack([self.r, self.ref_log - log_p])
        centered = feats - (feats @ p)[:, None]
        cov = (centered * p) @ centered.T
        hess = -cov / (1.0 + l2)
        return value, grad, hess, p, er, kl


def _kkt_ok(lam, er, kl, R, K, tol) -> bool:
    res_r, res_k = er - R, kl - K
    if res_r < -tol or res_k > tol:
        return False
    return (abs(res_r) <= tol or lam[0] <= tol) and (abs(res_k) <= tol or lam[1] <= tol)


def _ascent_direction(grad, hess, lam, step_rule: str, eta: float):
    """Projected Newton direction on the free coordinates, or a plain gradient step."""
    if step_rule == "gradient":
        return eta * grad
    free = ~((lam <= 0.0) & (grad < 0.0))
    d = np.zeros(2)
    if not free.any():
        return d
    h = -hess[np.ix_(free, free)]
    h = h + 1e-12 * np.eye(h.shape[0]) * max(1.0, np.trace(h))
    try:
        d[free] = np.linalg.solve(h, grad[free])
    except np.linalg.LinAlgError:
        d[free] = eta * grad[free]
    return d


def _kl_only(ref_log: FloatArray, K: float, tol: float):
    """max H s.t. KL(pi || q) <= K with no reward constraint: pi ∝ q^a, a in [0, 1)."""
    def kl_at(a):
        log_p = log_softmax(a * ref_log)
        return float(np.exp(log_p) @ (log_p - ref_log)), log_p
    kl0, log_p0 = kl_at(0.0)
    if kl0 <= K:
        return 0.0, np.exp(log_p0), 0
    lo, hi, iters = 0.0, 1.0, 0
    while hi - lo > 1e-15:
        mid = 0.5 * (lo + hi)
        iters += 1
        if kl_at(mid)[0] > K:
            lo = mid
        else:
            hi = mid
    return hi, np.exp(kl_at(hi)[1]), iters


def solve_qempo_kl_multipliers(inst: AlignmentInstance, spec: ConstraintSpec,
                               tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                               step_rule: str = "newton") -> SolveReport:
    """(lambda1, lambda2) for max-entropy under a reward floor and a KL budget.

    ``step_rule`` is ``"newton"`` (projected Newton with backtracking) or
    ``"gradient"`` (step 0.5, halved whenever the dual would decrease). Both only
    accept steps that do not decrease the dual. Stops once primal feasibility and
    complementary slackness hold within ``tol``.

    When K equals the smallest KL compatible with the reward floor, the feasible
    set is the single minimum-KL policy and the multipliers diverge; that policy
    is returned with infinite multipliers and the note ``degenerate``.
    """
    _check_tol(tol)
    if spec.kl_budget is None:
        raise InvalidArgument("QEMPO-KL needs a KL budget")
    if step_rule not in ("newton", "gradient"):
        raise InvalidArgument(f"unknown step_rule {step_rule!r}")
    R, K = spec.reward_floor, spec.kl_budget
    names = ("reward", "kl")

    min_kl = solve_min_kl_multiplier(inst, R, tol)
    if not min_kl.feasible:
        return _infeasible("qempo_kl", names, min_kl.note)
    kl_floor = kl_divergence(min_kl.dist, inst.ref_probs)
    if kl_floor > K + tol:
        return _infeasible("qempo_kl", names,
                           f"reward floor needs KL >= {kl_floor!r} > budget {K!r}")

    support = inst.ref_probs > 0.0
    r = inst.rewards[support]
    ref_log = np.log(inst.ref_probs[support])

    def finish(lam1, lam2, probs, iters, note="", dual_values=()):
        dist = _embed(inst, support, probs)
        er = float(dist.probs @ inst.rewards)
        kl = kl_divergence(dist, inst.ref_probs)
        res = {"reward": er - R, "kl": kl - K}
        cs = {
            "reward": SolveStatus.BINDING if lam1 > tol else SolveStatus.SLACK,
            "kl": SolveStatus.BINDING if lam2 > tol else SolveStatus.SLACK,
        }
        overall = SolveStatus.BINDING if SolveStatus.BINDING in cs.values() else SolveStatus.SLACK
        return SolveReport(program="qempo_kl", status=overall,
                           multipliers={"lambda1": lam1, "lambda2": lam2}, residuals=res,
                           constraint_status=cs, iterations=iters, dist=dist, note=note,
                           dual_values=list(dual_values))

    # the KL budget is inactive when the reward-only optimum already fits inside it
    reward_only = solve_qempo_multiplier(inst, R, tol)
    if reward_only.feasible and reward_only.status is not SolveStatus.SATURATED:
        try:
            kl_ro = kl_divergence(reward_only.dist, inst.ref_probs)
        except SupportMismatch:
            kl_ro = math.inf
        if kl_ro <= K + tol and math.isfinite(reward_only.multipliers["lambda"]):
            return finish(reward_only.multipliers["lambda"], 0.0,
                          reward_only.dist.probs[support], reward_only.iterations)

    if kl_floor >= K - tol:
        lam1 = math.inf if min_kl.multipliers["lambda"] > 0 else 0.0
        rep = finish(lam1, math.inf, min_kl.dist.probs[support], min_kl.iterations,
                     note="degenerate: the KL budget admits only the minimum-KL policy")
        rep.multipliers["lambda1_over_lambda2"] = min_kl.multipliers["lambda"]
        return rep

    r_max = float(r.max())
    if R >= r_max and R > float(r.mean()):
        # reward floor at the maximum: restrict to the argmax set and spend the budget there
        top = r == r_max
        a, sub, iters = _kl_only_on(ref_log, top, K)
        probs = np.zeros_like(r)
        probs[top] = sub
        lam2 = a / (1.0 - a) if a < 1.0 else math.inf
        return finish(math.inf, lam2, probs, iters,
                      note="reward floor at max reward; limit policy on the argmax set")

    dual = _Dual(r, ref_log, R, K)
    lam = np.zeros(2)
    value, grad, hess, p, er, kl = dual.evaluate(lam)
    values = [value]
    eta = 0.5
    for it in range(1, max_iters + 1):
        if _kkt_ok(lam, er, kl, R, K, tol):
            return finish(float(lam[0]), float(lam[1]), p, it - 1, dual_values=values)
        d = _ascent_direction(grad, hess, lam, step_rule, eta)
        t = 1.0
        accepted = False
        while t * np.max(np.abs(d)) > 1e-300:
            trial = np.maximum(lam + t * d, 0.0)
            t_value, t_grad, t_hess, t_p, t_er, t_kl = dual.evaluate(trial)
            if t_value >= value - 1e-14 * max(1.0, abs(value)):
                accepted = True
                break
            if step_rule == "gradient":
                eta *= 0.5
                d = eta * grad
            else:
                t *= 0.5
        if not accepted:
            break
        lam, value, grad, hess, p, er, kl = trial, t_value, t_grad, t_hess, t_p, t_er, t_kl
        values.append(value)
    if _kkt_ok(lam, er, kl, R, K, tol):
        return finish(float(lam[0]), float(lam[1]), p, len(values) - 1, dual_values=values)
    raise ConvergenceFailure(
        "dual ascent did not converge",
        multipliers={"lambda1": float(lam[0]), "lambda2": float(lam[1])},
        residuals={"reward": er - R, "kl": kl - K}, iterations=len(values) - 1)


def _kl_only_on(ref_log: FloatArray, mask: np.ndarray, K: float):
    """:func:`_kl_only` restricted to ``mask``; KL is still measured against the full pi_ref."""
    sub_log = ref_log[mask]
    # KL(pi || q) for pi on the mask = KL(pi || q|mask) - ln q(mask)
    log_mass = logsumexp(sub_log)
    a, probs, iters = _kl_only(sub_log - log_mass, K + log_mass, DEFAULT_TOL)
    return a, probs, iters


# --- KKT verification ----------------------------------------------------------------

@dataclass(frozen=True)
class KKTReport:
    stationarity: bool
    primal_feasibility: bool
    dual_feasibility: bool
    complementary_slackness: bool
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (self.stationarity and self.primal_feasibility and self.dual_feasibility
                and self.complementary_slackness)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "stationarity": self.stationarity,
                "primal_feasibility": self.primal_feasibility,
                "dual_feasibility": self.dual_feasibility,
                "complementary_slackness": self.complementary_slackness,
                "details": self.details}


def verify_kkt(inst: AlignmentInstance, dist: DistLike, spec: ConstraintSpec,
               multipliers: Mapping[str, float], tol: float = DEFAULT_TOL,
               objective: str = "entropy") -> KKTReport:
    """Check the four KKT conditions for a candidate optimum.

    ``objective`` is ``"entropy"`` (QEMPO, or QEMPO-KL when ``spec.kl_budget`` is set)
    or ``"kl"`` (minimum KL to pi_ref under the reward floor). Multipliers use the
    solver's names: ``lambda`` for a single constraint, ``lambda1``/``lambda2`` for two.
    """
    p = as_probs(dist)
    if objective not in ("entropy", "kl"):
        raise InvalidArgument(f"unknown objective {objective!r}")
    lam_r = float(multipliers.get("lambda1", multipliers.get("lambda", 0.0)))
    lam_k = float(multipliers.get("lambda2", 0.0))
    has_kl = spec.kl_budget is not None and objective == "entropy"
    details: dict = {}

    dual_ok = lam_r >= 0.0 and lam_k >= 0.0 and not (math.isnan(lam_r) or math.isnan(lam_k))

    er = float(p @ inst.rewards)
    res_r = er - spec.reward_floor
    primal_ok = res_r >= -tol
    details["reward_residual"] = res_r
    res_k = 0.0
    if has_kl:
        try:
            kl = kl_divergence(p, inst.ref_probs)
        except SupportMismatch:
            kl = math.inf
        res_k = kl - spec.kl_budget
        primal_ok = primal_ok and res_k <= tol
        details["kl_residual"] = res_k

    cs_ok = ((abs(res_r) <= tol or lam_r <= tol)
             and (not has_kl or abs(res_k) <= tol or lam_k <= tol))

    if np.any(p <= 0.0) or not (math.isfinite(lam_r) and math.isfinite(lam_k)):
        stat_ok = False
        details["stationarity"] = "needs a strictly positive policy and finite multipliers"
    else:
        log_p = np.log(p)
        with np.errstate(divide="ignore"):
            ref_log = np.log(inst.ref_probs)
        if objective == "kl":
            terms = [log_p, -ref_log, -lam_r * inst.rewards]
        elif has_kl:
            terms = [(1.0 + lam_k) * log_p, -lam_r * inst.rewards, -lam_k * ref_log]
        else:
            terms = [log_p, -lam_r * inst.rewards]
        g = np.sum(terms, axis=0)
        if not np.all(np.isfinite(g)):
            stat_ok = False
            details["stationarity"] = "reference policy has zeros"
        else:
            scale = max(1.0, max(float(np.max(np.abs(t))) for t in terms))
            spread = float(g.max() - g.min())
            stat_ok = spread <= tol * scale
            details["stationarity_spread"] = spread
    return KKTReport(stationarity=stat_ok, primal_feasibility=primal_ok,
                     dual_feasibility=dual_ok, complementary_slackness=cs_ok, details=details)
