"""Closed-form optimal policies for RLHF, QEMPO and QEMPO-KL.

All three are softmaxes of an affine function of the rewards and ln pi_ref:

    RLHF      pi ∝ pi_ref · exp(r / beta)
    QEMPO     pi ∝ exp(lambda · r)
    QEMPO-KL  pi ∝ pi_ref^(lambda2 / (lambda2 + 1)) · exp(lambda1 · r / (lambda2 + 1))

and every formula is evaluated in the log domain. Candidates with pi_ref = 0
cannot receive mass under RLHF or QEMPO-KL; they are dropped from the support
and listed in ``ClosedFormResult.excluded``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (AlignmentInstance, DistLike, FloatArray, PolicyDistribution, as_probs,
                   entropy, expected_reward, kl_divergence, log_softmax, logsumexp)
from .errors import InvalidArgument, SupportMismatch


class Method(str, enum.Enum):
    RLHF = "rlhf"
    QEMPO = "qempo"
    QEMPO_KL = "qempo_kl"


def _positive(name: str, value) -> float:
    if value is None or not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise InvalidArgument(f"{name} must be a finite positive number, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class MethodParams:
    """Multipliers for one method; only the fields the method uses are read."""

    method: Method
    beta: float | None = None
    lam: float | None = None
    lam1: float | None = None
    lam2: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.method is Method.RLHF:
            _positive("beta", self.beta)
        elif self.method is Method.QEMPO:
            _positive("lambda", self.lam)
        else:
            _positive("lambda1", self.lam1)
            _positive("lambda2", self.lam2)

    @classmethod
    def rlhf(cls, beta: float) -> MethodParams:
        return cls(Method.RLHF, beta=beta)

    @classmethod
    def qempo(cls, lam: float) -> MethodParams:
        return cls(Method.QEMPO, lam=lam)

    @classmethod
    def qempo_kl(cls, lam1: float, lam2: float) -> MethodParams:
        return cls(Method.QEMPO_KL, lam1=lam1, lam2=lam2)

    @classmethod
    def qempo_inverse(cls, inv_lambda: float) -> MethodParams:
        """QEMPO parameterized by 1/lambda."""
        return cls.qempo(1.0 / _positive("inv_lambda", inv_lambda))

    @classmethod
    def qempo_kl_inverse(cls, inv_lambda1: float, ratio21: float) -> MethodParams:
        """QEMPO-KL parameterized by (1/lambda1, lambda2/lambda1)."""
        lam1 = 1.0 / _positive("inv_lambda1", inv_lambda1)
        return cls.qempo_kl(lam1, _positive("ratio21", ratio21) * lam1)

    def as_dict(self) -> dict[str, float]:
        if self.method is Method.RLHF:
            return {"beta": self.beta}
        if self.method is Method.QEMPO:
            return {"lambda": self.lam}
        return {"lambda1": self.lam1, "lambda2": self.lam2}


@dataclass(frozen=True)
class ClosedFormResult:
    dist: PolicyDistribution
    log_partition: float
    entropy: float
    expected_reward: float
    kl_to_ref: float
    params: MethodParams
    excluded: tuple[int, ...] = field(default=())


def _ref_log(inst: AlignmentInstance) -> FloatArray:
    with np.errstate(divide="ignore"):
        return np.log(inst.ref_probs)


def _result(inst: AlignmentInstance, scores: FloatArray, params: MethodParams,
            excluded: tuple[int, ...] = ()) -> ClosedFormResult:
    log_z = logsumexp(scores[np.isfinite(scores)])
    probs = np.exp(log_softmax(scores))
    dist = PolicyDistribution(inst.id, probs)
    try:
        kl = kl_divergence(dist, inst.ref_probs)
    except SupportMismatch:
        kl = math.inf  # QEMPO puts mass where the reference has none
    return ClosedFormResult(
        dist=dist,
        log_partition=log_z,
        entropy=entropy(dist),
        expected_reward=expected_reward(dist, inst),
        kl_to_ref=kl,
        params=params,
        excluded=excluded,
    )


def _excluded(inst: AlignmentInstance) -> tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(inst.ref_probs == 0.0))


def rlhf_scores(inst: AlignmentInstance, beta: float) -> FloatArray:
    """Unnormalized log-weights ln pi_ref + r / beta."""
    return _ref_log(inst) + inst.rewards / _positive("beta", beta)


def qempo_scores(inst: AlignmentInstance, lam: float) -> FloatArray:
    return _positive("lambda", lam) * inst.rewards


def qempo_kl_scores(inst: AlignmentInstance, lam1: float, lam2: float) -> FloatArray:
    lam1 = _positive("lambda1", lam1)
    lam2 = _positive("lambda2", lam2)
    ref_log = _ref_log(inst)
    # keep -inf where pi_ref = 0 instead of 0 * -inf = nan
    tilt = np.where(np.isfinite(ref_log), (lam2 / (lam2 + 1.0)) * ref_log, -np.inf)
    return tilt + (lam1 / (lam2 + 1.0)) * inst.rewards


def rlhf_optimal(inst: AlignmentInstance, beta: float) -> ClosedFormResult:
    return _result(inst, rlhf_scores(inst, beta), MethodParams.rlhf(beta), _excluded(inst))


def qempo_optimal(inst: AlignmentInstance, lam: float) -> ClosedFormResult:
    return _result(inst, qempo_scores(inst, lam), MethodParams.qempo(lam))


def qempo_kl_optimal(inst: AlignmentInstance, lam1: float, lam2: float) -> ClosedFormResult:
    return _result(inst, qempo_kl_scores(inst, lam1, lam2), MethodParams.qempo_kl(lam1, lam2),
                   _excluded(inst))


def optimal_policy(inst: AlignmentInstance, params: MethodParams) -> ClosedFormResult:
    if params.method is Method.RLHF:
        return rlhf_optimal(inst, params.beta)
    if params.method is Method.QEMPO:
        return qempo_optimal(inst, params.lam)
    return qempo_kl_optimal(inst, params.lam1, params.lam2)


def tempered_softmax(z, s: float) -> FloatArray:
    """Softmax of s·z."""
    s = _positive("s", s)
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("z must be finite")
    return np.exp(log_softmax(s * z))


def tempered_entropy(z, s: float) -> float:
    return entropy(tempered_softmax(z, s))


def tempered_entropy_derivative(z, s: float) -> float:
    """dH/ds of the tempered softmax, which equals -s · Var_p(s)[z]."""
    p = tempered_softmax(z, s)
    z = np.asarray(z, dtype=np.float64)
    z = z - z[0]  # shift-invariant; makes constant z give an exact zero
    centered = z - p @ z
    var = float(p @ (centered * centered))
    return -s * var


def implied_reward(dist: DistLike, inst: AlignmentInstance, params: MethodParams) -> FloatArray:
    """Rewards recovered from a policy, up to an additive constant (the ln Z term is dropped).

    Compare results only after :func:`center`.
    """
    p = as_probs(dist)
    if p.shape[0] != inst.n:
        raise InvalidArgument(f"distribution has {p.shape[0]} entries, instance has {inst.n}")
    if np.any(p == 0.0):
        raise SupportMismatch("implied reward needs a strictly positive policy")
    log_p = np.log(p)
    if params.method is Method.QEMPO:
        return log_p / params.lam
    if np.any(inst.ref_probs == 0.0):
        raise SupportMismatch("implied reward needs a strictly positive reference policy")
    log_ratio = log_p - np.log(inst.ref_probs)
    if params.method is Method.RLHF:
        return params.beta * log_ratio
    return log_p / params.lam1 + (params.lam2 / params.lam1) * log_ratio


def center(values) -> FloatArray:
    v = np.asarray(values, dtype=np.float64)
    return v - v.mean()
