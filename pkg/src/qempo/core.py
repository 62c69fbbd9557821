"""Alignment instances, policies, and the information measures built on them.

Every distribution lives over the finite candidate list of one instance.
Entropies and divergences are in nats.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence, Union

import numpy as np
import numpy.typing as npt

from .errors import InvalidArgument, SupportMismatch

DIST_TOL = 1e-9
DEFAULT_EPSILON = 0.05

FloatArray = npt.NDArray[np.float64]


class Quality(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


def _frozen(values) -> FloatArray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CandidateOutcome:
    index: int
    reward: float
    quality: Quality
    ref_prob: float
    label: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise InvalidArgument(f"candidate {self.index}: reward must be finite")
        if not (math.isfinite(self.ref_prob) and self.ref_prob >= 0.0):
            raise InvalidArgument(f"candidate {self.index}: ref_prob must be >= 0")
        object.__setattr__(self, "quality", Quality(self.quality))


@dataclass(frozen=True)
class AlignmentInstance:
    """A prompt with enumerated candidates.

    Array views (``rewards``, ``ref_probs``, ``positive``) are read-only.
    """

    id: str
    candidates: tuple[CandidateOutcome, ...]

    def __post_init__(self):
        cands = tuple(self.candidates)
        object.__setattr__(self, "candidates", cands)
        if len(cands) < 2:
            raise InvalidArgument(f"instance {self.id!r}: needs at least 2 candidates")
        for i, c in enumerate(cands):
            if c.index != i:
                raise InvalidArgument(
                    f"instance {self.id!r}: candidate indices must be 0..n-1 without gaps "
                    f"(position {i} has index {c.index})")
        total = math.fsum(c.ref_prob for c in cands)
        if abs(total - 1.0) > DIST_TOL:
            raise InvalidArgument(f"instance {self.id!r}: ref_prob sums to {total!r}, not 1")

    @classmethod
    def from_arrays(cls, id: str, rewards: Sequence[float], ref_probs: Sequence[float] | None = None,
                    positive: Sequence[bool] | None = None,
                    labels: Sequence[str | None] | None = None) -> AlignmentInstance:
        """Build an instance from parallel arrays.

        ``ref_probs`` defaults to uniform. ``positive`` defaults to marking the
        candidates that attain the maximum reward.
        """
        rewards = np.asarray(rewards, dtype=np.float64)
        n = rewards.shape[0]
        if ref_probs is None:
            ref_probs = np.full(n, 1.0 / n)
        if positive is None:
            positive = rewards == rewards.max()
        if labels is None:
            labels = [None] * n
        cands = tuple(
            CandidateOutcome(index=i, reward=float(rewards[i]),
                             quality=Quality.POSITIVE if positive[i] else Quality.NEGATIVE,
                             ref_prob=float(ref_probs[i]), label=labels[i])
            for i in range(n)
        )
        return cls(id=id, candidates=cands)

    @property
    def n(self) -> int:
        return len(self.candidates)

    @cached_property
    def rewards(self) -> FloatArray:
        return _frozen([c.reward for c in self.candidates])

    @cached_property
    def ref_probs(self) -> FloatArray:
        return _frozen([c.ref_prob for c in self.candidates])

    @cached_property
    def positive(self) -> npt.NDArray[np.bool_]:
        arr = np.array([c.quality is Quality.POSITIVE for c in self.candidates])
        arr.setflags(write=False)
        return arr

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @property
    def num_negative(self) -> int:
        return self.n - self.num_positive

    def require_both_labels(self):
        if self.num_positive == 0 or self.num_negative == 0:
            raise InvalidArgument(
                f"instance {self.id!r}: needs at least one positive and one negative candidate")

    @property
    def has_binary_quality_rewards(self) -> bool:
        """True when r = 1 on positives and r = 0 on negatives."""
        return bool(np.all(self.rewards == self.positive.astype(np.float64)))


@dataclass(frozen=True)
class PolicyDistribution:
    instance_id: str
    probs: FloatArray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(_check_probs(self.probs)))

    @property
    def n(self) -> int:
        return self.probs.shape[0]


DistLike = Union[PolicyDistribution, Sequence[float], FloatArray]


def _check_probs(probs) -> FloatArray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 1:
        raise InvalidArgument("distribution must be a non-empty vector")
    if not np.all(np.isfinite(p)):
        raise InvalidArgument("distribution has non-finite entries")
    if np.any(p < 0.0):
        raise InvalidArgument("distribution has negative entries")
    total = math.fsum(p)
    if abs(total - 1.0) > DIST_TOL:
        raise InvalidArgument(f"distribution sums to {total!r}, not 1")
    return p


def as_probs(dist: DistLike) -> FloatArray:
    """Validated probability vector from a PolicyDistribution or array-like."""
    if isinstance(dist, PolicyDistribution):
        return dist.probs
    return _check_probs(dist)


@dataclass
class LogitPolicy:
    """Per-instance logit vectors; the policy of an instance is their softmax.

    Logit arrays are replaced, never mutated in place, so copies are cheap.
    """

    logits: dict[str, FloatArray] = field(default_factory=dict)

    @classmethod
    def from_reference(cls, suite: ScenarioSuite | Iterable[AlignmentInstance]) -> LogitPolicy:
        """Start every instance at ln pi_ref (candidates with pi_ref = 0 get -inf)."""
        logits = {}
        for inst in suite:
            with np.errstate(divide="ignore"):
                logits[inst.id] = _frozen(np.log(inst.ref_probs))
        return cls(logits)

    @classmethod
    def uniform(cls, suite: ScenarioSuite | Iterable[AlignmentInstance]) -> LogitPolicy:
        return cls({inst.id: _frozen(np.zeros(inst.n)) for inst in suite})

    def __getitem__(self, instance_id: str) -> FloatArray:
        return self.logits[instance_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self.logits)

    def __len__(self) -> int:
        return len(self.logits)

    def copy(self) -> LogitPolicy:
        return LogitPolicy(dict(self.logits))

    def with_logits(self, instance_id: str, values) -> LogitPolicy:
        new = dict(self.logits)
        new[instance_id] = _frozen(values)
        return LogitPolicy(new)

    def log_probs(self, instance_id: str) -> FloatArray:
        return log_softmax(self.logits[instance_id])

    def probs(self, instance_id: str) -> FloatArray:
        return np.exp(log_softmax(self.logits[instance_id]))

    def distribution(self, instance_id: str) -> PolicyDistribution:
        return PolicyDistribution(instance_id, self.probs(instance_id))

    def step(self, grads: Mapping[str, FloatArray], learning_rate: float) -> LogitPolicy:
        """Return the policy after one gradient-descent step."""
        new = dict(self.logits)
        for key, g in grads.items():
            new[key] = _frozen(self.logits[key] - learning_rate * g)
        return LogitPolicy(new)


@dataclass(frozen=True)
class ScenarioSuite:
    instances: tuple[AlignmentInstance, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InvalidArgument(f"duplicate instance ids: {dupes}")
        if self.seed < 0:
            raise InvalidArgument("seed must be non-negative")

    def __iter__(self) -> Iterator[AlignmentInstance]:
        return iter(self.instances)

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, instance_id: str) -> AlignmentInstance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(instance_id)


# --- elementary measurements ---------------------------------------------------------

def log_softmax(logits) -> FloatArray:
    """Max-shifted log-softmax; entries at -inf stay at -inf."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 1:
        raise InvalidArgument("logits must be a non-empty vector")
    if np.any(np.isnan(z)) or np.any(z == np.inf):
        raise InvalidArgument("logits must be finite (or -inf to exclude a candidate)")
    m = z.max()
    if m == -np.inf:
        raise InvalidArgument("at least one logit must be finite")
    shifted = z - m
    return shifted - math.log(np.exp(shifted).sum())


def logsumexp(logits) -> float:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()))


def softmax_from_logits(logits) -> FloatArray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("logits must be finite")
    return np.exp(log_softmax(z))


def entropy(dist: DistLike) -> float:
    p = as_probs(dist)
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def kl_divergence(p: DistLike, q: DistLike) -> float:
    p = as_probs(p)
    q = as_probs(q)
    if p.shape != q.shape:
        raise InvalidArgument(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    support = p > 0.0
    if np.any(q[support] == 0.0):
        bad = np.flatnonzero(support & (q == 0.0)).tolist()
        raise SupportMismatch(f"p has mass where q is zero at indices {bad}")
    ps, qs = p[support], q[support]
    # clip tiny negative round-off; KL of two valid distributions is >= 0
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


def _check_len(p: FloatArray, inst: AlignmentInstance):
    if p.shape[0] != inst.n:
        raise InvalidArgument(
            f"distribution has {p.shape[0]} entries but instance {inst.id!r} has {inst.n}")


def expected_reward(dist: DistLike, inst: AlignmentInstance) -> float:
    p = as_probs(dist)
    _check_len(p, inst)
    return float(p @ inst.rewards)


def quality_mass(dist: DistLike, inst: AlignmentInstance) -> float:
    """Total probability on the positive candidates."""
    p = as_probs(dist)
    _check_len(p, inst)
    # masked sum keeps the summation order of policy_gradient_objective, so 0/1 rewards agree exactly
    return float(np.sum(np.where(inst.positive, p, 0.0)))


def policy_gradient_objective(dist: DistLike, inst: AlignmentInstance) -> float:
    """The policy-gradient objective sum_y r(y) pi(y).

    With 0/1 rewards matching the quality labels this is exactly the quality mass.
    """
    p = as_probs(dist)
    _check_len(p, inst)
    return float(np.sum(inst.rewards * p))


def ideal_policy(inst: AlignmentInstance, epsilon: float = DEFAULT_EPSILON) -> PolicyDistribution:
    """Mass 1 - epsilon split evenly over positives, epsilon split evenly over negatives."""
    if not (0.0 < epsilon < 1.0):
        raise InvalidArgument(f"epsilon must lie in (0, 1), got {epsilon!r}")
    inst.require_both_labels()
    n_pos, n_neg = inst.num_positive, inst.num_negative
    hi, lo = (1.0 - epsilon) / n_pos, epsilon / n_neg
    if not hi > lo:
        raise InvalidArgument(
            f"need (1-eps)/|Y+| > eps/|Y-| but {hi!r} <= {lo!r}; choose a smaller epsilon")
    probs = np.where(inst.positive, hi, lo)
    return PolicyDistribution(inst.id, probs)


class KLDecomposition(NamedTuple):
    kl: float
    entropy: float
    quality_term: float


def quality_term(p_w: float, n_pos: int, n_neg: int, epsilon: float) -> float:
    """Cross-entropy part sum_y pi ln pi* written as a function of the positive mass ``p_w``."""
    log_hi = math.log((1.0 - epsilon) / n_pos)
    log_lo = math.log(epsilon / n_neg)
    return p_w * (log_hi - log_lo) + log_lo


def alignment_kl_decomposition(dist: DistLike, inst: AlignmentInstance,
                               epsilon: float = DEFAULT_EPSILON) -> KLDecomposition:
    """KL to the ideal policy split as kl = -entropy - quality_term."""
    p = as_probs(dist)
    _check_len(p, inst)
    target = ideal_policy(inst, epsilon)
    kl = kl_divergence(p, target)
    q = quality_term(float(p[inst.positive].sum()), inst.num_positive, inst.num_negative, epsilon)
    return KLDecomposition(kl=kl, entropy=entropy(p), quality_term=q)
