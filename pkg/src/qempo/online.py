"""Online group training of tabular policies.

Each step samples a group of G candidates per instance from the current policy,
scores the group with one of the losses below, and takes a gradient step on the
logits. Every loss here is a function of the sampled log-probabilities
l_g = ln pi(y_g), so the gradient is assembled as

    dL/dtheta_j = sum_g (dL/dl_g) * (1[y_g = j] - pi_j)

which is exact for the tabular softmax.

Group moments divide by G:

    Cov(u, v) = mean((u - mean u) * (v - mean v)),   Var(u) = Cov(u, u)
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .core import (AlignmentInstance, FloatArray, LogitPolicy, ScenarioSuite, entropy,
                   expected_reward, quality_mass)
from .errors import InvalidArgument, TrainingFailure
from .metrics import pass_at_k

GRPO_STD_EPS = 1e-8


class OnlineMethod(str, enum.Enum):
    QEMPO_ONLINE = "qempo"
    QEMPO_KL_ONLINE = "qempo_kl"
    GRPO_RLHF_BASELINE = "grpo"


class VarianceGate(str, enum.Enum):
    ALL_CORRECT = "all_correct"
    ANY_CORRECT = "any_correct"
    ALWAYS = "always"


class LossVariant(str, enum.Enum):
    CANONICAL = "canonical"
    LISTING = "listing"


@dataclass(frozen=True)
class GroupSample:
    instance_id: str
    indices: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    ref_log_probs: np.ndarray
    old_log_probs: np.ndarray | None = None
    correct: np.ndarray | None = None

    def __post_init__(self):
        for name in ("indices", "rewards", "log_probs", "ref_log_probs", "old_log_probs",
                     "correct"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v))
        G = self.indices.shape[0]
        if G < 2:
            raise InvalidArgument(f"group needs at least 2 samples, got {G}")
        for name in ("rewards", "log_probs", "ref_log_probs", "old_log_probs", "correct"):
            v = getattr(self, name)
            if v is not None and v.shape != (G,):
                raise InvalidArgument(f"{name} has shape {v.shape}, expected ({G},)")
        for name in ("rewards", "log_probs", "ref_log_probs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidArgument(f"{name} must be finite")

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    def with_log_probs(self, log_probs) -> GroupSample:
        """Same samples re-scored under another policy (old log-probs are kept)."""
        return GroupSample(self.instance_id, self.indices, self.rewards, np.asarray(log_probs),
                           self.ref_log_probs, self.old_log_probs, self.correct)


def _cov(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(np.mean((u - u.mean()) * (v - v.mean())))


def _centered(u) -> FloatArray:
    u = np.asarray(u, dtype=np.float64)
    return u - u.mean()


def grpo_advantages(rewards, normalize_std: bool = False, eps: float = GRPO_STD_EPS) -> FloatArray:
    """Rewards minus the group mean, optionally divided by (std + eps)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise InvalidArgument("advantages need a group of at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)  # exact zeros; r - mean(r) can leave roundoff
    adv = r - r.mean()
    if normalize_std:
        adv = adv / (r.std() + eps)
    return adv


def gate_open(group: GroupSample, gate) -> bool:
    """Whether the variance term applies to this group.

    all_correct: every sample has reward 1. any_correct: at least one sample is
    correct. always: unconditionally.
    """
    gate = VarianceGate(gate)
    if gate is VarianceGate.ALWAYS:
        return True
    correct = group.correct if group.correct is not None else group.rewards == 1.0
    if gate is VarianceGate.ALL_CORRECT:
        return bool(np.all(correct))
    return bool(np.any(correct))


class LossValue(NamedTuple):
    """A loss and its derivative with respect to each sampled log-probability."""

    value: float
    dlogp: FloatArray


def qempo_online_terms(group: GroupSample, inv_lambda: float, gate=VarianceGate.ALL_CORRECT,
                       variant=LossVariant.CANONICAL, normalize_std: bool = False) -> LossValue:
    c = _positive("inv_lambda", inv_lambda)
    G = group.size
    lp = group.log_probs
    use_var = gate_open(group, gate)
    var = _cov(lp, lp) if use_var else 0.0
    dvar = (2.0 / G) * _centered(lp) if use_var else np.zeros(G)
    if LossVariant(variant) is LossVariant.CANONICAL:
        cov = _cov(group.rewards, lp)
        value = -2.0 * c * cov + c * c * var
        dlogp = -2.0 * c * _centered(group.rewards) / G + c * c * dvar
    else:
        adv = grpo_advantages(group.rewards, normalize_std)
        pg = float(np.mean(-adv * lp))
        value = 2.0 * c * (pg + c * var)
        dlogp = 2.0 * c * (-adv / G + c * dvar)
    return LossValue(value, dlogp)


def qempo_kl_online_terms(group: GroupSample, inv_lambda1: float, ratio21: float,
                          gate=VarianceGate.ALL_CORRECT, variant=LossVariant.CANONICAL,
                          normalize_std: bool = False) -> LossValue:
    b1 = _positive("inv_lambda1", inv_lambda1)
    b2 = float(ratio21)
    if not (math.isfinite(b2) and b2 >= 0):
        raise InvalidArgument(f"ratio21 must be >= 0, got {ratio21!r}")
    s = b1 + b2
    G = group.size
    lp = group.log_probs
    use_var = gate_open(group, gate)
    var = _cov(lp, lp) if use_var else 0.0
    dvar = (2.0 / G) * _centered(lp) if use_var else np.zeros(G)
    if LossVariant(variant) is LossVariant.CANONICAL:
        value = (-2.0 * s * _cov(group.rewards, lp) - 2.0 * s * b2 * _cov(lp, group.ref_log_probs)
                 + s * s * var)
        dlogp = (-2.0 * s * _centered(group.rewards) / G
                 - 2.0 * s * b2 * _centered(group.ref_log_probs) / G + s * s * dvar)
    else:
        if group.old_log_probs is None:
            raise InvalidArgument("the listing variant needs old_log_probs on the group")
        adv = grpo_advantages(group.rewards, normalize_std)
        pg = float(np.mean(-adv * lp))
        # the listing multiplies its covariance by b2 twice, and covaries with the sampling policy
        cov_old = b2 * _cov(lp, group.old_log_probs)
        value = 2.0 * s * (pg + b2 * cov_old + s * var)
        dlogp = 2.0 * s * (-adv / G + b2 * b2 * _centered(group.old_log_probs) / G + s * dvar)
    return LossValue(value, dlogp)


def grpo_baseline_terms(group: GroupSample, beta: float, normalize_std: bool = False) -> LossValue:
    """-mean(A * l) + beta * mean(l - l_ref)."""
    if not (math.isfinite(beta) and beta >= 0):
        raise InvalidArgument(f"beta must be >= 0, got {beta!r}")
    G = group.size
    adv = grpo_advantages(group.rewards, normalize_std)
    lp = group.log_probs
    value = -float(np.mean(adv * lp)) + beta * float(np.mean(lp - group.ref_log_probs))
    dlogp = -adv / G + beta / G
    return LossValue(value, dlogp)


def qempo_online_loss(group: GroupSample, inv_lambda: float, gate=VarianceGate.ALL_CORRECT,
                      variant=LossVariant.CANONICAL) -> float:
    return qempo_online_terms(group, inv_lambda, gate, variant).value


def qempo_kl_online_loss(group: GroupSample, inv_lambda1: float, ratio21: float,
                         gate=VarianceGate.ALL_CORRECT, variant=LossVariant.CANONICAL) -> float:
    return qempo_kl_online_terms(group, inv_lambda1, ratio21, gate, variant).value


def rlhf_grpo_baseline_loss(group: GroupSample, beta: float) -> float:
    return grpo_baseline_terms(group, beta).value


def qempo_online_mse(group: GroupSample, inv_lambda: float) -> float:
    """Group MSE between centered implied rewards c * (l - mean l) and centered rewards."""
    c = _positive("inv_lambda", inv_lambda)
    resid = c * _centered(group.log_probs) - _centered(group.rewards)
    return float(np.mean(resid * resid))


def qempo_kl_online_mse(group: GroupSample, inv_lambda1: float, ratio21: float) -> float:
    """Group MSE between (b1 + b2)(l - mean) - b2 (l_ref - mean) and centered rewards."""
    b1, b2 = _positive("inv_lambda1", inv_lambda1), float(ratio21)
    implied = (b1 + b2) * _centered(group.log_probs) - b2 * _centered(group.ref_log_probs)
    resid = implied - _centered(group.rewards)
    return float(np.mean(resid * resid))


def qempo_online_constant(group: GroupSample, inv_lambda: float) -> float:
    """The parameter-free part that turns the gate-open loss into the MSE: Var(r)."""
    return _cov(group.rewards, group.rewards)


def qempo_kl_online_constant(group: GroupSample, inv_lambda1: float, ratio21: float) -> float:
    """b2^2 Var(l_ref) + Var(r) + 2 b2 Cov(l_ref, r)."""
    b2 = float(ratio21)
    ref, r = group.ref_log_probs, group.rewards
    return b2 * b2 * _cov(ref, ref) + _cov(r, r) + 2.0 * b2 * _cov(ref, r)


def logit_gradient(group: GroupSample, probs: FloatArray, dlogp: FloatArray) -> FloatArray:
    """Chain rule from sampled log-probabilities to the instance logits."""
    n = probs.shape[0]
    counts = np.bincount(group.indices, weights=dlogp, minlength=n)
    return counts - probs * float(np.sum(dlogp))


def _positive(name: str, value) -> float:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise InvalidArgument(f"{name} must be a finite positive number, got {value!r}")
    return float(value)


# --- training --------------------------------------------------------------------------

@dataclass(frozen=True)
class OnlineConfig:
    method: OnlineMethod = OnlineMethod.QEMPO_ONLINE
    group_size: int = 10
    inv_lambda: float = 4e-3
    inv_lambda1: float = 4e-3
    ratio21: float = 1e-2
    beta: float = 1e-2
    learning_rate: float = 1.0
    steps: int = 200
    seed: int = 0
    variance_gate: VarianceGate = VarianceGate.ALL_CORRECT
    variant: LossVariant = LossVariant.CANONICAL
    normalize_std: bool = False
    eval_interval: int = 10
    eval_samples: int = 100
    pass_k: tuple[int, ...] = (1, 4, 16)

    def __post_init__(self):
        object.__setattr__(self, "method", OnlineMethod(self.method))
        object.__setattr__(self, "variance_gate", VarianceGate(self.variance_gate))
        object.__setattr__(self, "variant", LossVariant(self.variant))
        object.__setattr__(self, "pass_k", tuple(int(k) for k in self.pass_k))
        if self.group_size < 2:
            raise InvalidArgument("group_size must be >= 2")
        for name in ("inv_lambda", "inv_lambda1", "learning_rate"):
            _positive(name, getattr(self, name))
        if not (self.ratio21 >= 0 and self.beta >= 0):
            raise InvalidArgument("ratio21 and beta must be >= 0")
        if self.steps < 0 or self.eval_interval < 1 or self.seed < 0:
            raise InvalidArgument("steps and seed must be >= 0 and eval_interval >= 1")
        if not self.pass_k or any(not 1 <= k <= self.eval_samples for k in self.pass_k):
            raise InvalidArgument(f"pass_k values must lie in 1..eval_samples={self.eval_samples}")

    @classmethod
    def from_dict(cls, data: dict) -> OnlineConfig:
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise InvalidArgument(f"unknown online config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["variance_gate"] = self.variance_gate.value
        d["variant"] = self.variant.value
        d["pass_k"] = list(self.pass_k)
        return d


def group_terms(config: OnlineConfig, group: GroupSample) -> LossValue:
    if config.method is OnlineMethod.QEMPO_ONLINE:
        return qempo_online_terms(group, config.inv_lambda, config.variance_gate,
                                  config.variant, config.normalize_std)
    if config.method is OnlineMethod.QEMPO_KL_ONLINE:
        return qempo_kl_online_terms(group, config.inv_lambda1, config.ratio21,
                                     config.variance_gate, config.variant, config.normalize_std)
    return grpo_baseline_terms(group, config.beta, config.normalize_std)


def sample_group(policy: LogitPolicy, inst: AlignmentInstance, G: int,
                 rng: np.random.Generator) -> GroupSample:
    """Draw G candidates with replacement from the current policy of ``inst``."""
    log_p = policy.log_probs(inst.id)
    p = np.exp(log_p)
    idx = rng.choice(inst.n, size=G, p=p / p.sum())
    with np.errstate(divide="ignore"):
        ref_log = np.log(inst.ref_probs)
    if not np.all(np.isfinite(ref_log[idx])):
        raise InvalidArgument(f"sampled a candidate with zero reference probability in {inst.id!r}")
    return GroupSample(inst.id, idx, inst.rewards[idx], log_p[idx], ref_log[idx],
                       old_log_probs=log_p[idx].copy(), correct=inst.positive[idx])


@dataclass(frozen=True)
class OnlineHistoryRow:
    step: int
    method: str
    loss: float
    entropy_mean: float
    expected_reward_mean: float
    pass_at: dict


@dataclass
class OnlineResult:
    policy: LogitPolicy
    history: list[OnlineHistoryRow] = field(default_factory=list)
    pass_k: tuple[int, ...] = (1, 4, 16)

    def history_csv(self) -> str:
        return online_history_to_csv(self.history, self.pass_k)


def online_history_to_csv(rows: Sequence[OnlineHistoryRow], pass_k: Sequence[int]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "method", "loss", "entropy_mean", "expected_reward_mean",
                     *[f"pass@{k}" for k in pass_k]])
    for row in rows:
        writer.writerow([row.step, row.method, repr(float(row.loss)), repr(row.entropy_mean),
                         repr(row.expected_reward_mean),
                         *[repr(row.pass_at[k]) for k in pass_k]])
    return buf.getvalue()


def _eval_rng(seed: int, step: int) -> np.random.Generator:
    # stream 1 of the run seed, keyed by step, never touches the training stream
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, step)))


def evaluate_pass_at_k(policy: LogitPolicy, suite: ScenarioSuite, n: int, ks: Sequence[int],
                       rng: np.random.Generator) -> dict[int, float]:
    """Mean pass@k over instances from ``n`` fresh samples each; correct means positive quality."""
    totals = {k: 0.0 for k in ks}
    for inst in suite:
        p = policy.probs(inst.id)
        idx = rng.choice(inst.n, size=n, p=p / p.sum())
        c = int(inst.positive[idx].sum())
        for k in ks:
            totals[k] += pass_at_k(n=n, c=c, k=k)
    return {k: v / len(suite) for k, v in totals.items()}


def train_online(suite: ScenarioSuite, config: OnlineConfig,
                 policy: LogitPolicy | None = None) -> OnlineResult:
    """Sample a group per instance, score it, and step the logits; repeat ``steps`` times."""
    train_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))
    policy = LogitPolicy.from_reference(suite) if policy is None else policy.copy()
    result = OnlineResult(policy=policy, pass_k=config.pass_k)
    last_finite = None

    def record(step: int, pol: LogitPolicy, loss: float):
        ents, rews = [], []
        for inst in suite:
            p = pol.probs(inst.id)
            ents.append(entropy(p))
            rews.append(expected_reward(p, inst))
        passes = evaluate_pass_at_k(pol, suite, config.eval_samples, config.pass_k,
                                    _eval_rng(config.seed, step))
        result.history.append(OnlineHistoryRow(step, config.method.value, loss,
                                               float(np.mean(ents)), float(np.mean(rews)),
                                               passes))

    def step_terms(pol: LogitPolicy):
        grads, losses = {}, []
        for inst in suite:  # fixed instance order keeps the random stream reproducible
            group = sample_group(pol, inst, config.group_size, train_rng)
            terms = group_terms(config, group)
            losses.append(terms.value)
            grads[inst.id] = logit_gradient(group, pol.probs(inst.id), terms.dlogp) / len(suite)
        return float(np.mean(losses)), grads

    if config.steps == 0:
        record(0, policy, step_terms(policy)[0])
    for step in range(1, config.steps + 1):
        loss, grads = step_terms(policy)
        if not math.isfinite(loss):
            raise TrainingFailure(step, last_finite)
        if step == 1:
            record(0, policy, loss)
        last_finite = loss
        policy = policy.step(grads, config.learning_rate)
        if any(np.any(np.isnan(policy[k])) for k in policy):
            raise TrainingFailure(step, last_finite)
        if step % config.eval_interval == 0 or step == config.steps:
            record(step, policy, loss)
    result.policy = policy
    return result


def positive_entropy(probs, inst: AlignmentInstance) -> float:
    """Entropy of the policy renormalized onto the positive candidates."""
    p = np.asarray(probs, dtype=np.float64)[inst.positive]
    total = p.sum()
    if total <= 0:
        return 0.0
    return entropy(p / total)
