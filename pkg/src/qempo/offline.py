"""Offline preference training of tabular policies.

Three pairwise logistic losses share one shape. For a pair (w, l) with policy
log-probabilities ``lp`` and reference log-probabilities ``ref``, the margin is

    m = a * (lp[w] - lp[l]) - b * (ref[w] - ref[l])

and the loss is -ln sigmoid(m) = softplus(-m). The coefficients are

    DPO       a = beta,      b = beta
    QEMPO     a = 1/lam,     b = 0
    QEMPO-KL  a = b1 + b2,   b = b2      (b1 = 1/lam1, b2 = lam2/lam1)

Since lp[w] - lp[l] equals the logit difference, the gradient of one pair's loss
with respect to the instance logits is -sigmoid(-m) * a * (e_w - e_l), and the
normalizer of the softmax never enters.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import (AlignmentInstance, FloatArray, LogitPolicy, ScenarioSuite, entropy,
                   quality_mass)
from .errors import InvalidArgument, SupportMismatch, TrainingFailure


class OfflineMethod(str, enum.Enum):
    DPO = "dpo"
    QEMPO_OFFLINE = "qempo"
    QEMPO_KL_OFFLINE = "qempo_kl"


@dataclass(frozen=True)
class PreferencePair:
    instance_id: str
    winner_index: int
    loser_index: int

    def __post_init__(self):
        if self.winner_index == self.loser_index:
            raise InvalidArgument("winner and loser must differ")
        if self.winner_index < 0 or self.loser_index < 0:
            raise InvalidArgument("candidate indices must be non-negative")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def sample_preferences(inst: AlignmentInstance, count: int, rng: np.random.Generator
                       ) -> list[PreferencePair]:
    """Draw ``count`` unordered pairs uniformly and order each by P(i beats j) = sigmoid(r_i - r_j)."""
    if not (isinstance(count, (int, np.integer)) and count >= 1):
        raise InvalidArgument(f"count must be a positive integer, got {count!r}")
    n = inst.n
    if n < 2:
        raise InvalidArgument("need at least 2 candidates to form a pair")
    # a uniform unordered pair: first index uniform, second uniform among the rest
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = j + (j >= i)
    r = inst.rewards
    i_wins = rng.random(count) < _sigmoid(r[i] - r[j])
    w = np.where(i_wins, i, j)
    l = np.where(i_wins, j, i)
    return [PreferencePair(inst.id, int(a), int(b)) for a, b in zip(w, l)]


def exhaustive_preferences(inst: AlignmentInstance, *, ties: bool = True) -> list[PreferencePair]:
    """Every ordered pair whose winner has the higher reward.

    With ``ties`` set, equal-reward pairs appear in both orders so they carry no net preference.
    """
    pairs = []
    r = inst.rewards
    for a in range(inst.n):
        for b in range(inst.n):
            if a == b:
                continue
            if r[a] > r[b] or (ties and r[a] == r[b]):
                pairs.append(PreferencePair(inst.id, a, b))
    return pairs


# --- per-pair losses on raw log-probabilities ------------------------------------------

def dpo_pair_loss(beta, chosen_logps, rejected_logps, ref_chosen_logps, ref_rejected_logps):
    """-ln sigmoid(beta * [(lp_w - ref_w) - (lp_l - ref_l)]), elementwise."""
    margin = beta * ((np.asarray(chosen_logps) - ref_chosen_logps)
                     - (np.asarray(rejected_logps) - ref_rejected_logps))
    return _softplus(-margin)


def qempo_pair_loss(inv_lambda, chosen_logps, rejected_logps):
    margin = inv_lambda * (np.asarray(chosen_logps) - np.asarray(rejected_logps))
    return _softplus(-margin)


def qempo_kl_pair_loss(inv_lambda1, ratio21, chosen_logps, rejected_logps,
                       ref_chosen_logps, ref_rejected_logps):
    chosen = inv_lambda1 * np.asarray(chosen_logps) + ratio21 * (
        np.asarray(chosen_logps) - ref_chosen_logps)
    rejected = inv_lambda1 * np.asarray(rejected_logps) + ratio21 * (
        np.asarray(rejected_logps) - ref_rejected_logps)
    return _softplus(-(chosen - rejected))


# --- losses over a tabular policy ------------------------------------------------------

@dataclass(frozen=True)
class OfflineConfig:
    method: OfflineMethod = OfflineMethod.QEMPO_OFFLINE
    beta: float = 1e-2
    inv_lambda: float = 4e-3
    inv_lambda1: float = 4e-3
    ratio21: float = 1e-2
    learning_rate: float = 1.0
    steps: int = 1000
    batch_size: int = 0          # 0 means full batch
    seed: int = 0
    pairs_per_instance: int = 256
    heldout_pairs: int = 64
    exhaustive: bool = False     # use exhaustive_preferences instead of sampling
    eval_interval: int = 50
    select_best: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", OfflineMethod(self.method))
        for name in ("beta", "inv_lambda", "inv_lambda1", "learning_rate"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidArgument(f"{name} must be a finite positive number, got {v!r}")
        if not (math.isfinite(self.ratio21) and self.ratio21 >= 0):
            raise InvalidArgument(f"ratio21 must be >= 0, got {self.ratio21!r}")
        if self.steps < 0:
            raise InvalidArgument("steps must be >= 0")
        if self.batch_size < 0 or self.pairs_per_instance < 1 or self.heldout_pairs < 0:
            raise InvalidArgument("batch_size, pairs_per_instance and heldout_pairs must be "
                                  "non-negative (pairs_per_instance positive)")
        if self.eval_interval < 1:
            raise InvalidArgument("eval_interval must be >= 1")
        if self.seed < 0:
            raise InvalidArgument("seed must be non-negative")

    @property
    def coefficients(self) -> tuple[float, float]:
        """(a, b) in the margin a * d(ln pi) - b * d(ln pi_ref)."""
        return margin_coefficients(self.method, beta=self.beta, inv_lambda=self.inv_lambda,
                                   inv_lambda1=self.inv_lambda1, ratio21=self.ratio21)

    @classmethod
    def from_dict(cls, data: dict) -> OfflineConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidArgument(f"unknown offline config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d


def margin_coefficients(method, *, beta=1e-2, inv_lambda=4e-3, inv_lambda1=4e-3,
                        ratio21=1e-2) -> tuple[float, float]:
    method = OfflineMethod(method)
    if method is OfflineMethod.DPO:
        return float(beta), float(beta)
    if method is OfflineMethod.QEMPO_OFFLINE:
        return float(inv_lambda), 0.0
    return float(inv_lambda1 + ratio21), float(ratio21)


@dataclass(frozen=True)
class PairBatch:
    """Pairs grouped by instance as (winner, loser) index arrays, in first-seen order."""

    groups: dict[str, tuple[np.ndarray, np.ndarray]]
    size: int

    @classmethod
    def of(cls, pairs: Iterable[PreferencePair] | PairBatch) -> PairBatch:
        if isinstance(pairs, PairBatch):
            return pairs
        grouped: dict[str, tuple[list, list]] = {}
        size = 0
        for p in pairs:
            w, l = grouped.setdefault(p.instance_id, ([], []))
            w.append(p.winner_index)
            l.append(p.loser_index)
            size += 1
        groups = {k: (np.array(w, dtype=np.int64), np.array(l, dtype=np.int64))
                  for k, (w, l) in grouped.items()}
        return cls(groups, size)


def _instance_terms(logits: FloatArray, inst: AlignmentInstance, w: np.ndarray, l: np.ndarray,
                    a: float, b: float):
    """Per-pair margins for one instance, with support checks."""
    n = inst.n
    if np.any(w >= n) or np.any(l >= n):
        raise InvalidArgument(f"pair index out of range for instance {inst.id!r}")
    z = np.asarray(logits, dtype=np.float64)
    members = np.concatenate([w, l])
    if np.any(~np.isfinite(z[members])):
        raise SupportMismatch(f"policy has zero probability on a pair member in {inst.id!r}")
    margin = a * (z[w] - z[l])
    if b != 0.0:
        ref = inst.ref_probs
        if np.any(ref[members] == 0.0):
            raise SupportMismatch(f"reference has zero probability on a pair member in {inst.id!r}")
        ref_log = np.log(ref)
        margin = margin - b * (ref_log[w] - ref_log[l])
    return margin


def pairwise_loss(policy: LogitPolicy, suite: ScenarioSuite,
                  pairs: Sequence[PreferencePair] | PairBatch,
                  a: float, b: float) -> float:
    """Mean of softplus(-margin) over ``pairs``."""
    batch = PairBatch.of(pairs)
    if batch.size == 0:
        raise InvalidArgument("no preference pairs given")
    total = 0.0
    for key, (w, l) in batch.groups.items():
        with np.errstate(over="ignore", invalid="ignore"):
            margin = _instance_terms(policy[key], suite[key], w, l, a, b)
            terms = _softplus(-margin)
        if not np.all(np.isfinite(terms)):
            return math.inf
        try:
            total += math.fsum(terms)
        except OverflowError:
            return math.inf
    return total / batch.size


def pairwise_gradient(policy: LogitPolicy, suite: ScenarioSuite,
                      pairs: Sequence[PreferencePair] | PairBatch,
                      a: float, b: float) -> dict[str, FloatArray]:
    """Gradient of :func:`pairwise_loss` with respect to each instance's logits.

    Instances with no pairs get a zero vector.
    """
    batch = PairBatch.of(pairs)
    if batch.size == 0:
        raise InvalidArgument("no preference pairs given")
    grads = {key: np.zeros_like(np.asarray(policy[key], dtype=np.float64)) for key in policy}
    for key, (w, l) in batch.groups.items():
        margin = _instance_terms(policy[key], suite[key], w, l, a, b)
        weight = -a * _sigmoid(-margin) / batch.size
        g = grads[key]
        np.add.at(g, w, weight)
        np.add.at(g, l, -weight)
    return grads


def dpo_loss(policy: LogitPolicy, suite: ScenarioSuite,
             pairs: Sequence[PreferencePair] | PairBatch,
             beta: float = 1e-2) -> float:
    return pairwise_loss(policy, suite, pairs, *margin_coefficients("dpo", beta=beta))


def qempo_offline_loss(policy: LogitPolicy, suite: ScenarioSuite,
                       pairs: Sequence[PreferencePair] | PairBatch,
                       inv_lambda: float = 4e-3) -> float:
    return pairwise_loss(policy, suite, pairs, *margin_coefficients("qempo", inv_lambda=inv_lambda))


def qempo_kl_offline_loss(policy: LogitPolicy, suite: ScenarioSuite,
                          pairs: Sequence[PreferencePair] | PairBatch,
                          inv_lambda1: float = 4e-3,
                          ratio21: float = 1e-2) -> float:
    a, b = margin_coefficients("qempo_kl", inv_lambda1=inv_lambda1, ratio21=ratio21)
    return pairwise_loss(policy, suite, pairs, a, b)


def offline_loss(config: OfflineConfig, policy: LogitPolicy, suite: ScenarioSuite,
                 pairs: Sequence[PreferencePair] | PairBatch) -> float:
    return pairwise_loss(policy, suite, pairs, *config.coefficients)


def offline_gradient(config: OfflineConfig, policy: LogitPolicy, suite: ScenarioSuite,
                     pairs: Sequence[PreferencePair] | PairBatch) -> dict[str, FloatArray]:
    return pairwise_gradient(policy, suite, pairs, *config.coefficients)


# --- training --------------------------------------------------------------------------

@dataclass(frozen=True)
class OfflineHistoryRow:
    step: int
    loss: float
    entropy_mean: float
    quality_mass_mean: float
    heldout_loss: float | None = None


OFFLINE_CSV_COLUMNS = ("step", "loss", "entropy_mean", "quality_mass_mean")


@dataclass
class OfflineResult:
    policy: LogitPolicy
    history: list[OfflineHistoryRow] = field(default_factory=list)
    best_step: int = 0
    train_pairs: list[PreferencePair] = field(default_factory=list)
    heldout_pairs: list[PreferencePair] = field(default_factory=list)

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def fmt(x: float) -> str:
    """Shortest round-trip text for a float, stable across runs."""
    return repr(float(x))


def history_to_csv(rows: Sequence[OfflineHistoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(OFFLINE_CSV_COLUMNS)
    for row in rows:
        writer.writerow([row.step, fmt(row.loss), fmt(row.entropy_mean),
                         fmt(row.quality_mass_mean)])
    return buf.getvalue()


def build_pairs(suite: ScenarioSuite, config: OfflineConfig, rng: np.random.Generator
                ) -> tuple[list[PreferencePair], list[PreferencePair]]:
    """Training and held-out pairs, in suite order."""
    train, held = [], []
    for inst in suite:
        if config.exhaustive:
            train.extend(exhaustive_preferences(inst))
        else:
            train.extend(sample_preferences(inst, config.pairs_per_instance, rng))
        if config.heldout_pairs:
            held.extend(sample_preferences(inst, config.heldout_pairs, rng))
    return train, held


def policy_summary(policy: LogitPolicy, suite: ScenarioSuite) -> tuple[float, float]:
    """Mean entropy and mean quality mass over the suite."""
    ents, qms = [], []
    for inst in suite:
        p = policy.probs(inst.id)
        ents.append(entropy(p))
        qms.append(quality_mass(p, inst))
    return float(np.mean(ents)), float(np.mean(qms))


def train_offline(suite: ScenarioSuite, config: OfflineConfig,
                  policy: LogitPolicy | None = None) -> OfflineResult:
    """Plain gradient descent on the configured pairwise loss.

    The policy starts at ln pi_ref unless given. Batches walk a fixed seeded
    permutation of the training pairs. With ``select_best`` the returned policy is
    the evaluated iterate with the lowest held-out loss.
    """
    rng = np.random.default_rng(config.seed)
    train, held = build_pairs(suite, config, rng)
    order = rng.permutation(len(train))
    train = [train[i] for i in order]
    a, b = config.coefficients
    policy = LogitPolicy.from_reference(suite) if policy is None else policy.copy()
    batch = len(train) if config.batch_size in (0, None) else min(config.batch_size, len(train))
    result = OfflineResult(policy=policy, train_pairs=train, heldout_pairs=held)

    best_policy, best_held, last_finite = policy, math.inf, None
    train_batch, held_batch = PairBatch.of(train), PairBatch.of(held)

    def record(step: int, pol: LogitPolicy):
        nonlocal best_policy, best_held
        loss = pairwise_loss(pol, suite, train_batch, a, b)
        if not math.isfinite(loss):
            raise TrainingFailure(step, last_finite)
        held_loss = pairwise_loss(pol, suite, held_batch, a, b) if held else None
        ent, qm = policy_summary(pol, suite)
        result.history.append(OfflineHistoryRow(step, loss, ent, qm, held_loss))
        score = held_loss if held_loss is not None else loss
        if score < best_held:
            best_held, best_policy = score, pol
            result.best_step = step

    record(0, policy)
    cursor = 0
    for step in range(1, config.steps + 1):
        if batch == len(train):
            chunk = train_batch
        else:
            idx = [(cursor + i) % len(train) for i in range(batch)]
            cursor = (cursor + batch) % len(train)
            chunk = PairBatch.of(train[i] for i in idx)
        grads = pairwise_gradient(policy, suite, chunk, a, b)
        batch_loss = pairwise_loss(policy, suite, chunk, a, b)
        if not math.isfinite(batch_loss):
            raise TrainingFailure(step, last_finite)
        last_finite = batch_loss
        policy = policy.step(grads, config.learning_rate)
        for key in policy:
            if not np.all(np.isfinite(policy[key]) | (policy[key] == -np.inf)):
                raise TrainingFailure(step, last_finite)
        if step % config.eval_interval == 0 or step == config.steps:
            record(step, policy)

    result.policy = best_policy if config.select_best else policy
    if not config.select_best:
        result.best_step = config.steps
    return result
