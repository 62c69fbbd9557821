"""Brute-force certification on a simplex grid, and a finite-difference gradient oracle.

The grid holds every probability vector whose entries are multiples of ``h``.
Scans walk it in lexicographic order, one block per value of the first
coordinate, so memory stays bounded and ties always resolve to the
lexicographically smallest vector however the blocks are distributed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .core import AlignmentInstance, FloatArray, PolicyDistribution, entropy, kl_divergence
from .errors import EvaluationFailure, InvalidArgument, ResourceLimit

MAX_CANDIDATES = 5
MIN_STEP = 0.005


def _compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``, lexicographic."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    if parts == 2:
        first = np.arange(total + 1, dtype=np.int64)
        return np.stack([first, total - first], axis=1)
    blocks = []
    for k in range(total + 1):
        rest = _compositions(total - k, parts - 1)
        blocks.append(np.hstack([np.full((rest.shape[0], 1), k, dtype=np.int64), rest]))
    return np.vstack(blocks)


@dataclass(frozen=True)
class SimplexGrid:
    """Probability vectors of length ``n`` with entries in multiples of ``h``."""

    n: int
    h: float

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise InvalidArgument(f"grid dimension must be a positive integer, got {self.n!r}")
        if not (math.isfinite(self.h) and 0.0 < self.h <= 1.0):
            raise InvalidArgument(f"grid step must lie in (0, 1], got {self.h!r}")
        m = round(1.0 / self.h)
        if abs(m * self.h - 1.0) > 1e-9:
            raise InvalidArgument(f"grid step {self.h!r} must divide 1 evenly")

    @property
    def divisions(self) -> int:
        """Number of steps of size h in the unit mass."""
        return round(1.0 / self.h)

    @property
    def count(self) -> int:
        """Exact number of grid points, C(1/h + n - 1, n - 1)."""
        return math.comb(self.divisions + self.n - 1, self.n - 1)

    def check_tractable(self):
        if self.n > MAX_CANDIDATES or self.h < MIN_STEP - 1e-15:
            raise ResourceLimit(
                f"grid with n={self.n}, h={self.h} exceeds the oracle limits "
                f"(n <= {MAX_CANDIDATES}, h >= {MIN_STEP})")

    def blocks(self) -> Iterator[FloatArray]:
        """Yield the grid in lexicographic order, one block per first-coordinate value."""
        m = self.divisions
        for k in range(m + 1):
            yield self.block(k)

    def block(self, k: int) -> FloatArray:
        m = self.divisions
        if self.n == 1:
            return np.ones((1, 1)) if k == m else np.empty((0, 1))
        rest = _compositions(m - k, self.n - 1)
        counts = np.hstack([np.full((rest.shape[0], 1), k, dtype=np.int64), rest])
        return counts / m

    def __iter__(self) -> Iterator[FloatArray]:
        for block in self.blocks():
            yield from block

    def __len__(self) -> int:
        return self.count


def grid_gap_entropy(n: int, h: float) -> float:
    """Conservative entropy gap between a point and its best grid neighbour, (ln n)·h·n."""
    return math.log(n) * h * n


def grid_gap_kl(ref_probs, h: float) -> float:
    """KL analogue of the entropy gap: n·h·(ln n + max |ln pi_ref|) over the reference support."""
    q = np.asarray(ref_probs, dtype=np.float64)
    n = q.shape[0]
    return n * h * (math.log(n) + float(np.max(np.abs(np.log(q[q > 0])))))


@dataclass(frozen=True)
class OracleResult:
    """Best feasible grid point; ``dist`` is None when nothing on the grid is feasible."""

    dist: PolicyDistribution | None
    value: float
    feasible_count: int
    grid_count: int

    @property
    def empty(self) -> bool:
        return self.feasible_count == 0


def _entropy_rows(P: FloatArray) -> FloatArray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0.0, P * np.log(P), 0.0)
    return -terms.sum(axis=1)


def _kl_rows(P: FloatArray, ref_log: FloatArray) -> FloatArray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0.0, P * (np.log(P) - ref_log), 0.0)
    return terms.sum(axis=1)


def _scan(inst: AlignmentInstance, grid: SimplexGrid, score: Callable[[FloatArray], FloatArray],
          feasible: Callable[[FloatArray], np.ndarray], workers: int = 1) -> OracleResult:
    """Minimize ``score`` over feasible grid rows with lexicographic tie-break."""
    if grid.n != inst.n:
        raise InvalidArgument(f"grid dimension {grid.n} does not match instance size {inst.n}")
    grid.check_tractable()

    def scan_block(k: int):
        P = grid.block(k)
        mask = feasible(P)
        count = int(mask.sum())
        if count == 0:
            return math.inf, None, 0
        vals = score(P[mask])
        # argmin returns the first minimum, which is the lexicographically smallest row
        i = int(np.argmin(vals))
        return float(vals[i]), P[mask][i], count

    ks = range(grid.divisions + 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(scan_block, ks))
    else:
        results = [scan_block(k) for k in ks]

    best_val, best_row, total = math.inf, None, 0
    for val, row, count in results:  # block order is lexicographic, so strict < keeps ties early
        total += count
        if row is not None and val < best_val:
            best_val, best_row = val, row
    dist = None if best_row is None else PolicyDistribution(inst.id, best_row)
    return OracleResult(dist, best_val, total, grid.count)


def _reward_ok(inst: AlignmentInstance, R: float, slack: float):
    r = inst.rewards
    return lambda P: P @ r >= R - slack


def brute_force_min_kl(inst: AlignmentInstance, R: float, grid: SimplexGrid, *,
                       reward_slack: float = 1e-12, workers: int = 1) -> OracleResult:
    """Grid point of least KL to pi_ref subject to E[r] >= R."""
    with np.errstate(divide="ignore"):
        ref_log = np.log(inst.ref_probs)
    res = _scan(inst, grid, lambda P: _kl_rows(P, ref_log),
                _reward_ok(inst, R, reward_slack), workers)
    return res


def brute_force_max_entropy(inst: AlignmentInstance, R: float | None, grid: SimplexGrid,
                            K: float | None = None, *, reward_slack: float = 1e-12,
                            kl_slack: float = 1e-12, workers: int = 1) -> OracleResult:
    """Grid point of greatest entropy subject to E[r] >= R and, when given, KL(p || pi_ref) <= K.

    ``value`` is the entropy (not its negation).
    """
    with np.errstate(divide="ignore"):
        ref_log = np.log(inst.ref_probs)
    reward_ok = (lambda P: np.ones(P.shape[0], dtype=bool)) if R is None else \
        _reward_ok(inst, R, reward_slack)

    def feasible(P):
        mask = reward_ok(P)
        if K is not None:
            mask &= _kl_rows(P, ref_log) <= K + kl_slack
        return mask

    res = _scan(inst, grid, lambda P: -_entropy_rows(P), feasible, workers)
    if res.empty:
        return res
    return OracleResult(res.dist, -res.value, res.feasible_count, res.grid_count)


def finite_diff_gradient(f: Callable[[FloatArray], float], theta, h: float = 1e-6) -> FloatArray:
    """Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h, coordinate by coordinate."""
    if not (isinstance(h, (int, float)) and math.isfinite(h) and h > 0):
        raise InvalidArgument(f"step h must be a finite positive number, got {h!r}")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(theta.copy()))
        flat[i] = orig - h
        f_minus = float(f(theta.copy()))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise EvaluationFailure(f"f is not finite at coordinate {i} +/- {h}")
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def round_to_grid(dist, grid: SimplexGrid) -> FloatArray:
    """Nearest grid point by largest-remainder rounding (ties go to the lower index)."""
    p = np.asarray(dist.probs if isinstance(dist, PolicyDistribution) else dist, dtype=np.float64)
    if p.shape[0] != grid.n:
        raise InvalidArgument(f"vector of length {p.shape[0]} on a grid of dimension {grid.n}")
    m = grid.divisions
    scaled = p * m
    counts = np.floor(scaled).astype(np.int64)
    short = m - int(counts.sum())
    order = np.argsort(-(scaled - counts), kind="stable")
    counts[order[:short]] += 1
    return counts / m


@dataclass(frozen=True)
class Certificate:
    """Comparison of an analytical optimum with the best grid point.

    ``passed`` requires the grid to come within ``gap`` of the analytical value
    and never to beat it by more than ``gap + dual_allowance``. The allowance is
    the weak-duality price of any constraint relaxation the scan needed.
    """

    objective: str
    analytic: float
    grid_value: float
    gap: float
    dual_allowance: float
    grid_dist: PolicyDistribution | None
    reward_slack: float = 0.0
    kl_slack: float = 0.0

    @property
    def shortfall(self) -> float:
        """How far the grid falls behind the analytical optimum (positive means worse)."""
        if self.objective == "entropy":
            return self.analytic - self.grid_value
        return self.grid_value - self.analytic

    @property
    def passed(self) -> bool:
        if self.grid_dist is None:
            return False
        s = self.shortfall
        return s <= self.gap + 1e-9 and -s <= self.gap + self.dual_allowance + 1e-9

    def to_dict(self) -> dict:
        return {"objective": self.objective, "analytic": self.analytic,
                "grid_value": self.grid_value, "gap": self.gap,
                "dual_allowance": self.dual_allowance, "reward_slack": self.reward_slack,
                "kl_slack": self.kl_slack, "passed": self.passed}


def certify_min_kl(inst: AlignmentInstance, dist, R: float, grid: SimplexGrid, *,
                   workers: int = 1) -> Certificate:
    """Check a claimed minimizer of KL(p || pi_ref) subject to E[r] >= R against the grid."""
    res = brute_force_min_kl(inst, R, grid, workers=workers)
    return Certificate("kl", kl_divergence(dist, inst.ref_probs), res.value,
                       grid_gap_kl(inst.ref_probs, grid.h), 0.0, res.dist)


def certify_max_entropy(inst: AlignmentInstance, dist, R: float, grid: SimplexGrid,
                        K: float | None = None, multipliers: dict | None = None, *,
                        workers: int = 1) -> Certificate:
    """Check a claimed entropy maximizer under E[r] >= R (and KL <= K) against the grid.

    When a constraint set is too thin to contain a grid point, the scan is relaxed
    by exactly the violation of the grid point nearest to ``dist``, so at least
    that point is admitted. ``multipliers`` (keys ``lambda`` or ``lambda1``/``lambda2``)
    price the relaxation.
    """
    p_hat = round_to_grid(dist, grid)
    d_r = max(0.0, R - float(p_hat @ inst.rewards))
    d_k = 0.0
    if K is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            ref_log = np.log(inst.ref_probs)
        d_k = max(0.0, float(_kl_rows(p_hat[None, :], ref_log)[0]) - K)
    multipliers = multipliers or {}
    lam_r = multipliers.get("lambda1", multipliers.get("lambda", 0.0))
    lam_k = multipliers.get("lambda2", 0.0)
    allowance = 0.0
    if d_r > 0.0:
        allowance += lam_r * d_r
    if d_k > 0.0:
        allowance += lam_k * d_k
    res = brute_force_max_entropy(inst, R, grid, K, reward_slack=d_r + 1e-12,
                                  kl_slack=d_k + 1e-12, workers=workers)
    return Certificate("entropy", entropy(dist), res.value, grid_gap_entropy(inst.n, grid.h),
                       allowance, res.dist, d_r, d_k)
