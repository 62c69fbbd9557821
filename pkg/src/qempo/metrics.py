"""pass@k, entropy and quality summaries, and entropy-quality frontier sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .closed_form import Method, MethodParams, optimal_policy
from .core import AlignmentInstance, entropy, expected_reward, quality_mass
from .errors import InvalidArgument

# offline presets as (1/lambda,) and (1/lambda1, lambda2/lambda1)
QEMPO_OFFLINE_PRESET = (1e-2, 6e-3, 4e-3, 2e-3, 1e-3)
QEMPO_KL_OFFLINE_PRESET = ((4e-3, 1e-2), (2e-3, 1e-2), (6e-3, 1e-2), (4e-3, 6e-3), (4e-3, 1.2e-2))


@dataclass(frozen=True)
class PassAtKInput:
    n: int
    c: int
    k: int

    def __post_init__(self):
        for name in ("n", "c", "k"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise InvalidArgument(f"{name} must be an integer, got {v!r}")
        if not 0 <= self.c <= self.n:
            raise InvalidArgument(f"need 0 <= c <= n, got c={self.c}, n={self.n}")
        if not 1 <= self.k <= self.n:
            raise InvalidArgument(f"need 1 <= k <= n, got k={self.k}, n={self.n}")


def pass_at_k(inp: PassAtKInput | None = None, *, n: int | None = None, c: int | None = None,
              k: int | None = None) -> float:
    """Unbiased estimate 1 - C(n-c, k) / C(n, k).

    The ratio is the product over i = n-c+1..n of (1 - k/i), accumulated as a sum of logs.
    """
    if inp is None:
        inp = PassAtKInput(n, c, k)
    n, c, k = inp.n, inp.c, inp.k
    if n - c < k:
        return 1.0
    i = np.arange(n - c + 1, n + 1, dtype=np.float64)
    log_ratio = float(np.sum(np.log1p(-k / i)))
    return float(-math.expm1(log_ratio))


@dataclass(frozen=True)
class FrontierPoint:
    method: str
    instance_id: str
    params: dict
    entropy: float
    expected_reward: float
    quality_mass: float

    def __post_init__(self):
        vals = [self.entropy, self.expected_reward, self.quality_mass, *self.params.values()]
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgument("frontier point values must be finite")


def _grid_params(method: Method, grid) -> list[MethodParams]:
    out = []
    for g in grid:
        if method is Method.RLHF:
            out.append(MethodParams.rlhf(float(g)))
        elif method is Method.QEMPO:
            out.append(MethodParams.qempo(float(g)))
        else:
            lam1, lam2 = g
            out.append(MethodParams.qempo_kl(float(lam1), float(lam2)))
    return out


def frontier_sweep(inst: AlignmentInstance, method, grid: Sequence) -> list[FrontierPoint]:
    """Closed-form policy at every grid point, in grid order.

    Grid entries are beta (RLHF), lambda (QEMPO), or (lambda1, lambda2) pairs (QEMPO-KL).
    """
    method = Method(method)
    grid = list(grid)
    if not grid:
        raise InvalidArgument("multiplier grid is empty")
    points = []
    for params in _grid_params(method, grid):
        res = optimal_policy(inst, params)
        points.append(FrontierPoint(method.value, inst.id, params.as_dict(), res.entropy,
                                    res.expected_reward, quality_mass(res.dist, inst)))
    return points


def preset_grid(name: str) -> list:
    """Named multiplier grids, converted to (lambda) or (lambda1, lambda2) form."""
    if name == "qempo-offline":
        return [1.0 / v for v in QEMPO_OFFLINE_PRESET]
    if name == "qempo-kl-offline":
        return [(1.0 / inv1, ratio / inv1) for inv1, ratio in QEMPO_KL_OFFLINE_PRESET]
    raise InvalidArgument(f"unknown preset {name!r}; choose 'qempo-offline' or 'qempo-kl-offline'")


FRONTIER_COLUMNS = ("method", "instance_id", "params", "entropy", "expected_reward",
                    "quality_mass")


def frontier_to_csv(points: Sequence[FrontierPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRONTIER_COLUMNS)
    for p in points:
        params = ";".join(f"{k}={float(v)!r}" for k, v in p.params.items())
        writer.writerow([p.method, p.instance_id, params, repr(p.entropy),
                         repr(p.expected_reward), repr(p.quality_mass)])
    return buf.getvalue()


def summarize(dists, instances: Sequence[AlignmentInstance]) -> dict:
    """Mean entropy, expected reward and quality mass over matched (dist, instance) pairs."""
    ents, rews, qms = [], [], []
    for d, inst in zip(dists, instances):
        ents.append(entropy(d))
        rews.append(expected_reward(d, inst))
        qms.append(quality_mass(d, inst))
    return {"entropy_mean": float(np.mean(ents)), "expected_reward_mean": float(np.mean(rews)),
            "quality_mass_mean": float(np.mean(qms))}
