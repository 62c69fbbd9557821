from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qempo.core import AlignmentInstance
from qempo.errors import InvalidArgument
from qempo.metrics import (FRONTIER_COLUMNS, QEMPO_KL_OFFLINE_PRESET, QEMPO_OFFLINE_PRESET,
                           PassAtKInput, frontier_sweep, frontier_to_csv, pass_at_k, preset_grid,
                           summarize)


def enumerate_pass_at_k(n, c, k):
    """Fraction of k-subsets of n draws (c correct) containing a correct one."""
    items = [1] * c + [0] * (n - c)
    subsets = list(itertools.combinations(range(n), k))
    return sum(any(items[i] for i in s) for s in subsets) / len(subsets)


def test_pass_at_k_examples():
    assert pass_at_k(n=10, c=0, k=3) == 0.0
    assert pass_at_k(n=10, c=10, k=3) == 1.0
    assert pass_at_k(PassAtKInput(4, 2, 2)) == pytest.approx(enumerate_pass_at_k(4, 2, 2))
    assert pass_at_k(n=4, c=2, k=2) == pytest.approx(1 - 1 / 6, rel=1e-15)
    for bad in ((4, 5, 1), (4, 2, 0), (4, 2, 5), (4, -1, 1)):
        with pytest.raises(InvalidArgument):
            pass_at_k(n=bad[0], c=bad[1], k=bad[2])
    with pytest.raises(InvalidArgument):
        PassAtKInput(4.0, 2, 1)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 10).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n),
                                                      st.integers(1, n))))
def test_pass_at_k_matches_enumeration(nck):
    n, c, k = nck
    assert pass_at_k(n=n, c=c, k=k) == pytest.approx(enumerate_pass_at_k(n, c, k), abs=1e-12)


def test_pass_at_k_large_n_is_stable():
    v = pass_at_k(n=10_000, c=3, k=100)
    exact = 1 - math.comb(9997, 100) / math.comb(10_000, 100)
    assert v == pytest.approx(exact, rel=1e-10)


def test_frontier_examples():
    inst = AlignmentInstance.from_arrays("f", [1.0, 0.2, -0.5], [0.5, 0.3, 0.2])
    pts = frontier_sweep(inst, "qempo", [0.1, 1.0, 10.0])
    ents = [p.entropy for p in pts]
    assert ents[0] > ents[1] > ents[2]
    flat = AlignmentInstance.from_arrays("c", [0.3, 0.3, 0.3], [0.5, 0.3, 0.2])
    pts = frontier_sweep(flat, "qempo", [0.1, 1.0, 10.0])
    assert all(p.entropy == pytest.approx(math.log(3)) for p in pts)
    with pytest.raises(InvalidArgument):
        frontier_sweep(inst, "qempo", [])


def test_presets():
    assert QEMPO_OFFLINE_PRESET == (1e-2, 6e-3, 4e-3, 2e-3, 1e-3)
    assert set(QEMPO_KL_OFFLINE_PRESET) == {(4e-3, 1e-2), (2e-3, 1e-2), (4e-3, 6e-3),
                                            (4e-3, 1.2e-2), (6e-3, 1e-2)}
    np.testing.assert_allclose(preset_grid("qempo-offline"), [100, 1 / 6e-3, 250, 500, 1000])
    lam1, lam2 = preset_grid("qempo-kl-offline")[0]
    assert lam1 == pytest.approx(250.0) and lam2 == pytest.approx(2.5)
    with pytest.raises(InvalidArgument):
        preset_grid("nope")


def test_frontier_csv_layout():
    inst = AlignmentInstance.from_arrays("f", [1.0, 0.0])
    pts = frontier_sweep(inst, "qempo_kl", [(1.0, 0.5), (2.0, 0.5)])
    lines = frontier_to_csv(pts).splitlines()
    assert lines[0] == ",".join(FRONTIER_COLUMNS)
    assert lines[1].startswith("qempo_kl,f,lambda1=1.0;lambda2=0.5,")
    assert len(lines) == 3


def test_summarize():
    a = AlignmentInstance.from_arrays("a", [1.0, 0.0])
    b = AlignmentInstance.from_arrays("b", [0.0, 1.0, 1.0])
    s = summarize([[0.5, 0.5], [1.0, 0.0, 0.0]], [a, b])
    assert s["entropy_mean"] == pytest.approx(math.log(2) / 2)
    assert s["quality_mass_mean"] == pytest.approx(0.25)
