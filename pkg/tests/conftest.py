from __future__ import annotations

import numpy as np
import pytest

from qempo.core import AlignmentInstance

# lines collected by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def random_instance(rng: np.random.Generator, n: int | None = None, *, binary: bool = False,
                    min_ref: float = 0.0, id: str = "rand") -> AlignmentInstance:
    """Strictly positive reference, at least one positive and one negative candidate."""
    n = int(rng.integers(3, 7)) if n is None else n
    q = rng.dirichlet(np.ones(n))
    if min_ref > 0:
        q = min_ref + (1.0 - n * min_ref) * q
    q = q / q.sum()
    if binary:
        pos = rng.permutation(np.r_[np.ones(int(rng.integers(1, n)), bool),
                                    np.zeros(n, bool)][:n])
        if pos.all() or not pos.any():
            pos[0], pos[-1] = True, False
        r = pos.astype(float)
    else:
        r = rng.normal(size=n)
        pos = r >= np.median(r)
        if pos.all():
            pos[np.argmin(r)] = False
    return AlignmentInstance.from_arrays(id, r, q, positive=pos)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
