from __future__ import annotations

import numpy as np
import pytest

from dpcox.data import Dataset


def brute_partial_log_lik(beta, x, time, event, s):
    """Direct double loop over subjects and their cluster-wise risk sets."""
    total = 0.0
    n = len(time)
    for i in range(n):
        if not event[i]:
            continue
        eta_i = float(x[i] @ beta) if x.shape[1] else 0.0
        denom = 0.0
        for j in range(n):
            if s[j] == s[i] and time[j] >= time[i]:
                denom += np.exp(float(x[j] @ beta) if x.shape[1] else 0.0)
        total += eta_i - np.log(denom)
    return total


def make_random_dataset(rng: np.random.Generator, n: int, dim_z: int = 1, dim_v: int = 1, ties: bool = False):
    time = rng.exponential(1.0, n)
    if ties:
        time = np.ceil(time * 3) / 3
    event = rng.integers(0, 2, n)
    event[rng.integers(n)] = 1
    return Dataset.from_arrays(
        time=time,
        event=event,
        exposure=rng.normal(0, 1, n),
        z=rng.normal(0, 1, (n, dim_z)),
        v=rng.binomial(1, 0.5, (n, dim_v)).astype(float),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
