import math

import numpy as np
import pytest

from sadiagram.candidates import refresh
from sadiagram.core import (ANISO, CB, CR, LOG_TAU, N_PARAMS, RADIUS, UX, UY, X, Y,
                            CandidateField, SiteStore)


def make_store(rng, width, height, n, log_tau=(4.0, 8.0), radius=(1.0, 6.0), aniso=0.8,
               capacity=None, dtype=np.float64):
    """Random sites with every parameter inside its clamp range."""
    p = np.zeros((n, N_PARAMS))
    p[:, X] = rng.uniform(0, width - 1, n)
    p[:, Y] = rng.uniform(0, height - 1, n)
    p[:, LOG_TAU] = rng.uniform(*log_tau, n)
    p[:, RADIUS] = rng.uniform(*radius, n)
    p[:, CR:CB + 1] = rng.uniform(0, 1, (n, 3))
    th = rng.uniform(-math.pi, math.pi, n)
    p[:, UX] = np.cos(th)
    p[:, UY] = np.sin(th)
    p[:, ANISO] = rng.uniform(-aniso, aniso, n)
    return SiteStore.from_params(p, width, height, capacity=capacity, dtype=dtype)


def converged_field(store, k=8, passes=16, seed=0):
    field = CandidateField(store.width, store.height, k)
    return refresh(store, field, mode="full", passes=passes, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
