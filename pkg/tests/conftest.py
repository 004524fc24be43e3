from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def random_pds(rng: np.random.Generator, k: int, cond: float | None = None) -> np.ndarray:
    """Random positive definite matrix, optionally with a prescribed condition number."""
    q, _ = np.linalg.qr(rng.standard_normal((k, k)))
    if cond is None:
        eig = rng.uniform(0.3, 3.0, size=k)
    else:
        eig = np.geomspace(1.0, cond, k)
    return (q * eig) @ q.T


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
