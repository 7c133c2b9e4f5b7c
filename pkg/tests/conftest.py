import numpy as np
import pytest

from atmskd.data import generate_synthetic, split
from atmskd.train import Splits


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_splits():
    """Small 32x32 synthetic splits for fast training-loop tests."""
    ds = generate_synthetic(n_per_class=20, image_size=32, seed=7)
    return Splits(*split(ds))


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = f"AC{number} {'PASS' if ok else 'FAIL'}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
