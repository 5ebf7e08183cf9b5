import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained():
    """One full desk-scale training run, shared across the slow tests."""
    import time

    from mechanism import train_all

    started = time.perf_counter()
    base, params, losses = train_all()
    return {"base": base, "params": params, "losses": losses, "seconds": time.perf_counter() - started}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
