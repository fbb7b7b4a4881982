import os
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]
UCI_DIR = REPO / "data" / "uci"

# builtin UCI sets resolve to the canonical copies kept in the repository
os.environ.setdefault("HSBNN_DATA_DIR", str(UCI_DIR))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, shown in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[C")[1].split("]")[0])):
            terminalreporter.write_line(line)
