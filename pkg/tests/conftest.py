import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ofi_lab.hawkes.kernels import ExponentialKernel, HawkesModel, SumExponentialKernel  # noqa: E402

TABLE_ROWS = """\
09:15:00.077863519, FUT, NIFTY, 20180927, NEW_TICK, BUY, 11348.85, 750, 1100000000000928, -1
09:15:00.078110149, FUT, NIFTY, 20180927, MODIFY_TICK, BUY, 11319.8, 75, 1100000000000724, -1
09:15:00.078405918, FUT, NIFTY, 20180927, MODIFY_TICK, BUY, 11340.15, 75, 1100000000000770, -1
09:15:00.078495133, FUT, NIFTY, 20180927, MODIFY_TICK, BUY, 11338.15, 75, 1100000000000769, -1
09:15:00.079233914, FUT, NIFTY, 20180927, NEW_TICK, SELL, 11417.0, 75, 1100000000000929, -1
09:15:00.079445682, FUT, NIFTY, 20180927, NEW_TICK, SELL, 11349.9, 75, 1100000000000930, -1
09:15:00.079855028, FUT, NIFTY, 20180927, NEW_TICK, BUY, 11315.0, 75, 1100000000000931, -1
09:15:00.080119943, FUT, NIFTY, 20180927, NEW_TICK, SELL, 11380.0, 150, 1100000000000932, -1
09:15:00.080125861, FUT, NIFTY, 20180927, NEW_TICK, BUY, 11260.0, 150, 1100000000000933, -1
09:15:00.081216269, FUT, NIFTY, 20180927, NEW_TICK, BUY, 11340.0, 75, 1100000000000935, -1
09:15:00.082875605, FUT, NIFTY, 20180927, NEW_TICK, BUY, 11029.0, 450, 1100000000000937, -1
09:15:00.083489061, FUT, NIFTY, 20180927, TRADE, SELL, 11348.85, 75, 1100000000000928, 1100000000000938
"""


def sumexp_generator() -> HawkesModel:
    """Symmetric three-decay generator with branching radius 0.75."""
    dec = np.array([0.1, 1.0, 10.0])
    alpha = np.stack([d * np.array([[0.2, 0.05], [0.05, 0.2]]) for d in dec])
    return HawkesModel([0.3, 0.3], SumExponentialKernel(alpha, dec))


def exp_generator(alpha=((0.48, 0.24), (0.24, 0.48)), beta=1.2, mu=0.3) -> HawkesModel:
    a = np.asarray(alpha, dtype=float)
    return HawkesModel([mu, mu], ExponentialKernel(a, np.full_like(a, beta)))


@pytest.fixture
def table_rows():
    return TABLE_ROWS


@pytest.fixture(scope="session")
def sumexp_model():
    return sumexp_generator()


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1 : s.index("]")])):
            terminalreporter.write_line(line)
