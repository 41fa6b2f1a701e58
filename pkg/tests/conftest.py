import math

import numpy as np
import pytest

from pseudofuse.geometry import Box7


def random_box(rng, frame_idx=0, spread=3.0, **kw) -> Box7:
    return Box7(
        float(rng.uniform(-spread, spread)),
        float(rng.uniform(-spread, spread)),
        float(rng.uniform(-0.5, 0.5)),
        float(rng.uniform(1.0, 5.0)),
        float(rng.uniform(0.5, 2.5)),
        float(rng.uniform(0.5, 2.0)),
        float(rng.uniform(-math.pi, math.pi)),
        score=float(rng.uniform(0.05, 1.0)),
        frame_idx=frame_idx,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
