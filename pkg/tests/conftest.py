import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_probmap(rng, h, w, classes=2):
    from ensembleseg.core import ProbMap

    raw = rng.random((h, w, classes)) + 1e-3
    return ProbMap(raw / raw.sum(axis=2, keepdims=True))


def fg_map(values):
    """Two-class ProbMap (1 x len) from a list of foreground probabilities."""
    from ensembleseg.core import ProbMap

    fg = np.asarray(values, dtype=np.float64).reshape(1, -1)
    return ProbMap(np.stack([1.0 - fg, fg], axis=2))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
