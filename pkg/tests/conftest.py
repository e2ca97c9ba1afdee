import sys

import numpy as np
import pytest

from aerialformer.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(num_classes=3, embed_dim=8, window=2, depths=(1, 1, 1, 1), heads=(1, 1, 2, 2),
                stem=4):
    """Small but complete model; input sides must be multiples of 4 * 8 * window."""
    return ModelConfig.build(embed_dim=embed_dim, window_size=window, depths=depths,
                             num_heads=heads, num_classes=num_classes, stem_channels=stem)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
