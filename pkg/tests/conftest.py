import sys
from pathlib import Path

import numpy as np
import pytest

# make tests/oracles.py importable regardless of invocation directory
sys.path.insert(0, str(Path(__file__).parent))

from opnas.model import ModelConfig, synth_corpus


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(num_layers=2, d_model=16, n_heads=2, vocab=32, seq_len=16)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_config):
    return synth_corpus(seed=0, size=96, vocab=tiny_config.vocab,
                        seq_len=tiny_config.seq_len)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# acceptance gate reporting: test_acceptance records one line per check and
# the collected lines are echoed after the run so the gate reads at a glance


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance checks")
        for line in lines:
            terminalreporter.write_line(line)
