import numpy as np
import pytest

from moeheat.data import Batch
from moeheat.nn import ModelConfig, init_dense, init_sparse


def make_batch(rng, n_tokens, vocab, num_tasks):
    tasks = rng.integers(0, num_tasks, size=n_tokens)
    return Batch(tasks, rng.integers(0, vocab, n_tokens), rng.integers(0, vocab, n_tokens), tasks)


def jitter(model, rng, scale=0.5):
    """Replace every parameter with N(0, scale) noise; larger weights keep gradients above the FD noise floor."""
    for p in model.named_params().values():
        p[...] = rng.normal(0.0, scale, p.shape)
    return model


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab=16, dim=4, hidden=8, blocks=4, num_tasks=3, experts=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sparse_model(small_cfg, rng):
    return init_sparse(small_cfg, rng)


@pytest.fixture
def dense_model(small_cfg, rng):
    return init_dense(small_cfg, rng)


# Filled by tests/test_acceptance.py; echoed after the run so the lines survive output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
