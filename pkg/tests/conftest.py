import numpy as np
import pytest

from acg import ModelConfig, MultimodalInput, init_weights
from acg import numerics as nx
from acg.model import synthetic_visual


@pytest.fixture
def f64():
    with nx.precision("f64"):
        yield


@pytest.fixture(scope="session")
def desk_weights():
    return init_weights(ModelConfig(), 7)


@pytest.fixture(scope="session")
def strong_weights():
    # larger projections so guidance visibly changes the decoded tokens
    return init_weights(ModelConfig(), 11, proj_std=0.2)


def make_input(seed=0, n_system=3, n_visual=16, n_query=4, d_model=64, vocab=256):
    rng = np.random.default_rng(1000 + seed)
    return MultimodalInput(
        rng.integers(0, vocab, n_system).tolist(),
        synthetic_visual(n_visual, d_model, seed),
        rng.integers(0, vocab, n_query).tolist(),
    )


@pytest.fixture
def prompt():
    return make_input(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
