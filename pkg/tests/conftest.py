import numpy as np
import pytest

from dicelab.corpus import generate_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """24 utterances of 1 to 1.5 s, P=4, S=3, written to disk."""
    root = tmp_path_factory.mktemp("corpus")
    manifest, waves = generate_corpus(24, 4, 3, seed=5, out_dir=root, min_seconds=1.0, max_seconds=1.5)
    return manifest, waves


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance and printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
