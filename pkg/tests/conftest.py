import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kdnas.corpus import SyntheticSpec, load_corpus
from kdnas.model import ArchState, build_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DESK_TEACHER = ArchState(12, 4, 64, 128, "gelu")


@pytest.fixture(scope="session")
def desk_teacher():
    return build_model(DESK_TEACHER, vocab_size=512, max_seq=32, seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    return load_corpus(SyntheticSpec(n_sequences=200), vocab_size=512, seq_len=16, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
