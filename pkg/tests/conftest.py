import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ubl.data import gen_synthetic_dataset, make_prompts

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=20, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    train = gen_synthetic_dataset(2, 40, 32, seed=5, split="train")
    test = gen_synthetic_dataset(2, 16, 32, seed=5, split="test")
    return train, test, make_prompts(train.class_names)
