import numpy as np
import pytest

from cometa_lab.dataio import SplitSpec, SyntheticConfig, split, synthesize
from cometa_lab.recmodel import FeatureSchema, init_params

# A small world: enough items for both groups, quick to train on.
SMALL = SyntheticConfig(n_users=300, n_old=30, n_new=12, old_count=(61, 90), new_count=(21, 45))
SMALL_SPEC = SplitSpec(n_old=60, n_new=20, k_fold=5, holdout=16)


@pytest.fixture(scope="session")
def small_log():
    return synthesize(SMALL, seed=3)


@pytest.fixture(scope="session")
def small_split(small_log):
    return split(small_log, SMALL_SPEC)


@pytest.fixture(scope="session")
def small_model(small_log):
    return init_params(FeatureSchema.from_log(small_log, dim=4, hidden=(8, 8, 8)), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
