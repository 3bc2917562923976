import numpy as np
import pytest

from modelaudit import fixtures
from modelaudit.dataset import ValidationDataset
from modelaudit.oracle import ScoringOracle


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Paths of the written fixture files, keyed data/shifted/logreg/gbm/chain."""
    return fixtures.write_fixture(tmp_path_factory.mktemp("fixture"), seed=0, n=1000)


@pytest.fixture(scope="session")
def credit_frame():
    return fixtures.credit_frame(0, 1000)


@pytest.fixture()
def credit_oracle():
    return ScoringOracle.from_document(fixtures.credit_logreg_document())


@pytest.fixture()
def credit_ds(credit_frame, credit_oracle):
    return ValidationDataset(credit_frame, fixtures.TARGET, credit_oracle, protected_attributes=["gender"])


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
