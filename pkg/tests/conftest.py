import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from enclaveflow.enclave import generate_key  # noqa: E402

_KEY = generate_key()
os.environ.setdefault("ENCLAVEFLOW_KEY", _KEY.hex())


@pytest.fixture
def key():
    return bytes.fromhex(os.environ["ENCLAVEFLOW_KEY"])


@pytest.fixture(scope="session")
def flights_small(tmp_path_factory):
    from enclaveflow.bench import generate_dataset
    return generate_dataset(tmp_path_factory.mktemp("data") / "small.csv", 5000, 20, 3)


@pytest.fixture(scope="session")
def flights_100k(tmp_path_factory):
    from enclaveflow.bench import generate_dataset
    return generate_dataset(tmp_path_factory.mktemp("data") / "flights.csv", 100_000, 20, 1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
