import numpy as np
import pytest

# collected (criterion, passed, detail) tuples from the acceptance module
ACCEPTANCE_RESULTS = []


def record_acceptance(name: str, passed: bool, detail: str):
    ACCEPTANCE_RESULTS.append((name, passed, detail))
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status} {name}: {detail}")


@pytest.fixture
def rng():
    from pcnlab.rng import RngStream
    return RngStream(1234)


@pytest.fixture(scope="session")
def small_pcn():
    """A fixed seed-42 TinyConvPCN shared by read-only tests."""
    from pcnlab.model import init_model
    from pcnlab.rng import RngStream
    return init_model("pcn", RngStream(42).child("model"))


@pytest.fixture(scope="session")
def small_images():
    from pcnlab.rng import RngStream
    return RngStream(7).normal((4, 3, 32, 32)) * 0.5
