import numpy as np
import pytest

from lora_rffi.lora_phy import ChirpParams, synthesize_packet


@pytest.fixture(scope="session")
def chirp():
    return ChirpParams()


@pytest.fixture(scope="session")
def packet(chirp):
    return synthesize_packet(chirp)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
