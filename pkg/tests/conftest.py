import sys
from pathlib import Path

import pytest

from opcgate.codec import POLICY_NONE, RECOMMENDED_POLICIES, OpnMessage, encode_opn
from opcgate.harness.certs import make_identity

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running test")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)  # filled only when the acceptance suite ran
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def client_identity():
    return make_identity("plant-client")


@pytest.fixture(scope="session")
def server_identity():
    return make_identity("plant-server")


def opn_chunk(cert: bytes | None, thumbprint: bytes | None = bytes(20),
              policy: str | None = RECOMMENDED_POLICIES[1], body: bytes = b"") -> bytes:
    return encode_opn(OpnMessage(0, policy, cert, thumbprint, 1, 1, body))


def discovery_opn() -> bytes:
    return encode_opn(OpnMessage(0, POLICY_NONE, None, None, 1, 1))
