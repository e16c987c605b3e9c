import pytest

from rowshare.agent import Agent, Identity
from rowshare.service import Synchronizer
from rowshare.transport import LocalConnection, SyncClient

PASSWORD = "correct horse"


@pytest.fixture
def service(tmp_path):
    svc = Synchronizer(tmp_path / "sync.log", kdf_iterations=1000)
    yield svc
    svc.close()


@pytest.fixture
def make_agent(service, tmp_path):
    """Factory for registered, logged-in agents talking to ``service`` in-process."""

    def make(user_id: str, *, policy: str = "delete", tap=None) -> Agent:
        client = SyncClient(LocalConnection(service, tap=tap))
        agent = Agent(Identity.generate(user_id), tmp_path / f"{user_id}.script", client, revoked_policy=policy)
        agent.register(PASSWORD)
        agent.login(PASSWORD)
        return agent

    return make


def set_online(agent: Agent, online: bool) -> None:
    agent.client.connection.online = online


# criterion number -> list of (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        results = ACCEPTANCE[number]
        status = "PASS" if all(ok for ok, _ in results) else "FAIL"
        details = "; ".join(d for _, d in results)
        terminalreporter.write_line(f"criterion {number}: {status} - {details}")
