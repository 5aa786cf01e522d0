import json
from pathlib import Path

import pytest

from figpriv.agents import AgentSet, MockBackend, load_agents_file
from figpriv.fixtures import default_fixture_dir
from figpriv.risk_graph import load_graph
from figpriv.taxonomy import load_table

DATA = Path(__file__).resolve().parents[1] / "src" / "figpriv" / "data"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return default_fixture_dir()


@pytest.fixture(scope="session")
def fixture_index(fixture_dir) -> dict:
    return json.loads((fixture_dir / "index.json").read_text())


@pytest.fixture(scope="session")
def toy_graph():
    return load_graph(DATA / "toy_ecosystem.json")


@pytest.fixture(scope="session")
def news_graph():
    return load_graph(DATA / "news_stories.json")


@pytest.fixture(scope="session")
def table():
    return load_table()


@pytest.fixture
def mock_agents(fixture_dir):
    """Fresh mock-backed agent set (call log starts empty)."""
    agents_file = load_agents_file(fixture_dir / "agents.json")
    return AgentSet.from_file(agents_file)


def backend_of(agent_set) -> MockBackend:
    return agent_set.detect.backend
