from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]
FIXTURES = REPO_ROOT / "fixtures"


@pytest.fixture(scope="session")
def sql_fixture() -> Path:
    return FIXTURES / "sql" / "company.sql"


@pytest.fixture(scope="session")
def demo_corpus() -> dict[str, Path]:
    return {
        "problems": FIXTURES / "demo" / "problems.jsonl",
        "traces": FIXTURES / "demo" / "traces.jsonl",
        "reference_model": FIXTURES / "demo" / "reference_model.json",
    }
