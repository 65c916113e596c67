from __future__ import annotations

import pytest

from drad.gateway import MockGateway
from drad.retrieval import build_index

import synthetic


@pytest.fixture
def clinton_index(tmp_path):
    return build_index(synthetic.clinton_passages(), tmp_path / "clinton-idx")


@pytest.fixture
def clinton_llm():
    return MockGateway(synthetic.clinton_script())


@pytest.fixture
def qa_index(tmp_path):
    return build_index(synthetic.qa_corpus(), tmp_path / "qa-idx")


@pytest.fixture
def qa_llm():
    return MockGateway(synthetic.qa_script())


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)
