import pytest

from dlacc.fixtures import build_mnist_fixture, build_mobilenet_v1_fixture


@pytest.fixture(scope="session")
def mnist():
    return build_mnist_fixture()


@pytest.fixture(scope="session")
def mobilenet():
    return build_mobilenet_v1_fixture()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
