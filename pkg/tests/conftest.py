import pytest

from firecrest.clock import VirtualClock
from firecrest.server import BackgroundServer
from support import Api, make_app


@pytest.fixture
def clock():
    return VirtualClock("manual")


@pytest.fixture
def app(tmp_path):
    a = make_app(tmp_path)
    yield a
    a.close()


@pytest.fixture
def api(app):
    client = Api(app)
    yield client
    client.close()


@pytest.fixture
def live(app):
    with BackgroundServer(app) as srv:
        yield srv


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
