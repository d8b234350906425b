import pytest

_verdicts: dict[int, str] = {}


class Criterion:
    """Records one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def note(self, detail: str) -> None:
        self.detail = detail

    def line(self, ok: bool) -> str:
        extra = f" ({self.detail})" if self.detail else ""
        return f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}: {self.title}{extra}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    rep = getattr(request.node, "rep_call", None)
    _verdicts[c.number] = c.line(rep is not None and rep.passed)


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        terminalreporter.write_line(_verdicts[n])
