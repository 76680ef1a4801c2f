import pytest

from mpignite import LocalContext, Routing
from mpignite.cluster import LocalCluster

MODES = ["local", "cluster"]
ROUTINGS = [Routing.P2P, Routing.MASTER_RELAY]


@pytest.fixture(scope="session")
def cluster():
    with LocalCluster(3) as c:
        yield c


class Runner:
    def __init__(self, mode, routing, cluster=None):
        self.mode = mode
        self.routing = routing
        self._cluster = cluster
        self._local = LocalContext(routing)

    def __repr__(self):
        return f"{self.mode}-{self.routing.name}"

    def submit(self, fn, n, params=None):
        if self.mode == "local":
            return self._local.submit(fn, n, params)
        return self._cluster.submit(fn, n, params, routing=self.routing)

    def run(self, fn, n, params=None, timeout=30):
        return self.submit(fn, n, params).result(timeout)


@pytest.fixture(params=[(m, r) for m in MODES for r in ROUTINGS],
                ids=lambda p: f"{p[0]}-{p[1].name.lower()}")
def runner(request):
    mode, routing = request.param
    cl = request.getfixturevalue("cluster") if mode == "cluster" else None
    return Runner(mode, routing, cl)


@pytest.fixture(params=ROUTINGS, ids=lambda r: r.name.lower())
def local_runner(request):
    return Runner("local", request.param)


# -- acceptance summary ------------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    ok, seen_title = _criteria.get(number, (True, title))
    if report.failed or (report.when == "call" and report.skipped):
        ok = False
    _criteria[number] = (ok, seen_title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
