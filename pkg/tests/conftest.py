import numpy as np
import pytest

from mgfn.graph_builder import InteractionRecord, TransitionPair, build_csmg
from mgfn.synthgen import ItemMeta


def item(i):
    return f"i{i:03d}"


def catalog_for(n):
    return [ItemMeta(item(i), f"kw{i % 5}", f"tag{i % 3}", 10 + i, i % 2) for i in range(n)]


def graph_from_edges(n, edges, scenarios=("A", "B"), n_buckets=16, watched=None):
    """Graph over ``n`` items from ``{scenario: [(src, dst, count), ...]}``.

    Node ``k`` is item ``i{k:03d}``; every node gets one watch record in
    each scenario listed for it in ``watched`` (all scenarios by default).
    """
    pairs = [TransitionPair(item(a), item(b), s)
             for s, lst in edges.items() for a, b, c in lst for _ in range(c)]
    watched = watched if watched is not None else {k: scenarios for k in range(n)}
    records = [InteractionRecord("u", item(k), s, 0, 1.0) for k, ss in watched.items() for s in ss]
    return build_csmg(pairs, catalog_for(n), records, scenarios=scenarios, n_buckets=n_buckets)


def random_graph(n, n_edges, seed, scenarios=("A", "B"), max_count=4, n_buckets=16):
    rng = np.random.default_rng(seed)
    edges = {}
    for s in scenarios:
        lst = []
        for a, b in rng.integers(0, n, size=(n_edges, 2)):
            if a != b:
                lst.append((int(a), int(b), int(rng.integers(1, max_count + 1))))
        edges[s] = lst
    return graph_from_edges(n, edges, scenarios, n_buckets)


# -- acceptance reporting ------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    crit = getattr(report, "_criterion", None)
    if crit is None:
        return
    failed = report.failed
    if report.when == "call" or failed or (report.when == "setup" and report.skipped):
        prev = _criteria.get(crit[0])
        status = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        if prev is None or prev[1] == "PASS":
            _criteria[crit[0]] = (crit[1], status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep._criterion = m.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")
