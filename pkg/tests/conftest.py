import pytest

from sesm_testutil import motif_data, train_toy


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = item.config._criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, config):
    criteria = config._criteria
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        c = criteria[number]
        status = "PASS" if c["ok"] else "FAIL"
        detail = "; ".join(c["details"])
        terminalreporter.write_line(f"[{status}] criterion {number}: {c['title']}" + (f" ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def toy_data():
    return motif_data()


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    model, trainer = train_toy(toy_data, epochs=6)
    return model
