import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_STATUS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}
_criteria: dict[int, dict] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "slow: takes minutes")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.outcome != "passed"):
        return
    number, title = mark.args
    status = _STATUS[rep.outcome]
    if status == "SKIP":
        details = [str(rep.longrepr[2]) if isinstance(rep.longrepr, tuple) else "skipped"]
    else:
        details = [v for k, v in item.user_properties if k == "detail"]
    if status == "FAIL":
        details.append(str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "failed")
    entry = _criteria.setdefault(number, {"title": title, "status": "PASS", "details": []})
    if _RANK[status] > _RANK[entry["status"]]:
        entry["status"] = status
    entry["details"].extend(details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = "; ".join(d.splitlines()[0] for d in e["details"] if d)
        terminalreporter.write_line(f"criterion {number:>2} {e['status']}: {e['title']}" + (f" ({detail})" if detail else ""))
