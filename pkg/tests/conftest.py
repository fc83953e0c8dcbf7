import pytest

# criterion number -> {"title", "detail", "outcome"}
ACCEPTANCE: dict[int, dict] = {}


def _entry(item) -> dict | None:
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return None
    number, title = marker.args
    return ACCEPTANCE.setdefault(number, {"title": title, "detail": "", "outcome": "NOT RUN"})


@pytest.fixture
def criterion(request) -> dict:
    """Entry of the current acceptance criterion; tests put their measured numbers in ``detail``."""
    return _entry(request.node)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["outcome"] = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        e = ACCEPTANCE[number]
        terminalreporter.write_line(f"ACCEPTANCE {number:2d} {e['outcome']:4s}  {e['title']}: {e['detail']}")
