import pytest

from teamdp.coordinated import solve_coordinated
from teamdp.model import ModelParams

SMALL_CAP = 20

_solutions: dict = {}


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def small_coordinated():
    """Cached coordinator solutions on a small truncation."""

    def get(c=0.3, mode="bayes", cap=SMALL_CAP, **overrides):
        key = (c, mode, cap, tuple(sorted(overrides.items())))
        if key not in _solutions:
            _solutions[key] = solve_coordinated(ModelParams(c=c, **overrides), cap, cap, mode)
        return _solutions[key]

    return get


# one summary line per acceptance criterion

_acceptance: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _acceptance[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, verdict = _acceptance[number]
        terminalreporter.write_line(f"criterion {number} [{verdict}] {title}")
