import re

from hypothesis import HealthCheck, settings

# single slow core: wall-clock based checks are noise here
settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_verdicts: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    n = int(m.group(1))
    if n in _verdicts and _verdicts[n][1] == "FAIL":
        return
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _verdicts[n] = (m.group(2).replace("_", " "), status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n, (name, status, detail) in sorted(_verdicts.items()):
        terminalreporter.write_line(f"{status} criterion {n:2d} {name}" + (f": {detail}" if detail else ""))
