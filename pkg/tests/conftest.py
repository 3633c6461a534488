import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: (number, title, passed, detail, seconds, bound)."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, title, passed, detail, seconds, bound=None):
        timing = f"{seconds:.2f}s" + (f" < {bound:g}s" if bound is not None else "")
        status = "PASS" if passed and (bound is None or seconds < bound) else "FAIL"
        lines.append((number, f"criterion {number:2d} {status}  {title}: {detail} [{timing}]"))
        return status == "PASS"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
