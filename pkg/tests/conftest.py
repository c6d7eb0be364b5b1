import contextlib
import time

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """``with criterion(3, "title"):`` records one PASS/FAIL line for the summary."""
    results = request.config.stash[_RESULTS]

    @contextlib.contextmanager
    def record(number, title):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results.append((number, f"FAIL  [{number}] {title} ({time.perf_counter() - start:.1f}s): {msg}"))
            raise
        results.append((number, f"PASS  [{number}] {title} ({time.perf_counter() - start:.1f}s)"))

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results, key=lambda r: r[0]):
            terminalreporter.write_line(line)
