from collections import defaultdict

import pytest

_RESULTS = defaultdict(list)


@pytest.fixture
def criterion():
    """Record ``(number, part, ok, detail)`` for the acceptance summary."""
    def record(number, part, ok, detail=""):
        _RESULTS[number].append((part, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        parts = _RESULTS[number]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}={'ok' if ok else 'FAIL'}" + (f" ({d})" if d else "")
                           for p, ok, d in parts)
        tr.write_line(f"criterion {number:>2}: {verdict}  {detail}")
