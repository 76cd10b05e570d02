import functools

import pytest

# criterion number -> (title, passed, detail), filled by tests decorated with ``criterion``
CRITERIA = {}


def criterion(number, title):
    """Record the outcome of an acceptance test so the session prints one line per criterion."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as e:
                if isinstance(e, pytest.skip.Exception):
                    raise
                CRITERIA[number] = (title, False, f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
                raise
            CRITERIA[number] = (title, True, detail or "")

        return run

    return wrap


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}  {detail}")
