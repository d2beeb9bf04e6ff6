from contextlib import contextmanager

import pytest

from mapdiff.training import gradcheck

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def gradcheck_report():
    return gradcheck()


@pytest.fixture(scope="session")
def criterion():
    """``with criterion(3, "title") as note:`` records PASS/FAIL plus whatever lands in ``note``."""

    @contextmanager
    def check(number, title):
        note = {}
        try:
            yield note
        except BaseException as err:
            _ACCEPTANCE[number] = (False, title, note, f"{type(err).__name__}: {str(err).splitlines()[0] if str(err) else ''}")
            raise
        _ACCEPTANCE[number] = (True, title, note, "")

    return check


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, title, note, err = _ACCEPTANCE[number]
        detail = ", ".join(f"{k}={v}" for k, v in note.items())
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
        if detail:
            line += f" [{detail}]"
        if err:
            line += f" ({err})"
        terminalreporter.write_line(line)
