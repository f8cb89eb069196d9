import pytest


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for an acceptance criterion, then assert it.

    ``checks`` maps a short description to a boolean.
    """

    def emit(number, title, checks, detail=""):
        failed = [name for name, ok in checks.items() if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {number}: {status} {title}"
        if detail:
            line += f" | {detail}"
        if failed:
            line += f" | failed: {'; '.join(failed)}"
        with capsys.disabled():
            print("\n" + line)
        assert not failed, line

    return emit
