import pytest

TINY_INI = """
[model]
range_bins = 16
azimuth_bins = 16
c_in = 4
dim = 4
n_queries = 2
n_blocks = 1
frames = 2

[sim]
n_frames = 2
n_objects = 1, 3

[train]
epochs = 3
patience = 10
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/SKIP line for an acceptance criterion."""

    def record(criterion: str, passed: bool | None, detail: str) -> bool:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        ACCEPTANCE[criterion] = (status, detail)
        print(f"{criterion} {status}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {status}: {detail}")
