import os

import pytest

LINES = []


class Recorder:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, out):
        self.out = out

    def line(self, name: str, ok: bool, detail: str, runtime: float | None = None,
             limit: float | None = None) -> bool:
        if limit is not None and runtime is not None and runtime >= limit:
            ok = False
            detail += f"; runtime {runtime:.1f}s over {limit:g}s"
        t = f" [{runtime:.1f}s]" if runtime is not None else ""
        LINES.append(f"{name} {'PASS' if ok else 'FAIL'}: {detail}{t}")
        print(LINES[-1])
        return ok


@pytest.fixture(scope="session")
def acceptance(tmp_path_factory):
    out = os.environ.get("ACCEPTANCE_OUT") or str(tmp_path_factory.mktemp("acceptance"))
    os.makedirs(out, exist_ok=True)
    return Recorder(out)


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
