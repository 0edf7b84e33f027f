"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

import pytest

ACCEPTANCE_LINES = {}


class CriterionReport:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.checks = []

    def check(self, label, ok, detail=""):
        self.checks.append((label, bool(ok), detail))

    @property
    def passed(self):
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)

    def lines(self):
        head = f"criterion {self.number} ({self.title}): {'PASS' if self.passed else 'FAIL'}"
        out = [head]
        for label, ok, detail in self.checks:
            out.append(f"    [{'ok' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else ""))
        return out

    def finish(self):
        ACCEPTANCE_LINES[self.number] = self.lines()
        print("\n".join(self.lines()))
        failed = [f"{label} ({detail})" for label, ok, detail in self.checks if not ok]
        assert not failed, "; ".join(failed)


@pytest.fixture
def criterion():
    made = []

    def make(number, title):
        rep = CriterionReport(number, title)
        made.append(rep)
        return rep

    yield make
    for rep in made:
        if rep.number not in ACCEPTANCE_LINES:
            ACCEPTANCE_LINES[rep.number] = rep.lines()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        for line in ACCEPTANCE_LINES[number]:
            terminalreporter.write_line(line)
