import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_label(rng, h, w, classes=19, ignore_fraction=0.0):
    data = rng.integers(0, classes, size=(h, w)).astype(np.uint8)
    if ignore_fraction:
        data[rng.random((h, w)) < ignore_fraction] = 255
    return data


ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
