import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

MNIST_DIR = Path(os.environ.get("SPIOPT_MNIST_DIR", "/root/data/mnist"))


@pytest.fixture(scope="session")
def mnist_dir():
    from spiopt.data import find_mnist

    try:
        find_mnist(MNIST_DIR, "train")
        find_mnist(MNIST_DIR, "test")
    except FileNotFoundError:
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set SPIOPT_MNIST_DIR)")
    return MNIST_DIR


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}"
    ACCEPTANCE_LINES.append(line + (f"  [{detail}]" if detail else ""))
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
