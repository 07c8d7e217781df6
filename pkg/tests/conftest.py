import numpy as np
import pytest

from feddistill.data import PartitionSpec, generate_corpus, partition_non_iid, split_holdout

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line for the end-of-session acceptance report."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_split():
    corpus = generate_corpus(10, 300, 16, seed=3)
    return split_holdout(corpus, 0.1, seed=3)


@pytest.fixture(scope="session")
def small_devices(small_split):
    train, _ = small_split
    return partition_non_iid(train, PartitionSpec(3, 800, 3, 5, seed=3))
