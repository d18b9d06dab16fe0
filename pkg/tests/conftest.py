import numpy as np
import pytest

from agcrn.model import ModelConfig

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(label: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((label, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_nodes=5, hidden=8, embed_dim=3, lookback=4, horizon=2, layers=2)
