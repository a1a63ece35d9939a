import numpy as np
import pytest
import torch

from osad.data import SynthConfig, generate_synthetic_dataset

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in ("criterion_1", "criterion_2", "criterion_3", "criterion_4", "criterion_5",
                 "criterion_6", "criterion_7", "criterion_8", "criterion_9"):
        if mark in report.keywords:
            previous = _ACCEPTANCE.get(mark, "PASS")
            _ACCEPTANCE[mark] = "PASS" if previous == "PASS" and report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for mark in sorted(_ACCEPTANCE, key=lambda m: int(m.split("_")[1])):
        terminalreporter.write_line(f"criterion {mark.split('_')[1]}: {_ACCEPTANCE[mark]}")


def pytest_configure(config):
    for i in range(1, 10):
        config.addinivalue_line("markers", f"criterion_{i}: acceptance criterion {i}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_index(tmp_path_factory):
    return generate_synthetic_dataset(SynthConfig(seed=3), tmp_path_factory.mktemp("synth"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
