import numpy as np
import pytest

from ptlf.config import DatasetSpec, RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """A fast stream: 3 tasks, 4x4x1 images, small network."""
    return RunConfig(
        objective="barlow_twins",
        epochs=4,
        batch=16,
        buffer_capacity=32,
        probe_batches=2,
        knn_k=5,
        backbone_layers=4,
        width=12,
        k_f=0.5,
        dataset=DatasetSpec(tasks=3, height=4, width=4, channels=1, train_per_class=20, test_per_class=10),
    )


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n][1])
