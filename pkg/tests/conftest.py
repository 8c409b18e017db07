"""Session-wide desk-scale artifacts shared by the planner and acceptance tests.

Building them takes several minutes, so they are created once per session.
"""
import pytest

from dyntube.datagen import DatagenConfig, error_quantile, generate_dataset, split_dataset
from dyntube.neural import TrainConfig
from dyntube.tube import TubeModelConfig, train_tube_model

TRAIN = dict(epochs=20, learning_rate=3e-3, windows_per_epoch=40_000)


@pytest.fixture(scope="session")
def fast_data():
    """512 environments x 4 references of 20 s at v_bar=0.2, split 80/20."""
    ds = generate_dataset(512, 4, DatagenConfig(), master_seed=2)
    train, hold = split_dataset(ds, 0.2, 0)
    return ds, train, hold


@pytest.fixture(scope="session")
def slow_data():
    cfg = DatagenConfig()
    cfg.reference.v_bar = 0.04
    return generate_dataset(128, 4, cfg, master_seed=3)


@pytest.fixture(scope="session")
def quantiles(fast_data, slow_data):
    return {"fast": error_quantile(fast_data[0], 0.9), "slow": error_quantile(slow_data, 0.9)}


@pytest.fixture(scope="session")
def tube_model(fast_data):
    _, train, _ = fast_data
    return train_tube_model(train, TubeModelConfig(H=25, mode="recursive"), TrainConfig(**TRAIN))


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: dict = {}


def report(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(CRITERIA[n])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
