import numpy as np
import pytest

from betacat.calibration import OptimizerConfig, calibrate
from betacat.model import ItemBank, ItemParams
from betacat.simulation import TruthSpec, default_battery, generate_dataset, unit_meta


@pytest.fixture
def symmetric_item():
    return ItemParams("S", alpha=1.0, beta=0.0, omega=0.0, gamma1=-2.0, gamma2=2.0, median_minutes=1.0)


@pytest.fixture(scope="session")
def battery():
    return default_battery()


@pytest.fixture(scope="session")
def small_dataset(battery):
    return generate_dataset(TruthSpec(battery, 300, seed=11))


@pytest.fixture(scope="session")
def small_fit(battery, small_dataset):
    data, _ = small_dataset
    return calibrate(data, meta=unit_meta(battery))


@pytest.fixture
def toy_bank():
    """Three items where the most informative one is also by far the slowest."""
    return ItemBank(
        (
            ItemParams("A", alpha=2.0, beta=0.0, omega=1.0, gamma1=-2.5, gamma2=2.5, median_minutes=20.0),
            ItemParams("B", alpha=1.0, beta=0.5, omega=1.0, gamma1=-2.5, gamma2=2.5, median_minutes=2.0),
            ItemParams("C", alpha=0.5, beta=-0.5, omega=0.5, gamma1=-2.0, gamma2=2.0, median_minutes=4.0),
        )
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fast_config():
    return OptimizerConfig(compute_se=False)
