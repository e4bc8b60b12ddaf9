import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def igso3_table():
    from trajlab.igso3 import IGSO3Table

    return IGSO3Table()


@pytest.fixture(scope="session")
def schedule():
    from trajlab.schedule import NoiseSchedule

    return NoiseSchedule()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
