import numpy as np
import pytest
from src.models.sequence_models import EventSequence
from src.services.hazard_service import (
    ConstantHazard,
    CumulativeHazardNetwork,
    ExponentialHazard,
    PiecewiseHazard,
)
from src.services.rnn_service import RnnService
from src.services.sequence_service import SequenceService
from src.services.simulation_service import SimulationService
from src.services.training_service import Checkpoint, TrainingService
from src.services.evaluation_service import EvaluationService
from src.utils.random_utils import make_rng

UNITS = 4


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def units():
    return UNITS


@pytest.fixture
def sample_sequence():
    return EventSequence(timestamps=(0.5, 1.0, 2.5, 2.75, 4.0, 6.0, 6.5, 8.0, 9.0, 11.0), t_start=0.0, t_end=11.0)


@pytest.fixture
def poisson_sequence():
    return SimulationService().sim_poisson(1.0, 400, seed=3)


@pytest.fixture
def sequence_service():
    return SequenceService()


@pytest.fixture
def rnn_service():
    return RnnService()


@pytest.fixture
def simulation_service():
    return SimulationService()


@pytest.fixture
def training_service():
    return TrainingService()


@pytest.fixture
def evaluation_service():
    return EvaluationService()


@pytest.fixture
def hazard_models():
    """One small instance of every hazard family"""
    return [
        ConstantHazard(UNITS),
        ExponentialHazard(UNITS),
        PiecewiseHazard(UNITS, bins=8, tau_max=4.0),
        CumulativeHazardNetwork(UNITS, hidden_units=5, hidden_layers=2),
    ]


@pytest.fixture
def unit_rate_checkpoint(rng):
    """Constant-hazard checkpoint whose hazard is exactly 1 for any history"""
    rnn = RnnService().init_params(UNITS, rng).as_dict()
    params = {**rnn, "hazard.v": np.zeros(UNITS), "hazard.b": np.zeros(())}
    return Checkpoint(
        kind="constant",
        hyperparameters=ConstantHazard(UNITS).hyperparameters(),
        depth=2,
        params=params,
    )
