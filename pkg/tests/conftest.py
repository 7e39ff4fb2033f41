import json
import math
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pytest
from fastapi.testclient import TestClient

import src.dependencies
import src.main
from src.models import (
    AdvectionMode,
    EnergyLedgerEntry,
    ExperimentConfig,
    ExperimentKind,
    ExperimentReport,
    FieldRank,
    FlowState,
    ForcingKind,
    ForcingSpec,
    GridSpec,
    InitialDataKind,
    MollifierSpec,
    SnapshotHeader,
    SolverConfig,
    Trajectory,
    WeightSpec,
)
from src.services.dss_engine_service import DSSEngineService
from src.services.dynamics_service import DynamicsService
from src.services.energy_ledger_service import EnergyLedgerService
from src.services.experiment_service import ExperimentService
from src.services.field_service import FieldService
from src.services.grid_service import GridService
from src.services.snapshot_service import SnapshotService
from src.services.spectral_service import SpectralService
from src.services.weighted_space_service import WeightedSpaceService


# ====== Test Data Fixtures ======

@pytest.fixture
def test_data():
    """Central fixture providing constants used across tests."""
    return {
        "seed": 7,
        "lam": 2.0,
        "gamma": 2.0,
        "ball_norm_sq": 4.0 * math.pi * (1.5 - 2.0 * math.log(2.0)),
        "dt": 0.01,
        "T": 0.04,
    }


@pytest.fixture
def small_grid():
    """16^3 nodes on a box of half-width 4 (h = 0.5)."""
    return GridSpec(n=16, half_width=4.0)


@pytest.fixture
def grid32():
    """32^3 nodes on a box of half-width 4 (h = 0.25)."""
    return GridSpec(n=32, half_width=4.0)


@pytest.fixture
def weight(test_data):
    return WeightSpec(delta=test_data["gamma"])


@pytest.fixture
def solver_config(test_data):
    """Unmollified self-advection, four steps."""
    return SolverConfig(dt=test_data["dt"], T=test_data["T"], eps=0.0, advection=AdvectionMode.SELF)


@pytest.fixture
def ledger_entries():
    """Three hand-made ledger rows with positive slacks."""
    return [
        EnergyLedgerEntry(t=0.01 * k, lhs_energy=1.0 - 0.1 * k, dissipation_cum=0.15 * k,
                          term_weight_flux=0.0, term_transport=0.0, term_pressure=0.0,
                          term_forcing_a=0.0, term_forcing_b=0.0, slack_A=0.01 * k,
                          slack_B=0.5, tol_disc=0.1)
        for k in range(3)
    ]


# ====== Service Fixtures ======

@pytest.fixture
def grid_service(small_grid):
    return GridService.for_grid(small_grid)


@pytest.fixture
def spectral_service(small_grid):
    return SpectralService.for_grid(small_grid)


@pytest.fixture
def field_service():
    return FieldService()


@pytest.fixture
def weighted_space_service():
    return WeightedSpaceService()


@pytest.fixture
def dynamics_service(field_service, weighted_space_service):
    return DynamicsService(field_service, weighted_space_service)


@pytest.fixture
def ledger_service(weighted_space_service, field_service):
    return EnergyLedgerService(weighted_space_service, field_service)


@pytest.fixture
def dss_engine_service(dynamics_service, ledger_service, field_service):
    return DSSEngineService(dynamics_service, ledger_service, field_service)


@pytest.fixture
def snapshot_service():
    return SnapshotService()


@pytest.fixture
def experiment_service(field_service, weighted_space_service, dynamics_service, ledger_service,
                       dss_engine_service, snapshot_service):
    return ExperimentService(field_service, weighted_space_service, dynamics_service, ledger_service,
                             dss_engine_service, snapshot_service)


@pytest.fixture
def small_config(tmp_path):
    """Factory for experiment configs on the small grid writing under tmp_path."""
    def make(experiment: str, **overrides):
        payload = {
            "experiment": experiment,
            "grid": {"n": 16, "half_width": 4.0},
            "solver": {"dt": 0.01, "T": 0.03, "eps": 0.5},
            "output_dir": str(tmp_path / experiment),
        }
        payload.update(overrides)
        return ExperimentConfig.model_validate(payload)

    return make


# ====== HTTP Related Fixtures ======

@pytest.fixture
def mock_experiment_service():
    """ExperimentService mock returning a passing operators report."""
    mock = MagicMock(spec=ExperimentService)
    mock.run_experiment.return_value = ExperimentReport(experiment=ExperimentKind.OPERATORS,
                                                        output_dir="runs/operators")
    return mock


@pytest.fixture
def mock_snapshot_service():
    mock = MagicMock(spec=SnapshotService)
    mock.snapshot_info.return_value = SnapshotHeader(magic="WLRY", version=1, shape=(16, 16, 16),
                                                     half_width=4.0, rank=FieldRank.VECTOR, time=0.5)
    return mock


@pytest.fixture
def app_with_mocked_deps(mock_experiment_service, mock_snapshot_service):
    """The FastAPI app with the experiment and snapshot services mocked."""
    app = src.main.app
    app.dependency_overrides[src.dependencies.get_experiment_service] = lambda: mock_experiment_service
    app.dependency_overrides[src.dependencies.get_snapshot_service] = lambda: mock_snapshot_service

    yield app

    # Restore original dependencies
    app.dependency_overrides.clear()


@pytest.fixture
def test_client(app_with_mocked_deps):
    """Create a test client for the FastAPI app."""
    with TestClient(app_with_mocked_deps) as client:
        yield client
