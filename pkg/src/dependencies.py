from functools import lru_cache

from fastapi import Depends

from src.services.energy_ledger_service import EnergyLedgerService
from src.services.experiment_service import ExperimentService
from src.services.field_service import FieldService
from src.services.snapshot_service import SnapshotService
from src.services.weighted_space_service import WeightedSpaceService


def get_field_service() -> FieldService:
    """Get FieldService instance."""
    return FieldService()


def get_weighted_space_service() -> WeightedSpaceService:
    """Get WeightedSpaceService instance."""
    return WeightedSpaceService()


def get_snapshot_service() -> SnapshotService:
    """Get SnapshotService instance."""
    return SnapshotService()


def get_ledger_service(
        weighted_space_service: WeightedSpaceService = Depends(get_weighted_space_service),
        field_service: FieldService = Depends(get_field_service)
) -> EnergyLedgerService:
    """Get EnergyLedgerService instance."""
    return EnergyLedgerService(weighted_space_service, field_service)


@lru_cache(maxsize=1)
def get_experiment_service() -> ExperimentService:
    """Get the shared ExperimentService instance."""
    return ExperimentService()
