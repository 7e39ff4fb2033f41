from typing import Any, Dict

from fastapi import APIRouter, Body, Depends, HTTPException, Query, status
from starlette.concurrency import run_in_threadpool

from src.dependencies import get_experiment_service, get_ledger_service, get_snapshot_service
from src.models import ExperimentReport, GronwallInput, GronwallResult, LedgerVerification, SnapshotHeader
from src.services.energy_ledger_service import EnergyLedgerService
from src.services.experiment_service import ConfigError, ExperimentService
from src.services.snapshot_service import SnapshotService

router = APIRouter(prefix="/api")


@router.get("/health")
async def health() -> Dict[str, str]:
    """Liveness check."""
    return {"status": "ok"}


@router.post("/experiments", response_model=ExperimentReport)
async def run_experiment(
        payload: Dict[str, Any] = Body(...),
        experiment_service: ExperimentService = Depends(get_experiment_service)
):
    """Validate an experiment config, run it and return its report."""
    try:
        cfg = experiment_service.parse_config(payload)
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))

    return await run_in_threadpool(experiment_service.run_experiment, cfg)


@router.get("/snapshots/info", response_model=SnapshotHeader)
async def snapshot_info(
        path: str = Query(...),
        snapshot_service: SnapshotService = Depends(get_snapshot_service)
):
    """Read the header of a snapshot file."""
    try:
        return snapshot_service.snapshot_info(path)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    except RuntimeError as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))


@router.post("/ledgers/verify")
async def verify_ledger(
        path: str = Body(..., embed=True),
        experiment_service: ExperimentService = Depends(get_experiment_service)
) -> Dict[str, Any]:
    """Re-check the slacks of a ledger CSV written by an earlier run."""
    try:
        result: LedgerVerification = experiment_service.verify_ledger(path)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    except RuntimeError as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))

    return {**result.model_dump(), "passed": result.passed}


@router.post("/bounds/gronwall", response_model=GronwallResult)
async def gronwall_bound(
        inp: GronwallInput,
        ledger_service: EnergyLedgerService = Depends(get_ledger_service)
):
    """Horizon T1 and bound of the cubic Gronwall lemma."""
    return ledger_service.gronwall_T1(inp)
