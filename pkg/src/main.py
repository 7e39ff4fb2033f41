import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request, status
from fastapi.responses import JSONResponse

from src.api.routes import router
from src.config import config
from src.models import ErrorResponse

# Configure logging
logging.basicConfig(
    level=config.harness.log_level.upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Manage application lifecycle events"""
    logger.info(f"Starting weighted Leray toolkit API (output root {config.harness.output_root})...")
    yield
    logger.info("Weighted Leray toolkit API shutdown complete")


# Create FastAPI app with lifespan
app = FastAPI(
    title="Weighted Leray Toolkit",
    description="Weighted-L2 Navier-Stokes experiments: energy ledgers, bounds and DSS fixed points",
    version="1.0.0",
    lifespan=lifespan
)

# Include API routes
app.include_router(router)


@app.exception_handler(ValueError)
async def value_error_handler(request: Request, exc: ValueError):
    """Invalid numerical input surfaced from a service"""
    logger.warning(f"Rejected request: {exc}")
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content=ErrorResponse(
            message="Invalid input",
            detail=str(exc)
        ).model_dump()
    )


# Handle exceptions
@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    """Global exception handler for unhandled exceptions"""
    logger.error(f"Unhandled exception: {exc}", exc_info=True)
    return JSONResponse(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        content=ErrorResponse(
            message="Internal server error",
            detail=str(exc)
        ).model_dump()
    )


# Run application
if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "src.main:app",
        host="0.0.0.0",
        port=config.api.port,
        reload=False
    )
