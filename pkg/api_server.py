"""
FastAPI map service
Single-writer gas mapper behind a lock: measurements are inserted with a wildfire,
idle solving runs on request, and marginal maps are served from snapshots.
"""

import asyncio
import logging
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field, ValidationError

sys.path.insert(0, str(Path(__file__).resolve().parent / "mapping"))

from src.gabp_mapping import config  # noqa: E402
from src.gabp_mapping.dynamic import GasMapper  # noqa: E402
from src.gabp_mapping.errors import MappingError, NumericalBreakdown, OracleError  # noqa: E402
from src.gabp_mapping.graph import HyperParams, Measurement  # noqa: E402
from src.gabp_mapping.occupancy import VoxelGrid, VoxelIndex  # noqa: E402
from src.gabp_mapping.scenario import Scenario  # noqa: E402
from backend_cache import cache_instance  # noqa: E402

config.setup_logging()
logger = logging.getLogger(__name__)

app = FastAPI(
    title="Gas Distribution Map Service",
    description="Real-time 3D gas distribution mapping with Gaussian belief propagation on a dynamic factor graph",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=[
        "http://localhost:3000",
        "http://localhost:5173",
        "http://127.0.0.1:3000",
        "http://127.0.0.1:5173",
    ],
    allow_credentials=True,
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["*"],
)


# Pydantic models for request/response
class MeasurementRequest(BaseModel):
    value: float = Field(ge=0)
    timestamp: float
    voxel: Optional[List[int]] = Field(default=None, min_length=3, max_length=3)
    position: Optional[List[float]] = Field(default=None, min_length=3, max_length=3)


class InsertionResponse(BaseModel):
    success: bool
    voxel: List[int]
    node_created: bool
    nodes_created: int
    edges_created: int
    messages_sent: int
    resolve_time_ms: float
    version: int


class SolveRequest(BaseModel):
    max_messages: int = Field(10_000, ge=1)


class SolveResponse(BaseModel):
    success: bool
    messages_sent: int
    max_residual: float
    idle: bool
    version: int


class MarginalResponse(BaseModel):
    voxel: List[int]
    mean: float
    variance: float
    in_graph: bool


class HealthResponse(BaseModel):
    status: str
    timestamp: str
    services: Dict[str, str]


class MapService:
    """Owns the mapper; every access goes through ``lock``."""

    def __init__(self):
        self.lock = asyncio.Lock()
        self.mapper: Optional[GasMapper] = None
        self.started = datetime.now().isoformat()

    def reset(self, mapper: Optional[GasMapper] = None) -> GasMapper:
        if mapper is None:
            if config.SCENARIO_FILE:
                scenario = Scenario.load(config.SCENARIO_FILE)
                mapper = GasMapper(scenario.build_grid(), scenario.hyper(), planar=scenario.planar or None)
            else:
                mapper = GasMapper(VoxelGrid((20, 20, 5)), HyperParams.from_env())
        self.mapper = mapper
        cache_instance.clear()
        logger.info(f"Map service ready on grid {mapper.grid.dims}")
        return mapper

    def get(self) -> GasMapper:
        return self.mapper if self.mapper is not None else self.reset()


service = MapService()


def _fail(e: Exception) -> HTTPException:
    if isinstance(e, (MappingError, ValidationError)):
        logger.warning(f"Rejected request: {e}")
        return HTTPException(status_code=400, detail=str(e))
    logger.error(f"Solver failure: {e}")
    return HTTPException(status_code=500, detail=f"Solver failure: {e}")


@app.get("/")
async def root():
    return {
        "message": "Gas Distribution Map Service",
        "endpoints": {
            "health": "/health",
            "status": "/api/status",
            "measurements": "/api/measurements",
            "solve": "/api/solve",
            "marginal": "/api/marginal/{ix}/{iy}/{iz}",
            "map": "/api/map",
        },
    }


@app.get("/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint"""
    return HealthResponse(
        status="healthy",
        timestamp=datetime.now().isoformat(),
        services={"mapper": "ready" if service.mapper is not None else "idle", "startup_time": service.started},
    )


@app.get("/api/status")
async def status():
    async with service.lock:
        mapper = service.get()
        return {**mapper.snapshot(), "grid": list(mapper.grid.dims), "cache": cache_instance.get_stats()}


@app.post("/api/measurements", response_model=InsertionResponse)
async def insert_measurement(request: MeasurementRequest):
    """Insert one measurement and run its wildfire to completion"""
    async with service.lock:
        mapper = service.get()
        try:
            if request.voxel is not None:
                voxel = VoxelIndex(*request.voxel)
            elif request.position is not None:
                voxel = mapper.grid.voxel_of(request.position)
            else:
                raise HTTPException(status_code=400, detail="Either 'voxel' or 'position' is required")
            m = Measurement(value=request.value, timestamp=request.timestamp, voxel=voxel)
            report = mapper.insert_measurement(m)
        except HTTPException:
            raise
        except (MappingError, ValidationError, NumericalBreakdown) as e:
            raise _fail(e)
        logger.info(f"Inserted z={request.value} at {tuple(voxel)}: {report.messages_sent} messages")
        return InsertionResponse(
            success=True,
            voxel=list(voxel),
            node_created=report.node_created,
            nodes_created=report.nodes_created,
            edges_created=report.edges_created,
            messages_sent=report.messages_sent,
            resolve_time_ms=report.resolve_time_ns / 1e6,
            version=mapper.graph.version,
        )


@app.post("/api/solve", response_model=SolveResponse)
async def solve(request: SolveRequest):
    """Spend a residual-propagation budget"""
    async with service.lock:
        mapper = service.get()
        try:
            sent = mapper.converge(max_messages=request.max_messages)
        except NumericalBreakdown as e:
            raise _fail(e)
        return SolveResponse(
            success=True,
            messages_sent=sent,
            max_residual=mapper.solver.max_residual(),
            idle=sent < request.max_messages,
            version=mapper.graph.version,
        )


@app.get("/api/marginal/{ix}/{iy}/{iz}", response_model=MarginalResponse)
async def marginal(ix: int, iy: int, iz: int):
    async with service.lock:
        mapper = service.get()
        voxel = VoxelIndex(ix, iy, iz)
        if not mapper.grid.in_bounds(voxel):
            raise HTTPException(status_code=404, detail=f"voxel {tuple(voxel)} outside the grid")
        try:
            mean, variance = mapper.marginal(voxel)
        except NumericalBreakdown as e:
            raise _fail(e)
        return MarginalResponse(voxel=list(voxel), mean=mean, variance=variance, in_graph=voxel in mapper.graph)


@app.get("/api/map")
async def marginal_map() -> Dict[str, Any]:
    """
    Marginal map of every node, cached per graph version and message count.

    While an insertion or solve holds the mapper, the most recent cached
    snapshot is returned at once with ``stale`` set instead of waiting.
    """
    if service.lock.locked():
        latest = cache_instance.latest()
        if latest is not None:
            return {**latest, "cached": True, "stale": True}
    async with service.lock:
        mapper = service.get()
        key = cache_instance.key_for(mapper.graph.version, mapper.solver.messages_sent)
        cached = cache_instance.get(key)
        if cached is not None:
            return {**cached, "cached": True, "stale": False}
        started = time.perf_counter()
        try:
            marginals = mapper.marginals()
        except (NumericalBreakdown, OracleError) as e:
            raise _fail(e)
        snapshot = {
            "version": mapper.graph.version,
            "messages_sent": mapper.solver.messages_sent,
            "dims": list(mapper.grid.dims),
            "nodes": [
                {"voxel": list(v), "mean": mu, "variance": var} for v, (mu, var) in sorted(marginals.items())
            ],
            "timestamp": datetime.now().isoformat(),
        }
        cache_instance.put(key, snapshot)
        logger.debug(f"Map snapshot of {len(marginals)} nodes in {time.perf_counter() - started:.3f}s")
        return {**snapshot, "cached": False, "stale": False}


if __name__ == "__main__":
    logger.info(f"Starting map service on http://{config.API_HOST}:{config.API_PORT}")
    uvicorn.run("api_server:app", host=config.API_HOST, port=config.API_PORT, log_level="info")
