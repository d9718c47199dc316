"""Dense direct solver used as the reference for GaBP results and as the dense-direct baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import config
from .errors import MappingError, OracleError
from .graph import FactorGraph
from .occupancy import VoxelIndex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenseSystem:
    voxels: tuple[VoxelIndex, ...]
    lam: np.ndarray
    g: np.ndarray

    @property
    def size(self) -> int:
        return len(self.voxels)

    def row(self, voxel: VoxelIndex) -> int:
        return self.index[voxel]

    @property
    def index(self) -> dict[VoxelIndex, int]:
        return {v: i for i, v in enumerate(self.voxels)}


def assemble(graph: FactorGraph) -> DenseSystem:
    """Dense (Lambda, g) from the graph records, rows in lexicographic voxel order."""
    if not graph.nodes:
        raise MappingError("cannot assemble an empty graph")
    voxels = tuple(sorted(graph.nodes))
    if len(voxels) > config.DENSE_CAP:
        logger.warning(f"Dense system of {len(voxels)} variables exceeds the cap of {config.DENSE_CAP}")
    index = {v: i for i, v in enumerate(voxels)}
    n = len(voxels)
    lam = np.zeros((n, n))
    g = np.empty(n)
    for v, i in index.items():
        node = graph.nodes[v]
        lam[i, i] = node.self_precision
        g[i] = node.information
    for edge in graph.edges.values():
        i, j = index[edge.a], index[edge.b]
        lam[i, j] = lam[j, i] = -edge.coupling
    return DenseSystem(voxels, lam, g)


def _factor(system: DenseSystem):
    try:
        return linalg.cho_factor(system.lam, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise OracleError(f"Cholesky factorisation of {system.size}x{system.size} system failed: {e}") from e


def solve_map(system: DenseSystem) -> np.ndarray:
    """mu = Lambda^-1 g via Cholesky; the infinity-norm residual is checked against g."""
    mu = linalg.cho_solve(_factor(system), system.g)
    res = np.max(np.abs(system.lam @ mu - system.g), initial=0.0)
    scale = np.max(np.abs(system.g), initial=0.0)
    if res > 1e-10 * scale and res > np.finfo(float).tiny:
        raise OracleError(f"dense solve residual {res:.3e} exceeds tolerance for |g|={scale:.3e}")
    return mu


def solve_map_inverse(system: DenseSystem) -> np.ndarray:
    """Independent solve through the explicit inverse, for cross-checking ``solve_map``."""
    try:
        return linalg.inv(system.lam) @ system.g
    except linalg.LinAlgError as e:
        raise OracleError(str(e)) from e


def marginal_variances(system: DenseSystem) -> np.ndarray:
    """Diagonal of Lambda^-1."""
    inv = linalg.cho_solve(_factor(system), np.eye(system.size))
    return np.diag(inv).copy()


def solve_marginals(graph: FactorGraph) -> dict[VoxelIndex, tuple[float, float]]:
    system = assemble(graph)
    mu = solve_map(system)
    var = marginal_variances(system)
    return {v: (float(mu[i]), float(var[i])) for i, v in enumerate(system.voxels)}
