"""
Voxel occupancy map.

The grid is a dense boolean array indexed ``[ix, iy, iz]``. Voxels are addressed
by integer lattice coordinates; resolution and origin live on the grid. A pair of
lattice-adjacent voxels is blocked when either of them is occupied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import AdjacencyError, OutOfBoundsError, ScenarioError

logger = logging.getLogger(__name__)

OCCGRID_MAGIC = "OCCGRID v1"

OFFSETS_3D: tuple[tuple[int, int, int], ...] = (
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
)
OFFSETS_2D: tuple[tuple[int, int, int], ...] = OFFSETS_3D[:4]


class VoxelIndex(NamedTuple):
    ix: int
    iy: int
    iz: int = 0

    def offset(self, d: Sequence[int]) -> "VoxelIndex":
        return VoxelIndex(self.ix + d[0], self.iy + d[1], self.iz + d[2])


def are_adjacent(a: VoxelIndex, b: VoxelIndex) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) + abs(a[2] - b[2]) == 1


@dataclass
class VoxelGrid:
    dims: tuple[int, int, int]
    resolution: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    occupancy: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ScenarioError(f"grid dims must be three positive integers, got {self.dims}")
        if not self.resolution > 0:
            raise ScenarioError(f"grid resolution must be positive, got {self.resolution}")
        self.origin = tuple(float(o) for o in self.origin)
        if self.occupancy is None:
            self.occupancy = np.zeros(self.dims, dtype=bool)
        else:
            self.occupancy = np.asarray(self.occupancy, dtype=bool)
            if self.occupancy.shape != self.dims:
                raise ScenarioError(f"occupancy shape {self.occupancy.shape} does not match dims {self.dims}")

    @property
    def planar(self) -> bool:
        return self.dims[2] == 1

    @property
    def size(self) -> int:
        return int(self.occupancy.size)

    def offsets(self, planar: bool | None = None) -> tuple[tuple[int, int, int], ...]:
        if planar is None:
            planar = self.planar
        return OFFSETS_2D if planar else OFFSETS_3D

    def in_bounds(self, v: Sequence[int]) -> bool:
        return 0 <= v[0] < self.dims[0] and 0 <= v[1] < self.dims[1] and 0 <= v[2] < self.dims[2]

    def _check_bounds(self, v: Sequence[int]) -> None:
        for axis, value, n in zip("xyz", v, self.dims):
            if not 0 <= value < n:
                raise OutOfBoundsError(f"voxel {tuple(v)}", axis, value, (0, n))

    def is_occupied(self, v: Sequence[int]) -> bool:
        self._check_bounds(v)
        return bool(self.occupancy[v[0], v[1], v[2]])

    def is_blocked(self, a: VoxelIndex, b: VoxelIndex) -> bool:
        """True iff either endpoint of the adjacent pair is occupied."""
        if not are_adjacent(a, b):
            raise AdjacencyError(a, b)
        return self.is_occupied(a) or self.is_occupied(b)

    def neighbors(self, v: VoxelIndex, planar: bool | None = None) -> Iterator[VoxelIndex | None]:
        """Lattice neighbours of ``v``; ``None`` for directions leaving the grid."""
        for d in self.offsets(planar):
            n = VoxelIndex(v[0] + d[0], v[1] + d[1], v[2] + d[2])
            yield n if self.in_bounds(n) else None

    def free_voxels(self) -> list[VoxelIndex]:
        return [VoxelIndex(*map(int, idx)) for idx in np.argwhere(~self.occupancy)]

    # world <-> voxel
    def voxel_of(self, point: Sequence[float]) -> VoxelIndex:
        idx = []
        for axis, p, o, n in zip("xyz", point, self.origin, self.dims):
            i = math.floor((p - o) / self.resolution)
            if not 0 <= i < n:
                raise OutOfBoundsError(f"point {tuple(point)}", axis, p, (o, o + n * self.resolution))
            idx.append(i)
        return VoxelIndex(*idx)

    def world_of(self, v: Sequence[int]) -> tuple[float, float, float]:
        """Centre of voxel ``v`` in world coordinates."""
        return tuple(o + (i + 0.5) * self.resolution for o, i in zip(self.origin, v))

    def centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axes = [o + (np.arange(n) + 0.5) * self.resolution for o, n in zip(self.origin, self.dims)]
        return np.meshgrid(*axes, indexing="ij")

    def contains(self, point: Sequence[float]) -> bool:
        return all(o <= p < o + n * self.resolution for p, o, n in zip(point, self.origin, self.dims))

    # mutation
    def set_occupied(self, v: VoxelIndex, occupied: bool = True) -> None:
        self._check_bounds(v)
        self.occupancy[v[0], v[1], v[2]] = occupied

    def add_box(self, lo: Sequence[int], hi: Sequence[int]) -> None:
        """Mark the inclusive voxel box ``lo..hi`` occupied (clipped to the grid)."""
        sl = tuple(slice(max(0, a), min(n, b + 1)) for a, b, n in zip(lo, hi, self.dims))
        self.occupancy[sl] = True

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.resolution, self.origin, self.occupancy.copy())


def read_occgrid(path: str | Path) -> VoxelGrid:
    """Load an ``OCCGRID v1`` file: four ASCII header lines then the packed bit payload."""
    data = Path(path).read_bytes()
    header: dict[str, list[str]] = {}
    pos = 0
    for expected in ("magic", "dims", "resolution", "origin"):
        end = data.find(b"\n", pos)
        if end < 0:
            raise ScenarioError(f"{path}: truncated header")
        line = data[pos:end].decode("ascii").strip()
        pos = end + 1
        if expected == "magic":
            if line != OCCGRID_MAGIC:
                raise ScenarioError(f"{path}: expected '{OCCGRID_MAGIC}', got '{line}'")
            continue
        key, *values = line.split()
        if key != expected:
            raise ScenarioError(f"{path}: expected '{expected}' header line, got '{line}'")
        header[key] = values
    try:
        dims = tuple(int(v) for v in header["dims"])
        resolution = float(header["resolution"][0])
        origin = tuple(float(v) for v in header["origin"])
    except (ValueError, IndexError) as e:
        raise ScenarioError(f"{path}: malformed header ({e})") from e
    n = dims[0] * dims[1] * dims[2]
    payload = np.frombuffer(data[pos:], dtype=np.uint8)
    if payload.size != math.ceil(n / 8):
        raise ScenarioError(f"{path}: payload has {payload.size} bytes, expected {math.ceil(n / 8)}")
    bits = np.unpackbits(payload, bitorder="little")[:n].astype(bool)
    # bit index ix + iy*nx + iz*nx*ny is Fortran order over (nx, ny, nz)
    occupancy = bits.reshape(dims, order="F")
    logger.debug(f"Loaded occupancy grid {dims} from {path}")
    return VoxelGrid(dims, resolution, origin, occupancy)


def write_occgrid(grid: VoxelGrid, path: str | Path) -> Path:
    path = Path(path)
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    header = (
        f"{OCCGRID_MAGIC}\n"
        f"dims {nx} {ny} {nz}\n"
        f"resolution {grid.resolution!r}\n"
        f"origin {ox!r} {oy!r} {oz!r}\n"
    ).encode("ascii")
    bits = grid.occupancy.reshape(-1, order="F").astype(np.uint8)
    path.write_bytes(header + np.packbits(bits, bitorder="little").tobytes())
    return path
