"""Node distributions for the benchmark geometries.

Generates scattered-node representations of the lid-driven cavity (2D and 3D
half-domain) and the blocked channel, tags every node with its boundary
condition type, and answers k-nearest-neighbour queries through a uniform
spatial-bin index.

Conventions: coordinates are nondimensional (x, y[, z]), velocity components
(u, v[, w]). Node ids are row-major with x fastest, so id 0 is the
(0, 0[, 0]) corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class GeometryError(ValueError):
    """Raised for inconsistent geometry specifications."""


class TagKind(IntEnum):
    INTERIOR = 0
    WALL = 1
    MOVING_LID = 2
    INLET = 3
    OUTLET = 4
    SYMMETRY_PLANE = 5


@dataclass(frozen=True)
class BoundaryTag:
    """Boundary condition type of a single node.

    velocity: imposed velocity for MOVING_LID nodes.
    profile:  inlet profile id ("parabolic") for INLET nodes.
    axis:     normal axis index for SYMMETRY_PLANE nodes.
    """

    kind: TagKind
    velocity: tuple[float, ...] | None = None
    profile: str | None = None
    axis: int | None = None


@dataclass(frozen=True)
class GridSpec:
    """Tensor-grid node counts per axis plus the stretching rule."""

    counts: tuple[int, ...]
    stretching: str = "uniform"  # "uniform" | "tanh"

    def __post_init__(self):
        if len(self.counts) not in (2, 3):
            raise GeometryError(f"counts must be 2D or 3D, got {self.counts}")
        if any(int(c) < 3 for c in self.counts):
            raise GeometryError(f"each axis count must be >= 3, got {self.counts}")
        if self.stretching not in ("uniform", "tanh"):
            raise GeometryError(f"unknown stretching {self.stretching!r}")


@dataclass(frozen=True)
class ChannelGeom:
    """Channel with a rectangular floor-mounted obstacle.

    Lengths are in units of the channel height H. Defaults give equal grid
    spacing in both directions on the standard 361x21 grid.
    """

    height: float = 1.0
    obstacle_height: float = 0.5
    obstacle_length: float = 0.5
    obstacle_offset: float = 4.0  # x of the obstacle leading edge
    length: float = 18.0

    def __post_init__(self):
        if self.obstacle_height >= self.height:
            raise GeometryError(
                f"obstacle height {self.obstacle_height} must be < channel height {self.height}"
            )
        if self.obstacle_height <= 0 or self.obstacle_length <= 0:
            raise GeometryError("obstacle dimensions must be positive")
        if self.obstacle_offset < 0 or self.obstacle_offset + self.obstacle_length > self.length:
            raise GeometryError("obstacle footprint extends outside the channel")

    @property
    def step_height(self) -> float:
        """Reference length H - h."""
        return self.height - self.obstacle_height

    @property
    def obstacle_rear(self) -> float:
        return self.obstacle_offset + self.obstacle_length


def stretch_coordinate(xr):
    """Map a uniform coordinate in [0, 1] onto the wall-clustered grid.

    x = (1/2) * (1 + tanh(2*xr - 1) / tanh(1)); monotone, fixes 0, 1/2, 1.
    Accepts scalars or arrays.
    """
    xr_arr = np.asarray(xr, dtype=float)
    if np.any(xr_arr < 0.0) or np.any(xr_arr > 1.0):
        raise ValueError(f"stretch_coordinate input must lie in [0, 1], got {xr}")
    out = 0.5 * (1.0 + np.tanh(2.0 * xr_arr - 1.0) / math.tanh(1.0))
    return float(out) if np.isscalar(xr) or out.ndim == 0 else out


def _axis_coords(n: int, stretching: str, upper: float = 1.0) -> np.ndarray:
    """Node coordinates along one axis of [0, upper].

    For upper < 1 the stretched map is evaluated on [0, upper] of the unit
    reference axis, i.e. the half-domain keeps the clustering the full domain
    would have near its walls.
    """
    xr = np.linspace(0.0, upper, n)
    if stretching == "tanh":
        return stretch_coordinate(xr)
    return xr


class NodeSet:
    """Immutable scattered node set with boundary tags.

    positions:        (N, dim) float array.
    tags:             per-node BoundaryTag.
    structured_shape: (Nx, Ny[, Nz]) when the set is a full tensor grid.
    normals:          (N, dim) outward unit normals, zero at interior nodes;
                      normalized face-normal sums on edges and corners.
    bc_velocity:      (N, dim) imposed velocity at Dirichlet boundary nodes.
    grid_index:       (N, dim) integer lattice indices when grid-generated.
    """

    def __init__(self, dim, positions, tags, structured_shape=None,
                 normals=None, bc_velocity=None, grid_index=None):
        positions = np.ascontiguousarray(positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != dim:
            raise GeometryError(f"positions must be (N, {dim})")
        if not np.all(np.isfinite(positions)):
            raise GeometryError("positions contain non-finite values")
        if len(tags) != len(positions):
            raise GeometryError("one tag per node required")
        if len(np.unique(positions, axis=0)) != len(positions):
            raise GeometryError("duplicate node positions")
        if structured_shape is not None and int(np.prod(structured_shape)) != len(positions):
            raise GeometryError("structured_shape does not match node count")

        self.dim = int(dim)
        self.positions = positions
        self.tags = list(tags)
        self.structured_shape = tuple(structured_shape) if structured_shape else None
        self.kinds = np.array([t.kind for t in tags], dtype=np.int8)
        self.normals = (np.zeros_like(positions) if normals is None
                        else np.ascontiguousarray(normals, dtype=float))
        self.bc_velocity = (np.zeros_like(positions) if bc_velocity is None
                            else np.ascontiguousarray(bc_velocity, dtype=float))
        self.grid_index = None if grid_index is None else np.asarray(grid_index, dtype=np.int64)
        for arr in (self.positions, self.kinds, self.normals, self.bc_velocity):
            arr.setflags(write=False)
        self._bins = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n(self) -> int:
        return len(self.positions)

    def mask(self, *kinds: TagKind) -> np.ndarray:
        return np.isin(self.kinds, [int(k) for k in kinds])

    @property
    def interior_mask(self) -> np.ndarray:
        return self.kinds == TagKind.INTERIOR

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.kinds != TagKind.INTERIOR

    # -- neighbour queries ------------------------------------------------

    def _ensure_bins(self):
        if self._bins is None:
            self._bins = _BinIndex(self.positions)
        return self._bins

    def k_nearest(self, center: int, k: int):
        """Ids and distances of the k nearest nodes to node `center`.

        The center itself is included (distance 0, first entry). Distances
        are nondecreasing; ties are broken by lower node id.
        """
        if k > self.n:
            raise ValueError(f"k={k} exceeds node count {self.n}")
        if k < 1:
            raise ValueError("k must be >= 1")
        return self._ensure_bins().query(self.positions[center], k)

    def all_k_nearest(self, k: int):
        """(N, k) neighbour ids and distances for every node."""
        if k > self.n:
            raise ValueError(f"k={k} exceeds node count {self.n}")
        bins = self._ensure_bins()
        ids = np.empty((self.n, k), dtype=np.int64)
        dist = np.empty((self.n, k), dtype=float)
        for i in range(self.n):
            ids[i], dist[i] = bins.query(self.positions[i], k)
        return ids, dist


class _BinIndex:
    """Uniform spatial binning with cell size = mean node spacing.

    Queries expand square (cube) rings of cells until the k-th candidate
    distance is provably minimal, then sort candidates by (distance, id).
    """

    def __init__(self, positions: np.ndarray):
        self.positions = positions
        n, dim = positions.shape
        self.lo = positions.min(axis=0)
        span = positions.max(axis=0) - self.lo
        span = np.where(span > 0, span, 1.0)
        # mean spacing from the bounding-box volume per node
        self.cell = float(np.prod(span) ** (1.0 / dim) / n ** (1.0 / dim))
        self.shape = np.maximum((span / self.cell).astype(int) + 1, 1)
        idx = self._cell_of(positions)
        flat = np.ravel_multi_index(idx.T, self.shape)
        order = np.argsort(flat, kind="stable")
        flat_sorted = flat[order]
        starts = np.searchsorted(flat_sorted, np.arange(np.prod(self.shape) + 1))
        self._order = order
        self._starts = starts
        self._max_ring = int(self.shape.max())

    def _cell_of(self, pts: np.ndarray) -> np.ndarray:
        idx = ((pts - self.lo) / self.cell).astype(int)
        return np.clip(idx, 0, self.shape - 1)

    def _cells_in_box(self, center_cell, ring):
        lo = np.maximum(center_cell - ring, 0)
        hi = np.minimum(center_cell + ring, self.shape - 1)
        ranges = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        grids = np.meshgrid(*ranges, indexing="ij")
        return np.ravel_multi_index([g.ravel() for g in grids], self.shape)

    def query(self, point: np.ndarray, k: int):
        center_cell = self._cell_of(point[None, :])[0]
        ring = 1
        while True:
            cells = self._cells_in_box(center_cell, ring)
            parts = [self._order[self._starts[c]:self._starts[c + 1]] for c in cells]
            cand = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
            full_cover = ring >= self._max_ring  # box spans the whole domain
            if len(cand) >= k:
                d = np.linalg.norm(self.positions[cand] - point, axis=1)
                take = np.lexsort((cand, d))[:k]
                # safe once no unsearched cell can hold a closer point
                if full_cover or d[take[-1]] <= ring * self.cell:
                    return cand[take], d[take]
            elif full_cover:
                raise RuntimeError("bin search exhausted the domain with < k candidates")
            ring += 1


# -- generators -----------------------------------------------------------


def _face_normal_2d(i: int, j: int, nx: int, ny: int) -> np.ndarray:
    """Outward unit normal on the boundary of an nx x ny lattice (0 inside)."""
    nrm = np.zeros(2)
    if i == 0:
        nrm[0] = -1.0
    elif i == nx - 1:
        nrm[0] = 1.0
    if j == 0:
        nrm[1] = -1.0
    elif j == ny - 1:
        nrm[1] = 1.0
    norm = float(np.linalg.norm(nrm))
    return nrm / norm if norm > 0 else nrm


def generate_cavity_2d(spec: GridSpec) -> NodeSet:
    """Unit-square cavity; the y=1 lid (corners included) moves with (1, 0)."""
    nx, ny = spec.counts
    xs = _axis_coords(nx, spec.stretching)
    ys = _axis_coords(ny, spec.stretching)
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    pos = np.column_stack([xs[ix], ys[iy]])

    tags = []
    normals = np.zeros_like(pos)
    bc_vel = np.zeros_like(pos)
    wall = BoundaryTag(TagKind.WALL)
    lid = BoundaryTag(TagKind.MOVING_LID, velocity=(1.0, 0.0))
    for n, (i, j) in enumerate(zip(ix, iy)):
        nrm = _face_normal_2d(i, j, nx, ny)
        normals[n] = nrm
        if j == ny - 1:
            tags.append(lid)
            bc_vel[n] = (1.0, 0.0)
        elif i == 0 or i == nx - 1 or j == 0:
            tags.append(wall)
        else:
            tags.append(BoundaryTag(TagKind.INTERIOR))
    return NodeSet(2, pos, tags, structured_shape=(nx, ny), normals=normals,
                   bc_velocity=bc_vel, grid_index=np.column_stack([ix, iy]))


def generate_cavity_3d_half(spec: GridSpec) -> NodeSet:
    """Half cavity, symmetric about the mid-z plane.

    Domain [0,1] x [0,1] x [0, 0.5]; the z = 0.5 face is the symmetry plane
    (tagged on its full face, edges included), the y = 1 face the lid moving
    along +x, everything else a wall. The z axis keeps the clustering of the
    full-cavity stretched grid near the z = 0 wall.
    """
    nx, ny, nz = spec.counts
    xs = _axis_coords(nx, spec.stretching)
    ys = _axis_coords(ny, spec.stretching)
    zs = _axis_coords(nz, spec.stretching, upper=0.5)

    ids = np.arange(nx * ny * nz)
    ix = ids % nx
    iy = (ids // nx) % ny
    iz = ids // (nx * ny)
    pos = np.column_stack([xs[ix], ys[iy], zs[iz]])

    tags = []
    normals = np.zeros_like(pos)
    bc_vel = np.zeros_like(pos)
    wall = BoundaryTag(TagKind.WALL)
    lid = BoundaryTag(TagKind.MOVING_LID, velocity=(1.0, 0.0, 0.0))
    sym = BoundaryTag(TagKind.SYMMETRY_PLANE, axis=2)
    for n, (i, j, kk) in enumerate(zip(ix, iy, iz)):
        nrm = np.zeros(3)
        if i == 0:
            nrm[0] = -1
        elif i == nx - 1:
            nrm[0] = 1
        if j == 0:
            nrm[1] = -1
        elif j == ny - 1:
            nrm[1] = 1
        if kk == 0:
            nrm[2] = -1
        elif kk == nz - 1:
            nrm[2] = 1
        if nrm.any():
            normals[n] = nrm / np.linalg.norm(nrm)
        if kk == nz - 1:
            tags.append(sym)
        elif j == ny - 1:
            tags.append(lid)
            bc_vel[n] = (1.0, 0.0, 0.0)
        elif nrm.any():
            tags.append(wall)
        else:
            tags.append(BoundaryTag(TagKind.INTERIOR))
    return NodeSet(3, pos, tags, structured_shape=(nx, ny, nz), normals=normals,
                   bc_velocity=bc_vel, grid_index=np.column_stack([ix, iy, iz]))


def parabolic_inlet(y, height: float):
    """Inlet u profile with unit maximum at mid-height, zero at the walls."""
    return 4.0 * y * (height - y) / height ** 2


def generate_channel(spec: GridSpec, geom: ChannelGeom | None = None) -> NodeSet:
    """Channel with a rectangular obstacle on the floor.

    Nodes strictly inside the obstacle footprint are removed; its perimeter
    is a wall. The left edge is a parabolic inlet, the right edge an outlet,
    top and bottom are walls (walls win the domain corners, where the inlet
    profile is zero anyway).
    """
    geom = geom or ChannelGeom()
    nx, ny = spec.counts
    xs = _axis_coords(nx, spec.stretching) * geom.length
    ys = _axis_coords(ny, spec.stretching) * geom.height

    tol = 1e-9 * max(geom.length, geom.height)
    x0, x1 = geom.obstacle_offset, geom.obstacle_rear
    h = geom.obstacle_height

    ix_full, iy_full = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ix_full, iy_full = ix_full.ravel(), iy_full.ravel()
    x, y = xs[ix_full], ys[iy_full]
    inside = (x > x0 + tol) & (x < x1 - tol) & (y < h - tol)
    keep = ~inside
    ix, iy, x, y = ix_full[keep], iy_full[keep], x[keep], y[keep]
    pos = np.column_stack([x, y])

    on_left = np.abs(x - x0) <= tol
    on_right = np.abs(x - x1) <= tol
    on_top = np.abs(y - h) <= tol
    obstacle = ((on_left | on_right) & (y <= h + tol)) | (on_top & (x >= x0 - tol) & (x <= x1 + tol))

    tags = []
    normals = np.zeros_like(pos)
    bc_vel = np.zeros_like(pos)
    wall = BoundaryTag(TagKind.WALL)
    inlet = BoundaryTag(TagKind.INLET, profile="parabolic")
    outlet = BoundaryTag(TagKind.OUTLET)
    for n, (i, j) in enumerate(zip(ix, iy)):
        nrm = np.zeros(2)
        if j == 0:
            nrm[1] = -1.0
        elif j == ny - 1:
            nrm[1] = 1.0
        if i == 0:
            nrm[0] = -1.0
        elif i == nx - 1:
            nrm[0] = 1.0
        if obstacle[n]:
            # outward normal of the fluid region points into the block
            if on_top[n]:
                nrm[1] -= 1.0
            if on_left[n] and y[n] < h - tol:
                nrm[0] += 1.0
            if on_right[n] and y[n] < h - tol:
                nrm[0] -= 1.0
        on_domain_wall = j == 0 or j == ny - 1
        if obstacle[n] or on_domain_wall:
            tags.append(wall)
        elif i == 0:
            tags.append(inlet)
            bc_vel[n] = (parabolic_inlet(y[n], geom.height), 0.0)
        elif i == nx - 1:
            tags.append(outlet)
        else:
            tags.append(BoundaryTag(TagKind.INTERIOR))
        norm = float(np.linalg.norm(nrm))
        if norm > 0:
            normals[n] = nrm / norm
    return NodeSet(2, pos, tags, structured_shape=None, normals=normals,
                   bc_velocity=bc_vel, grid_index=np.column_stack([ix, iy]))
