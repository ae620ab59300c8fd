"""Diffuse-approximation derivative stencils.

At each node a weighted least-squares fit of a quadratic Taylor polynomial
to the k nearest nodal values yields linear functionals for the field value
and all its derivatives up to order 2. The fit minimizes

    sum_i w(|X_i - X|) * (phi_i - P(X_i - X)^T a)^2

with the quadratic monomial basis P and a Gaussian window w of compact
support sigma, adapted per node so every stencil uses the same neighbour
count. The normal equations A a = B (A = sum w P P^T) are solved once per
node and the resulting coefficient rows are cached.

Row layout of a stencil (plain derivatives, the 1/2! of the Taylor
coefficients on the pure second derivatives already removed):

    2D: [value, d/dx, d/dy, d2/dx2, d2/dxdy, d2/dy2]
    3D: [value, d/dx, d/dy, d2/dx2, d2/dxdy, d2/dy2,
         d/dz, d2/dxdz, d2/dydz, d2/dz2]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nodeset import NodeSet

_LN10 = float(np.log(10.0))

# row indices into the coefficient matrix
ROWS_2D = {"value": 0, "dx": 1, "dy": 2, "dxx": 3, "dxy": 4, "dyy": 5}
ROWS_3D = {**ROWS_2D, "dz": 6, "dxz": 7, "dyz": 8, "dzz": 9}
# monomial total degree per row (drives the normalization rescaling)
_DEGREES_2D = np.array([0, 1, 1, 2, 2, 2])
_DEGREES_3D = np.array([0, 1, 1, 2, 2, 2, 1, 2, 2, 2])
# rows carrying a 1/2! in the raw Taylor fit
_HALF_ROWS_2D = (3, 5)
_HALF_ROWS_3D = (3, 5, 9)

DEFAULT_NEIGHBOURS = {2: 9, 3: 27}
MIN_NEIGHBOURS = {2: 6, 3: 10}


class StencilError(RuntimeError):
    """Raised when a stencil cannot be built at a node."""


@dataclass(frozen=True)
class WeightParams:
    """Gaussian-window parameters.

    sigma_factor scales the distance to the farthest retained neighbour to
    give the support radius; it must exceed 1 or that neighbour's weight
    would be cut to zero.
    """

    sigma_factor: float = 1.05

    def __post_init__(self):
        if self.sigma_factor <= 1.0:
            raise ValueError(f"sigma_factor must be > 1, got {self.sigma_factor}")


@dataclass(frozen=True)
class DerivativeStencil:
    """Per-node linear functionals for value and derivatives up to order 2.

    coeffs is (m, k): row r applied to the neighbour values estimates the
    r-th entry of the layout above. Row 0 sums to 1, all others to 0
    (constants are reproduced exactly).
    """

    center: int
    neighbors: np.ndarray
    coeffs: np.ndarray

    @property
    def k(self) -> int:
        return len(self.neighbors)

    @property
    def m(self) -> int:
        return self.coeffs.shape[0]


def weight(distance, sigma):
    """Gaussian window exp(-3 ln10 (d/sigma)^2), exactly 0 beyond sigma.

    The constant forces w = 1e-3 at d = sigma. Vectorized over both args.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    ratio = d / sigma
    out = np.where(ratio <= 1.0, np.exp(-3.0 * _LN10 * ratio ** 2), 0.0)
    return float(out) if out.ndim == 0 else out


def choose_sigma(distances, params: WeightParams) -> float:
    """Support radius from the farthest retained neighbour distance."""
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise ValueError("empty distance list")
    return params.sigma_factor * float(d[-1])


def basis_vector(dx, dim: int | None = None) -> np.ndarray:
    """Quadratic monomials of a displacement, in stencil row order."""
    dx = np.asarray(dx, dtype=float)
    dim = dim or len(dx)
    if len(dx) != dim:
        raise ValueError(f"displacement has length {len(dx)}, expected {dim}")
    return _basis_matrix(dx[None, :])[0]


def _basis_matrix(offsets: np.ndarray) -> np.ndarray:
    """(..., k, dim) displacements -> (..., k, m) monomial rows."""
    x = offsets[..., 0]
    y = offsets[..., 1]
    one = np.ones_like(x)
    if offsets.shape[-1] == 2:
        cols = [one, x, y, x * x, x * y, y * y]
    else:
        z = offsets[..., 2]
        cols = [one, x, y, x * x, x * y, y * y, z, x * z, y * z, z * z]
    return np.stack(cols, axis=-1)


def _solve_coeffs(offsets: np.ndarray, dists: np.ndarray, params: WeightParams,
                  cond_limit: float, node_ids: np.ndarray) -> np.ndarray:
    """Batched weighted least-squares solve.

    offsets: (N, k, dim) neighbour displacements, dists: (N, k). Offsets are
    normalized by the farthest-neighbour distance before forming the moment
    matrix (exactly equivalent algebra, conditioning stays O(1)) and the
    derivative rows are rescaled back afterwards.
    """
    n, k, dim = offsets.shape
    degrees = _DEGREES_2D if dim == 2 else _DEGREES_3D
    half_rows = _HALF_ROWS_2D if dim == 2 else _HALF_ROWS_3D
    m = len(degrees)

    scale = dists[:, -1].copy()
    if np.any(scale <= 0):
        raise StencilError("stencil needs at least one neighbour at distance > 0")
    sigma = params.sigma_factor * scale
    w = weight(dists, sigma[:, None])

    p = _basis_matrix(offsets / scale[:, None, None])  # (N, k, m)
    pw = p * w[:, :, None]
    a = np.einsum("nkr,nks->nrs", pw, p)
    a = 0.5 * (a + a.transpose(0, 2, 1))  # symmetric by construction
    assert np.array_equal(a, a.transpose(0, 2, 1))

    cond = np.linalg.cond(a)
    bad = np.where(~np.isfinite(cond) | (cond > cond_limit))[0]
    if bad.size:
        raise StencilError(
            f"moment matrix ill-conditioned at node {int(node_ids[bad[0]])} "
            f"(cond {cond[bad[0]]:.3e} > {cond_limit:.1e})"
        )

    coeffs = np.linalg.solve(a, pw.transpose(0, 2, 1))  # (N, m, k)
    # undo the offset normalization, then drop the Taylor 1/2! factors
    coeffs /= scale[:, None, None] ** degrees[None, :, None]
    coeffs[:, half_rows, :] *= 2.0
    # consistency correction: absorb the rounding defect of the row sums into
    # the center slot so constants are reproduced exactly even where the
    # derivative rows are O(1/h^2)
    sums = coeffs.sum(axis=2)
    coeffs[:, 0, 0] += 1.0 - sums[:, 0]
    coeffs[:, 1:, 0] -= sums[:, 1:]
    return coeffs


def _check_partition(coeffs: np.ndarray, node_ids: np.ndarray, tol: float = 1e-10):
    sums = coeffs.sum(axis=2)
    err0 = np.abs(sums[:, 0] - 1.0)
    errd = np.abs(sums[:, 1:])
    if err0.max() > tol or errd.max() > tol:
        i = int(node_ids[np.argmax(np.maximum(err0, errd.max(axis=1)))])
        raise StencilError(f"constant reproduction violated at node {i}")


def build_stencil(ns: NodeSet, center: int, k: int | None = None,
                  params: WeightParams | None = None,
                  cond_limit: float = 1e12) -> DerivativeStencil:
    """Stencil for a single node; see module docstring for the math."""
    params = params or WeightParams()
    k = k if k is not None else DEFAULT_NEIGHBOURS[ns.dim]
    if k < MIN_NEIGHBOURS[ns.dim]:
        raise StencilError(
            f"{k} neighbours < minimum {MIN_NEIGHBOURS[ns.dim]} in {ns.dim}D"
        )
    ids, dists = ns.k_nearest(center, k)
    offsets = ns.positions[ids] - ns.positions[center]
    coeffs = _solve_coeffs(offsets[None], dists[None], params, cond_limit,
                           np.array([center]))[0]
    _check_partition(coeffs[None], np.array([center]))
    return DerivativeStencil(center=center, neighbors=ids, coeffs=coeffs)


def estimate(stencil: DerivativeStencil, field: np.ndarray) -> np.ndarray:
    """Apply a stencil to nodal values: value and derivatives at its center."""
    return stencil.coeffs @ np.asarray(field, dtype=float)[stencil.neighbors]


class StencilTable:
    """Frozen stencil coefficients for every node of a NodeSet.

    Built once per node set (the nodes are static through a run). Provides
    vectorized application of any derivative row to a nodal field.
    """

    def __init__(self, ns: NodeSet, neighbors: np.ndarray, coeffs: np.ndarray,
                 k: int, params: WeightParams):
        self.nodeset = ns
        self.neighbors = neighbors
        self.coeffs = coeffs
        self.k = k
        self.params = params
        self.rows = ROWS_2D if ns.dim == 2 else ROWS_3D
        self._lap = sum(coeffs[:, self.rows[r], :]
                        for r in (("dxx", "dyy") if ns.dim == 2 else ("dxx", "dyy", "dzz")))
        for arr in (self.neighbors, self.coeffs, self._lap):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.neighbors)

    def row(self, name: str) -> np.ndarray:
        """(N, k) coefficient rows for one derivative, or 'lap' for the Laplacian."""
        if name == "lap":
            return self._lap
        return self.coeffs[:, self.rows[name], :]

    def first_derivative_row(self, axis: int) -> np.ndarray:
        return self.row(("dx", "dy", "dz")[axis])

    def normal_derivative_rows(self, node_ids: np.ndarray, normals: np.ndarray) -> np.ndarray:
        """(len(ids), k) rows of n . grad at the given nodes."""
        out = np.zeros((len(node_ids), self.k))
        for axis in range(self.nodeset.dim):
            out += normals[:, axis, None] * self.first_derivative_row(axis)[node_ids]
        return out

    def apply(self, name: str, field: np.ndarray) -> np.ndarray:
        """Derivative (or value/Laplacian) estimate of a nodal field at every node."""
        vals = np.asarray(field, dtype=float)[self.neighbors]
        return np.einsum("nk,nk->n", self.row(name), vals)

    def gradient(self, field: np.ndarray) -> np.ndarray:
        return np.column_stack([self.apply(("dx", "dy", "dz")[ax], field)
                                for ax in range(self.nodeset.dim)])

    def divergence(self, *components: np.ndarray) -> np.ndarray:
        if len(components) != self.nodeset.dim:
            raise ValueError("one velocity component per dimension required")
        out = np.zeros(self.n)
        for axis, comp in enumerate(components):
            out += self.apply(("dx", "dy", "dz")[axis], comp)
        return out

    def stencil(self, i: int) -> DerivativeStencil:
        return DerivativeStencil(center=i, neighbors=self.neighbors[i],
                                 coeffs=self.coeffs[i])


def build_stencil_table(ns: NodeSet, k: int | None = None,
                        params: WeightParams | None = None,
                        cond_limit: float = 1e12) -> StencilTable:
    """Build and validate stencils for all nodes (batched solves)."""
    params = params or WeightParams()
    k = k if k is not None else DEFAULT_NEIGHBOURS[ns.dim]
    if k < MIN_NEIGHBOURS[ns.dim]:
        raise StencilError(
            f"{k} neighbours < minimum {MIN_NEIGHBOURS[ns.dim]} in {ns.dim}D"
        )
    neighbors, dists = ns.all_k_nearest(k)
    if not np.array_equal(neighbors[:, 0], np.arange(ns.n)):
        raise StencilError("expected each node to be its own nearest neighbour")
    offsets = ns.positions[neighbors] - ns.positions[:, None, :]
    node_ids = np.arange(ns.n)
    coeffs = _solve_coeffs(offsets, dists, params, cond_limit, node_ids)
    _check_partition(coeffs, node_ids)
    return StencilTable(ns, neighbors, coeffs, k, params)
