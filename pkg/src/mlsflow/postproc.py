"""Derived quantities from a converged flow field.

Streamfunction (2D only, solved a posteriori), vortex-center extraction with
sub-grid quadratic refinement, midline profiles, and the reattachment length
behind the channel obstacle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mls
from .mls import StencilTable
from .nodeset import ChannelGeom, NodeSet, TagKind
from .projection import FlowField
from .sparsela import solve_bicgstab

import scipy.sparse as sp


class UnsupportedError(ValueError):
    """Operation not defined for this node set or dimension."""


@dataclass(frozen=True)
class ProfileSample:
    coordinate: float
    value: float


@dataclass(frozen=True)
class VortexRecord:
    location: tuple[float, ...]
    psi: float
    label: str


def solve_streamfunction(field: FlowField, table: StencilTable,
                         boundary_psi=0.0, tol: float = 1e-10) -> np.ndarray:
    """Streamfunction from lap(psi) = du/dy - dv/dx with Dirichlet psi.

    Sign convention u = dpsi/dy, v = -dpsi/dx, so the clockwise primary
    cavity vortex carries negative psi. `boundary_psi` is a scalar or an
    (N,) array whose entries are used at boundary nodes.
    """
    ns = table.nodeset
    if ns.dim != 2:
        raise UnsupportedError("streamfunction is a 2D construct")
    bvals = np.broadcast_to(np.asarray(boundary_psi, dtype=float), (ns.n,))

    int_ids = np.where(ns.interior_mask)[0]
    bnd_ids = np.where(ns.boundary_mask)[0]
    rows = np.concatenate([np.repeat(int_ids, table.k), bnd_ids])
    cols = np.concatenate([table.neighbors[int_ids].ravel(), bnd_ids])
    vals = np.concatenate([table.row("lap")[int_ids].ravel(), np.ones(len(bnd_ids))])
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(ns.n, ns.n)).tocsr()

    rhs = np.zeros(ns.n)
    vort = table.apply("dy", field.u) - table.apply("dx", field.v)
    rhs[int_ids] = vort[int_ids]
    rhs[bnd_ids] = bvals[bnd_ids]

    psi, stats = solve_bicgstab(mat, rhs, tol=tol)
    if not stats.converged:
        raise RuntimeError(f"streamfunction solve stalled at residual {stats.residual:.3e}")
    psi[bnd_ids] = bvals[bnd_ids]
    return psi


def _quadratic_refine(stencil, psi: np.ndarray, spacing: float):
    """Stationary point of the local quadratic fit of psi around a node.

    Returns (offset, refined value); falls back to the nodal value when the
    local Hessian is singular or the stationary point leaves the stencil
    footprint.
    """
    alpha = mls.estimate(stencil, psi)
    g = alpha[1:3]
    hess = np.array([[alpha[3], alpha[4]], [alpha[4], alpha[5]]])
    det = np.linalg.det(hess)
    if abs(det) < 1e-14:
        return np.zeros(2), float(alpha[0])
    delta = -np.linalg.solve(hess, g)
    if np.linalg.norm(delta) > 2.0 * spacing:
        return np.zeros(2), float(alpha[0])
    value = (alpha[0] + g @ delta + 0.5 * delta @ hess @ delta)
    return delta, float(value)


def find_vortices(psi: np.ndarray, ns: NodeSet, table: StencilTable | None = None,
                  k: int = 9) -> list[VortexRecord]:
    """Strict local extrema of psi, refined by the local quadratic fit.

    Labels: 'primary' for the largest |psi|; the rest are named by cavity
    region and strength rank, e.g. 'bottom-right-1', 'top-left-2'.
    Sorted by decreasing |psi|.
    """
    psi = np.asarray(psi, dtype=float)
    interior = np.where(ns.interior_mask)[0]
    records = []
    for i in interior:
        ids, dists = ns.k_nearest(int(i), k)
        others = ids[ids != i]
        if len(others) == 0:
            continue
        if psi[i] > psi[others].max() or psi[i] < psi[others].min():
            spacing = float(dists[dists > 0].min())
            stencil = table.stencil(int(i)) if table is not None else \
                mls.build_stencil(ns, int(i), k=max(k, mls.MIN_NEIGHBOURS[ns.dim]))
            delta, value = _quadratic_refine(stencil, psi, spacing)
            loc = tuple(float(c) for c in (ns.positions[i] + delta))
            records.append((loc, value))
    records.sort(key=lambda rec: -abs(rec[1]))

    out: list[VortexRecord] = []
    region_counts: dict[str, int] = {}
    for rank, (loc, value) in enumerate(records):
        if rank == 0:
            label = "primary"
        else:
            region = ("bottom" if loc[1] < 0.5 else "top") + "-" + \
                     ("left" if loc[0] < 0.5 else "right")
            region_counts[region] = region_counts.get(region, 0) + 1
            label = f"{region}-{region_counts[region]}"
        out.append(VortexRecord(location=loc, psi=value, label=label))
    return out


def _structured_axis_values(ns: NodeSet, axis: int) -> np.ndarray:
    shape = ns.structured_shape
    idx = ns.grid_index[:, axis]
    vals = np.empty(shape[axis])
    vals[idx] = ns.positions[:, axis]
    return vals


def extract_midline(field, ns: NodeSet, axis: int, component: str | None = None
                    ) -> list[ProfileSample]:
    """Samples along the geometric midline running parallel to `axis`.

    `field` is a FlowField (then `component` picks u/v/w/p) or a plain nodal
    array. For 3D half-domains the line lies in the symmetry plane (max z).
    Requires a structured node set.
    """
    if ns.structured_shape is None or ns.grid_index is None:
        raise UnsupportedError("midline extraction needs a structured node set")
    values = field if isinstance(field, np.ndarray) else \
        np.asarray(field.components()[component])

    shape = ns.structured_shape
    mask = np.ones(ns.n, dtype=bool)
    for other in range(ns.dim):
        if other == axis:
            continue
        if ns.dim == 3 and other == 2:
            target = shape[2] - 1  # symmetry plane
        else:
            target = (shape[other] - 1) // 2
        mask &= ns.grid_index[:, other] == target
    ids = np.where(mask)[0]
    order = np.argsort(ns.grid_index[ids, axis])
    ids = ids[order]
    return [ProfileSample(float(ns.positions[i, axis]), float(values[i])) for i in ids]


def reattachment_length(field: FlowField, ns: NodeSet, geom: ChannelGeom
                        ) -> float | None:
    """Distance from the obstacle rear face to flow reattachment.

    Scans the streamwise velocity on the first node row above the bottom
    wall, downstream of the obstacle, for the sign change from negative to
    positive; the crossing is located by linear interpolation. Returned in
    units of the reference length (H - h). None means the flow never
    separates (attached-flow sentinel).
    """
    if ns.grid_index is None:
        raise UnsupportedError("reattachment scan needs grid indices")
    row = ns.grid_index[:, 1] == 1
    behind = ns.positions[:, 0] > geom.obstacle_rear + 1e-12
    ids = np.where(row & behind)[0]
    ids = ids[np.argsort(ns.positions[ids, 0])]
    x = ns.positions[ids, 0]
    u = field.u[ids]
    if len(ids) < 2 or u[0] >= 0.0:
        return None
    for a, b in zip(range(len(ids) - 1), range(1, len(ids))):
        if u[a] < 0.0 <= u[b]:
            x_cross = x[a] + (0.0 - u[a]) * (x[b] - x[a]) / (u[b] - u[a])
            return float((x_cross - geom.obstacle_rear) / geom.step_height)
    return None


def column_flux(field: FlowField, ns: NodeSet, x_target: float,
                tol: float = 1e-9) -> float:
    """Trapezoid integral of u over the node column nearest x = x_target."""
    xs = ns.positions[:, 0]
    col_x = xs[np.argmin(np.abs(xs - x_target))]
    ids = np.where(np.abs(xs - col_x) <= tol)[0]
    ids = ids[np.argsort(ns.positions[ids, 1])]
    return float(np.trapz(field.u[ids], ns.positions[ids, 1]))
