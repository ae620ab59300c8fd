"""Equal-order projection scheme on diffuse-approximation stencils.

Each outer step solves the momentum equations for a provisional velocity
with the convecting velocity and pressure frozen at the previous iterate,

    (V* - V_n)/dt = (1/Re) lap(V*) - (V_n . grad) V* - grad p_n,

then a Poisson equation for the pressure correction,

    lap(p') = div(V*) / dt,

and projects:  V <- V* - dt grad(p'),  p <- p_n + p'. Under-relaxation
blends old and new iterates per variable. Steady solutions use this loop as
a false transient; the transient driver repeats the inner correction until
the step converges before advancing time.

Derivatives are collocated with the stencil rows; the time term and all
Dirichlet conditions act on nodal values directly. Wall, lid, inlet and
symmetry nodes impose zero normal derivative on p'; outlets fix p' = 0;
fully enclosed domains pin one reference node instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .mls import StencilTable
from .nodeset import NodeSet, TagKind
from .sparsela import IterativeStats, SparseSystem, solve_bicgstab

_AXIS_NAMES = ("u", "v", "w")


class SingularSystemError(ValueError):
    """Pressure-correction system has a null space (enclosed domain, no pin)."""


@dataclass
class FlowField:
    """Nodal velocity components and pressure (nondimensional)."""

    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    w: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return 2 if self.w is None else 3

    def velocity(self, axis: int) -> np.ndarray:
        return (self.u, self.v, self.w)[axis]

    def components(self) -> dict[str, np.ndarray]:
        out = {"u": self.u, "v": self.v}
        if self.w is not None:
            out["w"] = self.w
        out["p"] = self.p
        return out

    def copy(self) -> "FlowField":
        return FlowField(self.u.copy(), self.v.copy(), self.p.copy(),
                         None if self.w is None else self.w.copy())


@dataclass(frozen=True)
class RelaxFactors:
    """Per-variable under-relaxation factors in (0, 1]."""

    u: float = 0.4
    v: float = 0.4
    w: float = 0.4
    p: float = 0.4

    def __post_init__(self):
        for name, val in (("u", self.u), ("v", self.v), ("w", self.w), ("p", self.p)):
            if not 0.0 < val <= 1.0:
                raise ValueError(f"relaxation factor {name}={val} outside (0, 1]")

    @classmethod
    def uniform(cls, f: float) -> "RelaxFactors":
        return cls(f, f, f, f)

    def for_axis(self, axis: int) -> float:
        return (self.u, self.v, self.w)[axis]


@dataclass
class SolverParams:
    """Reynolds number, stepping and convergence controls."""

    re: float
    dt: float = 0.05
    relax: RelaxFactors = dc_field(default_factory=RelaxFactors)
    conv_tol: float = 1e-4          # 0.01% change in all nodal values
    max_outer: int = 5000
    mode: str = "steady"            # "steady" | "transient"
    inner_tol: float = 1e-5
    max_inner: int = 50
    lin_tol: float = 1e-8
    lin_maxiter: int | None = None
    preconditioner: str = "jacobi"

    def __post_init__(self):
        if self.re <= 0:
            raise ValueError(f"Re must be positive, got {self.re}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.mode not in ("steady", "transient"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class StepReport:
    """Diagnostics of one outer iteration (or one inner transient sweep)."""

    index: int
    changes: dict[str, float]
    max_divergence: float
    l2_divergence: float
    inner: dict[str, IterativeStats]
    converged: bool

    def log_line(self) -> str:
        ch = " ".join(f"d{k}={v:.3e}" for k, v in self.changes.items())
        inner = ",".join(f"{k}:{s.iterations}" for k, s in self.inner.items())
        return (f"iter={self.index} {ch} maxdiv={self.max_divergence:.3e} "
                f"inner={inner}")


def initial_field(ns: NodeSet) -> FlowField:
    """Quiescent start: zero velocity and pressure, Dirichlet values imposed."""
    n = ns.n
    field = FlowField(np.zeros(n), np.zeros(n), np.zeros(n),
                      np.zeros(n) if ns.dim == 3 else None)
    _impose_velocity_bc(field, ns)
    return field


def _dirichlet_mask(ns: NodeSet) -> np.ndarray:
    return ns.mask(TagKind.WALL, TagKind.MOVING_LID, TagKind.INLET)


def _impose_velocity_bc(field: FlowField, ns: NodeSet):
    dir_mask = _dirichlet_mask(ns)
    for axis in range(ns.dim):
        comp = field.velocity(axis)
        comp[dir_mask] = ns.bc_velocity[dir_mask, axis]
    sym = np.where(ns.kinds == TagKind.SYMMETRY_PLANE)[0]
    for i in sym:
        field.velocity(ns.tags[i].axis)[i] = 0.0


def assemble_momentum(table: StencilTable, field: FlowField, params: SolverParams,
                      time_anchor: FlowField | None = None) -> dict[str, SparseSystem]:
    """One linear system per velocity component for the predictor solve.

    `field` supplies the convecting velocity and the pressure gradient;
    `time_anchor` (default: field) supplies the previous-time-level velocity
    in the dt terms, which differs inside transient inner iterations.
    """
    ns = table.nodeset
    anchor = time_anchor or field
    dim = ns.dim
    inv_dt = 1.0 / params.dt
    int_ids = np.where(ns.interior_mask)[0]
    dir_ids = np.where(_dirichlet_mask(ns))[0]
    out_ids = np.where(ns.kinds == TagKind.OUTLET)[0]
    sym_ids = np.where(ns.kinds == TagKind.SYMMETRY_PLANE)[0]
    sym_axes = np.array([ns.tags[i].axis for i in sym_ids], dtype=int)

    # interior operator rows are component-independent
    op = -(1.0 / params.re) * table.row("lap")[int_ids]
    for ax in range(dim):
        op = op + field.velocity(ax)[int_ids, None] * table.first_derivative_row(ax)[int_ids]
    op[:, 0] += inv_dt  # slot 0 is the node itself
    rows_int = np.repeat(int_ids, table.k)
    cols_int = table.neighbors[int_ids].ravel()

    grad_p = table.gradient(field.p)

    systems: dict[str, SparseSystem] = {}
    for axis in range(dim):
        rows = [rows_int]
        cols = [cols_int]
        vals = [op.ravel()]
        rhs = np.zeros(ns.n)
        rhs[int_ids] = anchor.velocity(axis)[int_ids] * inv_dt - grad_p[int_ids, axis]

        rows.append(dir_ids)
        cols.append(dir_ids)
        vals.append(np.ones(len(dir_ids)))
        rhs[dir_ids] = ns.bc_velocity[dir_ids, axis]

        if len(out_ids):
            nrows = table.normal_derivative_rows(out_ids, ns.normals[out_ids])
            rows.append(np.repeat(out_ids, table.k))
            cols.append(table.neighbors[out_ids].ravel())
            vals.append(nrows.ravel())

        if len(sym_ids):
            normal_here = sym_ids[sym_axes == axis]
            tangent_here = sym_ids[sym_axes != axis]
            rows.append(normal_here)
            cols.append(normal_here)
            vals.append(np.ones(len(normal_here)))
            if len(tangent_here):
                taxes = sym_axes[sym_axes != axis]
                trows = np.zeros((len(tangent_here), table.k))
                for ax in np.unique(taxes):
                    pick = taxes == ax
                    trows[pick] = table.first_derivative_row(ax)[tangent_here[pick]]
                rows.append(np.repeat(tangent_here, table.k))
                cols.append(table.neighbors[tangent_here].ravel())
                vals.append(trows.ravel())

        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ns.n, ns.n)).tocsr()
        systems[_AXIS_NAMES[axis]] = SparseSystem(mat, rhs)
    return systems


@dataclass
class PressureOperator:
    """Pressure-correction matrix plus range information.

    For an enclosed domain the unpinned collocation operator has a
    one-dimensional null space; `null_left` is the left null vector of that
    operator, used to project each right-hand side onto the range so the
    pinned node only fixes the gauge instead of absorbing the discrete
    compatibility defect (which otherwise shows up as a pressure dipole at
    the pin and destabilizes the outer loop).
    """

    matrix: sp.csr_matrix
    pin_node: int | None
    null_left: np.ndarray | None

    def project_rhs(self, rhs: np.ndarray) -> np.ndarray:
        if self.null_left is None:
            return rhs
        y = self.null_left
        rhs = rhs - y * (y @ rhs)
        if self.pin_node is not None:
            rhs[self.pin_node] = 0.0
        return rhs


def _pressure_rows(table: StencilTable, pin_node: int | None):
    """Triplet blocks of the pressure collocation rows, skipping the pin."""
    ns = table.nodeset
    int_ids = np.where(ns.interior_mask)[0]
    neu_ids = np.where(_dirichlet_mask(ns))[0]
    sym_ids = np.where(ns.kinds == TagKind.SYMMETRY_PLANE)[0]
    out_ids = np.where(ns.kinds == TagKind.OUTLET)[0]

    def drop_pin(ids):
        return ids[ids != pin_node] if pin_node is not None else ids

    int_ids, neu_ids, sym_ids, out_ids = map(drop_pin, (int_ids, neu_ids, sym_ids, out_ids))

    rows = [np.repeat(int_ids, table.k)]
    cols = [table.neighbors[int_ids].ravel()]
    vals = [table.row("lap")[int_ids].ravel()]
    if len(neu_ids):
        nrows = table.normal_derivative_rows(neu_ids, ns.normals[neu_ids])
        rows.append(np.repeat(neu_ids, table.k))
        cols.append(table.neighbors[neu_ids].ravel())
        vals.append(nrows.ravel())
    if len(sym_ids):
        axes = np.array([ns.tags[i].axis for i in sym_ids], dtype=int)
        srows = np.zeros((len(sym_ids), table.k))
        for ax in np.unique(axes):
            pick = axes == ax
            srows[pick] = table.first_derivative_row(ax)[sym_ids[pick]]
        rows.append(np.repeat(sym_ids, table.k))
        cols.append(table.neighbors[sym_ids].ravel())
        vals.append(srows.ravel())
    if len(out_ids):
        rows.append(out_ids)
        cols.append(out_ids)
        vals.append(np.ones(len(out_ids)))
    if pin_node is not None:
        rows.append(np.array([pin_node]))
        cols.append(np.array([pin_node]))
        vals.append(np.ones(1))
    return rows, cols, vals


def _left_null_vector(mat_unpinned: sp.csr_matrix) -> np.ndarray:
    """Unit left null vector of the enclosed-domain operator.

    Inverse iteration on the transpose with a sparse LU factorization; the
    null direction is isolated (next singular value is O(1)), so a few
    sweeps from a fixed start converge to machine precision.
    """
    import scipy.sparse.linalg as spla

    at = mat_unpinned.T.tocsc()
    scale = float(np.abs(at.diagonal()).max())
    shifted = (at + (1e-12 * scale) * sp.identity(at.shape[0], format="csc")).tocsc()
    lu = spla.splu(shifted)
    y = np.ones(at.shape[0])
    y /= np.linalg.norm(y)
    for _ in range(5):
        y = lu.solve(y)
        y /= np.linalg.norm(y)
    residual = float(np.linalg.norm(at @ y))
    if residual > 1e-6 * scale:
        raise SingularSystemError(
            f"left null vector did not converge (residual {residual:.3e})")
    return y


def _build_pressure_operator(table: StencilTable, pin_node) -> PressureOperator:
    """Field-independent pressure-correction operator (built once per run)."""
    ns = table.nodeset
    enclosed = not np.any(ns.kinds == TagKind.OUTLET)
    if pin_node == "auto":
        pin_node = 0 if enclosed else None
    if enclosed and pin_node is None:
        raise SingularSystemError(
            "enclosed domain: the all-Neumann pressure correction needs a pinned node")

    rows, cols, vals = _pressure_rows(table, pin_node)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ns.n, ns.n)).tocsr()

    null_left = None
    if enclosed:
        rows_u, cols_u, vals_u = _pressure_rows(table, None)
        unpinned = sp.coo_matrix(
            (np.concatenate(vals_u), (np.concatenate(rows_u), np.concatenate(cols_u))),
            shape=(ns.n, ns.n)).tocsr()
        null_left = _left_null_vector(unpinned)
    return PressureOperator(mat, pin_node, null_left)


def _pressure_rhs(table: StencilTable, vstar: FlowField, params: SolverParams) -> np.ndarray:
    ns = table.nodeset
    rhs = np.zeros(ns.n)
    div = table.divergence(*(vstar.velocity(a) for a in range(ns.dim)))
    rhs[ns.interior_mask] = div[ns.interior_mask] / params.dt
    return rhs


def assemble_pressure_correction(table: StencilTable, vstar: FlowField,
                                 params: SolverParams, pin_node="auto") -> SparseSystem:
    """Poisson system lap(p') = div(V*)/dt with the boundary rows above.

    On enclosed domains the right-hand side is projected onto the operator
    range before the pinned system is formed.
    """
    op = _build_pressure_operator(table, pin_node)
    rhs = op.project_rhs(_pressure_rhs(table, vstar, params))
    return SparseSystem(op.matrix, rhs)


def correct(field: FlowField, pprime: np.ndarray, table: StencilTable,
            params: SolverParams, prev: FlowField | None = None) -> FlowField:
    """Project the provisional field and update the pressure.

    `field` holds (V*, p_n). Interior velocities become V* - dt grad(p');
    when `prev` (the previous outer iterate) is given they are additionally
    blended with the per-variable relaxation factors. The pressure update is
    always relaxed: p <- p_n + relax_p * p'. Dirichlet velocity values are
    re-imposed bit-exactly.
    """
    ns = table.nodeset
    grad = table.gradient(pprime)
    interior = ns.interior_mask
    new = field.copy()
    for axis in range(ns.dim):
        comp = new.velocity(axis)
        cand = field.velocity(axis)[interior] - params.dt * grad[interior, axis]
        if prev is not None:
            old = prev.velocity(axis)[interior]
            cand = old + params.relax.for_axis(axis) * (cand - old)
        comp[interior] = cand
    new.p = field.p + params.relax.p * pprime
    _impose_velocity_bc(new, ns)
    return new


def convergence_check(prev: FlowField, next_field: FlowField, conv_tol: float,
                      floor: float = 1e-12):
    """Per-variable relative change and overall verdict.

    change(phi) = max_i |phi_new,i - phi_old,i| / max(max_i |phi_new,i|, floor)
    """
    changes: dict[str, float] = {}
    prev_c, next_c = prev.components(), next_field.components()
    for name, arr in next_c.items():
        diff = float(np.abs(arr - prev_c[name]).max())
        scale = max(float(np.abs(arr).max()), floor)
        changes[name] = diff / scale
    return changes, all(c <= conv_tol for c in changes.values())


def divergence_monitor(field: FlowField, table: StencilTable):
    """Max and L2 norm of the nodal velocity divergence over interior nodes."""
    ns = table.nodeset
    div = table.divergence(*(field.velocity(a) for a in range(ns.dim)))
    interior = div[ns.interior_mask]
    if interior.size == 0:
        return 0.0, 0.0
    return float(np.abs(interior).max()), float(np.linalg.norm(interior))


def _as_writer(log):
    if log is None:
        return None
    if hasattr(log, "write"):
        return lambda line: log.write(line + "\n")
    return log


def _predict_and_correct(table, field, anchor, params, pop: PressureOperator,
                         pprime0):
    """One predictor + correction sweep; returns (new field, p', stats)."""
    ns = table.nodeset
    stats: dict[str, IterativeStats] = {}
    systems = assemble_momentum(table, field, params, time_anchor=anchor)
    star_comps = {}
    for name, system in systems.items():
        x0 = field.components()[name]
        sol, st = solve_bicgstab(system, x0=x0, tol=params.lin_tol,
                                 max_iter=params.lin_maxiter,
                                 preconditioner=params.preconditioner)
        star_comps[name] = sol
        stats[name] = st
    vstar = FlowField(star_comps["u"], star_comps["v"], field.p.copy(),
                      star_comps.get("w"))
    _impose_velocity_bc(vstar, ns)

    prhs = pop.project_rhs(_pressure_rhs(table, vstar, params))
    pprime, pst = solve_bicgstab(pop.matrix, prhs, x0=pprime0, tol=params.lin_tol,
                                 max_iter=params.lin_maxiter,
                                 preconditioner=params.preconditioner)
    stats["p"] = pst
    new_field = correct(vstar, pprime, table, params, prev=field)
    return new_field, pprime, stats


def run_steady(table: StencilTable, params: SolverParams, log=None):
    """False-transient march to steady state.

    Returns (field, history). The last StepReport's `converged` flag tells
    whether the change criterion was met before max_outer; a non-converged
    run still returns the partial field.
    """
    writer = _as_writer(log)
    field = initial_field(table.nodeset)
    pop = _build_pressure_operator(table, "auto")
    pprime = np.zeros(table.n)
    history: list[StepReport] = []
    for it in range(1, params.max_outer + 1):
        new_field, pprime, stats = _predict_and_correct(
            table, field, field, params, pop, pprime)
        changes, conv = convergence_check(field, new_field, params.conv_tol)
        maxdiv, l2div = divergence_monitor(new_field, table)
        report = StepReport(it, changes, maxdiv, l2div, stats, conv)
        history.append(report)
        if writer:
            writer(report.log_line())
        field = new_field
        if conv:
            break
    return field, history


def run_transient(table: StencilTable, params: SolverParams, n_steps: int,
                  log=None, history: list | None = None):
    """True transient march: inner correction sweeps repeat per time step.

    Returns the list of FlowField snapshots, one per completed time step.
    Each step anchors the dt terms at the previous time level and iterates
    predictor/correction until the inner change criterion (params.inner_tol)
    is met; a single inner sweep reproduces the steady update rule exactly.
    A caller-supplied `history` list collects one StepReport per time step
    whose `index` is the step and whose inner counts ride in `inner["sweeps"]`.
    """
    writer = _as_writer(log)
    field = initial_field(table.nodeset)
    pop = _build_pressure_operator(table, "auto")
    pprime = np.zeros(table.n)
    snapshots: list[FlowField] = []
    for step in range(1, n_steps + 1):
        anchor = field
        cur = field
        inner_used = params.max_inner
        converged = False
        stats: dict[str, IterativeStats] = {}
        changes: dict[str, float] = {}
        for m in range(1, params.max_inner + 1):
            new_cur, pprime, stats = _predict_and_correct(
                table, cur, anchor, params, pop, pprime)
            changes, converged = convergence_check(cur, new_cur, params.inner_tol)
            cur = new_cur
            if converged:
                inner_used = m
                break
        field = cur
        snapshots.append(field.copy())
        maxdiv, l2div = divergence_monitor(field, table)
        if history is not None:
            stats = dict(stats)
            stats["sweeps"] = IterativeStats(inner_used, 0.0, converged)
            history.append(StepReport(step, changes, maxdiv, l2div, stats, converged))
        if writer:
            ch = " ".join(f"d{k}={v:.3e}" for k, v in changes.items())
            writer(f"step={step} inner={inner_used} {ch} maxdiv={maxdiv:.3e}")
    return snapshots
