"""Steady incompressible Navier-Stokes on Taylor-Hood elements.

State solves use undamped Newton from a Stokes warm start with a sparse LU
at each step; the adjoint is the transposed Newton system at the converged
state.  The outflow condition is natural (do-nothing), so meshes without a
Neumann part are rejected instead of silently pinning the pressure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import randfield
from .fem import FeSpace
from .mesh import DIRICHLET, NEUMANN, shape_tag


class SolverError(RuntimeError):
    """Newton divergence or a singular linear system."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SolverSettings:
    newton_tol: float = 1e-10
    newton_max_iter: int = 25

    def __post_init__(self):
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")


DEFAULT_SETTINGS = SolverSettings()


@dataclass(frozen=True)
class FlowState:
    """Velocity (2, n_p2) and pressure (n_vertices,) coefficients."""

    v: np.ndarray
    p: np.ndarray
    newton_residuals: tuple = ()


@dataclass(frozen=True)
class AdjointState:
    phi: np.ndarray
    psi: np.ndarray


def _dirichlet_tags(mesh):
    return [DIRICHLET] + [shape_tag(i) for i in range(mesh.n_shapes)]


def _check_outflow(mesh):
    if not np.any(mesh.boundary_tags == NEUMANN):
        raise SolverError(
            "mesh has no outflow (Neumann) boundary: pressure would be "
            "determined only up to a constant; refusing to pin it silently"
        )


def _inflow_values(space, dofs, xi, model):
    """Dirichlet data for the channel: random inflow profile on the left
    edge, zero on walls and obstacle boundaries."""
    coords = space.dof_coords[dofs]
    outer = space.mesh.vertices[space.mesh.outer_vertices]
    xmin = outer[:, 0].min()
    span = outer[:, 0].max() - xmin
    vals = np.zeros((len(dofs), 2))
    on_inflow = np.abs(coords[:, 0] - xmin) <= 1e-9 * span
    if np.any(on_inflow):
        vals[on_inflow] = randfield.g_eval(coords[on_inflow], xi, model)
    return vals


def _assemble(space, u_flat, nu, f_qp, convection=True, want_matrix=True):
    """Residual of the mixed weak form and (optionally) its Jacobian."""
    n2 = space.n_p2
    cx = u_flat[:n2][space.p2_dofs]
    cy = u_flat[n2 : 2 * n2][space.p2_dofs]
    cp = u_flat[2 * n2 :][space.p1_dofs]
    qw, val, grad = space.qw, space.p2_val, space.p2_grad
    b_elem = _b_elem(space)

    rloc = np.zeros((space.mesh.n_triangles, 15))
    rloc[:, 0:6] = nu * np.einsum("tij,tj->ti", space.k_elem, cx)
    rloc[:, 6:12] = nu * np.einsum("tij,tj->ti", space.k_elem, cy)
    rloc[:, 0:6] -= np.einsum("til,tl->ti", b_elem[0], cp)
    rloc[:, 6:12] -= np.einsum("til,tl->ti", b_elem[1], cp)
    rloc[:, 12:15] = np.einsum("til,ti->tl", b_elem[0], cx)
    rloc[:, 12:15] += np.einsum("til,ti->tl", b_elem[1], cy)

    if convection:
        gx = np.einsum("ti,tqid->tqd", cx, grad)
        gy = np.einsum("ti,tqid->tqd", cy, grad)
        vx = np.einsum("ti,qi->tq", cx, val)
        vy = np.einsum("ti,qi->tq", cy, val)
        conv_x = vx * gx[..., 0] + vy * gx[..., 1]
        conv_y = vx * gy[..., 0] + vy * gy[..., 1]
        rloc[:, 0:6] += np.einsum("tq,qi->ti", qw * conv_x, val)
        rloc[:, 6:12] += np.einsum("tq,qi->ti", qw * conv_y, val)
    if f_qp is not None:
        rloc[:, 0:6] -= np.einsum("tq,qi->ti", qw * f_qp[..., 0], val)
        rloc[:, 6:12] -= np.einsum("tq,qi->ti", qw * f_qp[..., 1], val)

    r = np.bincount(space.gdofs.ravel(), weights=rloc.ravel(), minlength=space.n_total)

    if not want_matrix:
        return r, None

    blocks = np.zeros((space.mesh.n_triangles, 15, 15))
    blocks[:, 0:6, 0:6] = nu * space.k_elem
    blocks[:, 6:12, 6:12] = nu * space.k_elem
    blocks[:, 0:6, 12:15] = -b_elem[0]
    blocks[:, 6:12, 12:15] = -b_elem[1]
    blocks[:, 12:15, 0:6] = b_elem[0].transpose(0, 2, 1)
    blocks[:, 12:15, 6:12] = b_elem[1].transpose(0, 2, 1)
    if convection:
        vg = vx[:, :, None] * grad[..., 0] + vy[:, :, None] * grad[..., 1]
        c2 = np.einsum("tq,qi,tqj->tij", qw, val, vg)
        blocks[:, 0:6, 0:6] += c2
        blocks[:, 6:12, 6:12] += c2
        for c, g in ((0, gx), (1, gy)):
            for d in (0, 1):
                c1 = np.einsum("tq,qi,qj->tij", qw * g[..., d], val, val)
                sl_r = slice(6 * c, 6 * c + 6)
                sl_c = slice(6 * d, 6 * d + 6)
                blocks[:, sl_r, sl_c] += c1
    a_mat = sp.coo_matrix(
        (blocks.ravel(), (space.rows15, space.cols15)),
        shape=(space.n_total, space.n_total),
    ).tocsr()
    return r, a_mat


def warm_cache(mesh):
    """Build the mesh-level assembly caches up front.

    Worker threads share these; populating them before fan-out keeps the
    per-sample work read-only on shared state."""
    _b_elem(FeSpace.from_mesh(mesh))


def _b_elem(space):
    """Pressure-gradient coupling integrals, cached on the space:
    b[c][t,i,l] = integral lambda_l d_c N_i."""
    if not hasattr(space, "_b_elem"):
        space._b_elem = np.stack(
            [
                np.einsum("tq,tqi,ql->til", space.qw, space.p2_grad[..., c], space.p1_val)
                for c in range(2)
            ]
        )
    return space._b_elem


def _eliminate(a_mat, r, fixed, n):
    free = np.ones(n)
    free[fixed] = 0.0
    proj = sp.diags(free)
    a_e = proj @ a_mat @ proj + sp.diags(1.0 - free)
    return a_e.tocsc(), r * free, free


def _fixed_velocity_dofs(space):
    mesh = space.mesh
    d_scalar = space.p2_dofs_for_tags(_dirichlet_tags(mesh))
    return d_scalar, np.concatenate([d_scalar, space.n_p2 + d_scalar])


def _lu(a_csc):
    try:
        return spla.splu(a_csc)
    except RuntimeError as exc:
        raise SolverError(f"singular linear system: {exc}") from exc


def _flat(space, v, p):
    u = np.empty(space.n_total)
    u[: space.n_p2] = v[0]
    u[space.n_p2 : 2 * space.n_p2] = v[1]
    u[2 * space.n_p2 :] = p
    return u


def solve_state(
    mesh,
    xi,
    nu: float,
    f=None,
    settings: SolverSettings = DEFAULT_SETTINGS,
    dirichlet=None,
    model=randfield.DEFAULT_MODEL,
) -> FlowState:
    """Newton solve of the state equations on the given mesh.

    xi parametrizes the inflow profile; a `dirichlet` callable
    (coords -> (n,2) values on the whole Dirichlet part) overrides it for
    manufactured-solution runs.  f is an optional body-force callable.
    """
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    _check_outflow(mesh)
    space = FeSpace.from_mesh(mesh)
    n2 = space.n_p2

    d_scalar, fixed = _fixed_velocity_dofs(space)
    if dirichlet is not None:
        g_vals = np.asarray(dirichlet(space.dof_coords[d_scalar]), dtype=float)
    else:
        g_vals = _inflow_values(space, d_scalar, np.asarray(xi, dtype=float), model)

    u = np.zeros(space.n_total)
    u[d_scalar] = g_vals[:, 0]
    u[n2 + d_scalar] = g_vals[:, 1]

    f_qp = None
    if f is not None:
        nt, nq = space.qw.shape
        f_qp = np.asarray(f(space.qp.reshape(-1, 2)), dtype=float).reshape(nt, nq, 2)

    # Stokes warm start: one exact solve of the linear problem.
    r, a_mat = _assemble(space, u, nu, f_qp, convection=False)
    a_e, r_e, free = _eliminate(a_mat, r, fixed, space.n_total)
    u += _lu(a_e).solve(-r_e)

    residuals = []
    for _ in range(settings.newton_max_iter + 1):
        r, a_mat = _assemble(space, u, nu, f_qp, convection=True)
        r_e = r * free
        rn = float(np.linalg.norm(r_e))
        residuals.append(rn)
        if not np.isfinite(rn):
            raise SolverError("Newton iteration produced non-finite residual", rn)
        if rn <= settings.newton_tol:
            return FlowState(
                v=np.vstack([u[:n2], u[n2 : 2 * n2]]),
                p=u[2 * n2 :].copy(),
                newton_residuals=tuple(residuals),
            )
        a_e = _eliminate(a_mat, r, fixed, space.n_total)[0]
        u += _lu(a_e).solve(-r_e)
    raise SolverError(
        f"Newton did not converge in {settings.newton_max_iter} iterations "
        f"(last residual {residuals[-1]:.3e})",
        residuals[-1],
    )


def solve_adjoint(
    mesh,
    state: FlowState,
    nu: float,
    settings: SolverSettings = DEFAULT_SETTINGS,
    objective_scale: float = 1.0,
) -> AdjointState:
    """Linear adjoint solve: transposed Newton system at the converged state,
    right-hand side from the dissipation objective, homogeneous Dirichlet
    data on the inflow, walls, and obstacle boundaries."""
    _check_outflow(mesh)
    space = FeSpace.from_mesh(mesh)
    n2 = space.n_p2
    u = _flat(space, state.v, state.p)
    _, a_mat = _assemble(space, u, nu, None, convection=True)
    _, fixed = _fixed_velocity_dofs(space)
    a_e, _, free = _eliminate(a_mat, np.zeros(space.n_total), fixed, space.n_total)

    rhs = np.zeros(space.n_total)
    rhs[:n2] = -objective_scale * nu * (space.k_p2 @ state.v[0])
    rhs[n2 : 2 * n2] = -objective_scale * nu * (space.k_p2 @ state.v[1])
    rhs *= free
    sol = _lu(a_e).solve(rhs, trans="T")
    if not np.all(np.isfinite(sol)):
        raise SolverError("adjoint solve produced non-finite values")
    return AdjointState(
        phi=np.vstack([sol[:n2], sol[n2 : 2 * n2]]), psi=sol[2 * n2 :].copy()
    )


def objective(mesh, state: FlowState, nu: float) -> float:
    """Expected-dissipation integrand at one sample: (nu/2) int grad v : grad v."""
    space = FeSpace.from_mesh(mesh)
    return 0.5 * nu * float(
        state.v[0] @ (space.k_p2 @ state.v[0]) + state.v[1] @ (space.k_p2 @ state.v[1])
    )


def penalty_value(h, lam, mu: float) -> float:
    """Augmented-penalty part: (mu/2)||max(0, h + lam/mu)||^2 - ||lam||^2/(2 mu)."""
    if mu <= 0:
        raise ValueError("penalty factor mu must be positive")
    h = np.asarray(h, dtype=float)
    lam = np.asarray(lam, dtype=float)
    active = np.maximum(0.0, h + lam / mu)
    return 0.5 * mu * float(active @ active) - float(lam @ lam) / (2.0 * mu)


def aug_lagrangian_value(mesh, state, adjoint, h, lam, mu, nu, f=None) -> float:
    """Objective + PDE residual tested with the adjoint + constraint penalty.

    At a converged state the residual term is below solver tolerance, so the
    value is J plus the penalty; the term is kept so the value is exact for
    non-converged states too (finite-difference probes)."""
    space = FeSpace.from_mesh(mesh)
    u = _flat(space, state.v, state.p)
    f_qp = None
    if f is not None:
        nt, nq = space.qw.shape
        f_qp = np.asarray(f(space.qp.reshape(-1, 2)), dtype=float).reshape(nt, nq, 2)
    r, _ = _assemble(space, u, nu, f_qp, convection=True, want_matrix=False)
    phi_flat = _flat(space, adjoint.phi, adjoint.psi)
    residual_term = float(r @ phi_flat)
    return objective(mesh, state, nu) + residual_term + penalty_value(h, lam, mu)


def divergence_residual(mesh, v) -> float:
    """Euclidean norm of the continuity residual: int div(v) p1_basis."""
    space = FeSpace.from_mesh(mesh)
    u = _flat(space, v, np.zeros(space.n_p))
    r, _ = _assemble(space, u, 1.0, None, convection=False, want_matrix=False)
    return float(np.linalg.norm(r[2 * space.n_p2 :]))


def write_vtk(path, mesh, state: FlowState):
    """Legacy ASCII VTK with vertex velocity, pressure, and speed."""
    nv = mesh.n_vertices
    vx, vy = state.v[0][:nv], state.v[1][:nv]
    speed = np.hypot(vx, vy)
    with open(path, "w") as out:
        out.write("# vtk DataFile Version 2.0\n")
        out.write("flow field\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        out.write(f"POINTS {nv} double\n")
        for (x, y) in mesh.vertices:
            out.write(f"{x} {y} 0.0\n")
        nt = mesh.n_triangles
        out.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            out.write(f"3 {a} {b} {c}\n")
        out.write(f"CELL_TYPES {nt}\n")
        out.write("5\n" * nt)
        out.write(f"POINT_DATA {nv}\n")
        out.write("VECTORS velocity double\n")
        for k in range(nv):
            out.write(f"{vx[k]} {vy[k]} 0.0\n")
        out.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
        for val in state.p:
            out.write(f"{val}\n")
        out.write("SCALARS speed double 1\nLOOKUP_TABLE default\n")
        for val in speed:
            out.write(f"{val}\n")
