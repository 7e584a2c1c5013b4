"""Shape derivative of the augmented Lagrangian and the deformation solve.

The derivative is assembled in volume form as a linear functional on P1
vector fields that vanish on the outer boundary.  Assembled with the same
quadrature as the state solve, it is the exact derivative of the
quadrature-discretized reduced functional, which is what the finite
difference consistency test checks.  Deformation directions come from a
Steklov-Poincare problem: linear elasticity with a harmonically blended
stiffness that protects the near-shape region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry
from .fem import FeSpace

VARIANTS = ("kkt", "verbatim")


@dataclass(frozen=True)
class DerivativeFunctional:
    """P1 dual vector: <dL, W> = sum(values * W); zero on outer boundary."""

    values: np.ndarray  # (n_vertices, 2)

    def pairing(self, field) -> float:
        return float(np.sum(self.values * field))

    def __add__(self, other):
        return DerivativeFunctional(self.values + other.values)

    def scaled(self, a: float) -> "DerivativeFunctional":
        return DerivativeFunctional(a * self.values)


@dataclass(frozen=True)
class StiffnessField:
    values: np.ndarray  # (n_vertices,)


@dataclass(frozen=True)
class DeformationField:
    v: np.ndarray  # (n_vertices, 2)
    h1_norm: float


def multiplier_vector(h, lam, mu: float, variant: str = "kkt") -> np.ndarray:
    """Constraint weights in the derivative of the augmented Lagrangian.

    kkt:      mu * max(0, h + lam/mu)   (gradient of the penalty actually used)
    verbatim: mu * min(0, h + lam/mu)   (the printed formula's factor)
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown multiplier variant {variant!r}")
    if mu <= 0:
        raise ValueError("penalty factor mu must be positive")
    shifted = np.asarray(h, dtype=float) + np.asarray(lam, dtype=float) / mu
    if variant == "kkt":
        return mu * np.maximum(0.0, shifted)
    return mu * np.minimum(0.0, shifted)


def _volume_terms(mesh, state, adjoint, nu: float, f=None) -> np.ndarray:
    """Volume part of the shape derivative, for all P1 test fields at once.

    Per test field W = e_c * hat_l the integrand is assembled from the
    transported weak forms; returns (n_vertices, 2).
    """
    space = FeSpace.from_mesh(mesh)
    nv = mesh.n_vertices
    qw = space.qw
    p1g = space.p1_grad  # (nt, 3, 2), constant per element

    gv = np.stack([space.p2_grad_at_qp(state.v[j]) for j in range(2)], axis=2)
    gphi = np.stack([space.p2_grad_at_qp(adjoint.phi[j]) for j in range(2)], axis=2)
    v_q = np.stack([space.p2_at_qp(state.v[j]) for j in range(2)], axis=-1)
    phi_q = np.stack([space.p2_at_qp(adjoint.phi[j]) for j in range(2)], axis=-1)
    p_q = space.p1_at_qp(state.p)
    psi_q = space.p1_at_qp(adjoint.psi)

    div_v = gv[..., 0, 0] + gv[..., 1, 1]
    div_phi = gphi[..., 0, 0] + gphi[..., 1, 1]
    conv = np.einsum("tqd,tqjd->tqj", v_q, gv)  # (v.grad)v

    s_bulk = (
        nu * np.einsum("tqjd,tqjd->tq", gv, 0.5 * gv + gphi)
        + np.einsum("tqj,tqj->tq", conv, phi_q)
        - p_q * div_phi
        + psi_q * div_v
    )

    f_q = None
    grad_f = None
    if f is not None:
        nt, nq = qw.shape
        f_q = np.asarray(f(space.qp.reshape(-1, 2)), dtype=float).reshape(nt, nq, 2)
        s_bulk -= np.einsum("tqj,tqj->tq", f_q, phi_q)
        # P1-interpolated source gradient, constant per element
        f_vert = np.asarray(f(mesh.vertices), dtype=float)
        grad_f = np.einsum("tlj,tld->tjd", f_vert[mesh.triangles], p1g)

    out = np.zeros((nv, 2))
    for c in range(2):
        # viscous transport: a_c = sum_j d_c v_j (grad v_j + grad phi_j)
        #                        + sum_j d_c phi_j grad v_j
        a_c = np.einsum("tqj,tqjd->tqd", gv[..., c], gv + gphi) + np.einsum(
            "tqj,tqjd->tqd", gphi[..., c], gv
        )
        wa = -nu * np.einsum("tq,tqd->td", qw, a_c)
        # convection transport: -(grad hat . v) sum_j d_c v_j phi_j
        conv_c = np.einsum("tqj,tqj->tq", gv[..., c], phi_q)
        wa -= np.einsum("tq,tqd->td", qw * conv_c, v_q)
        # pressure/continuity transport: sum_j (p d_c phi_j - psi d_c v_j) g_j
        vec3 = p_q[..., None] * gphi[..., c] - psi_q[..., None] * gv[..., c]
        wa += np.einsum("tq,tqj->tj", qw, vec3)
        floc = np.einsum("td,tld->tl", wa, p1g)
        # div W bracket: g_c * integral of s_bulk
        floc += np.einsum("tq,tl->tl", qw * s_bulk, p1g[:, :, c])
        if grad_f is not None:
            inner = np.einsum("tj,tqj->tq", grad_f[:, :, c], phi_q)
            floc -= np.einsum("tq,ql->tl", qw * inner, space.p1_val)
        out[:, c] = np.bincount(
            mesh.triangles.ravel(), weights=floc.ravel(), minlength=nv
        )
    out[mesh.outer_vertices] = 0.0
    return out


def _constraint_terms(mesh, shapes, m: np.ndarray) -> np.ndarray:
    """Boundary part: m . d(constraint vector)[W] accumulated per vertex.

    Constraint rows: volume lower bounds (s), barycenter lower bounds (2s,
    shape-major x then y), barycenter upper bounds (2s)."""
    nv = mesh.n_vertices
    s = len(shapes)
    out = np.zeros((nv, 2))
    for i in range(s):
        loop = mesh.shape_vertex_map[i]
        d_vol, d_bx, d_by = geometry.shape_gradients(shapes[i])
        w_vol = -m[i]
        w_bx = -m[s + 2 * i] + m[3 * s + 2 * i]
        w_by = -m[s + 2 * i + 1] + m[3 * s + 2 * i + 1]
        contrib = w_vol * d_vol + w_bx * d_bx + w_by * d_by
        np.add.at(out, loop, contrib)
    return out


def assemble_dLA(
    mesh,
    state,
    adjoint,
    constraints,
    lam,
    mu: float,
    nu: float,
    f=None,
    shapes=None,
    variant: str = "kkt",
) -> DerivativeFunctional:
    """Shape derivative of the augmented Lagrangian at one sample."""
    if shapes is None:
        shapes = mesh.shapes()
    h = geometry.constraint_vector(shapes, constraints)
    m = multiplier_vector(h, lam, mu, variant)
    vals = _volume_terms(mesh, state, adjoint, nu, f)
    vals += _constraint_terms(mesh, shapes, m)
    if not np.all(np.isfinite(vals)):
        raise ValueError("shape derivative contains non-finite entries")
    return DerivativeFunctional(vals)


def assemble_dL_lagrangian(
    mesh, state, adjoint, constraints, lam, nu: float, f=None, shapes=None
) -> DerivativeFunctional:
    """Shape derivative of the plain Lagrangian J + lam . h (no penalty)."""
    if shapes is None:
        shapes = mesh.shapes()
    vals = _volume_terms(mesh, state, adjoint, nu, f)
    vals += _constraint_terms(mesh, shapes, np.asarray(lam, dtype=float))
    if not np.all(np.isfinite(vals)):
        raise ValueError("shape derivative contains non-finite entries")
    return DerivativeFunctional(vals)


# -- P1 scalar helpers --------------------------------------------------------


def _p1_matrices(mesh):
    """P1 stiffness and mass matrices (unit coefficient), cached on the mesh."""
    cache = mesh._cache
    if "p1_matrices" not in cache:
        space = FeSpace.from_mesh(mesh)
        p1g = space.p1_grad
        area = np.abs(mesh.signed_areas)
        k_loc = np.einsum("t,tld,tmd->tlm", area, p1g, p1g)
        # exact P1 mass: area/12 * (1 + kronecker)
        m_loc = (area[:, None, None] / 12.0) * (np.ones((3, 3)) + np.eye(3))
        rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
        cols = np.tile(mesh.triangles, (1, 3)).ravel()
        nv = mesh.n_vertices
        k_mat = sp.coo_matrix((k_loc.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
        m_mat = sp.coo_matrix((m_loc.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
        cache["p1_matrices"] = (k_mat, m_mat)
    return cache["p1_matrices"]


def h1_inner(mesh, a, b) -> float:
    """Full H1 inner product of two P1 vector fields (n_vertices, 2)."""
    k_mat, m_mat = _p1_matrices(mesh)
    total = 0.0
    for c in range(2):
        total += float(a[:, c] @ (k_mat @ b[:, c]) + a[:, c] @ (m_mat @ b[:, c]))
    return total


def h1_norm(mesh, field) -> float:
    return float(np.sqrt(max(0.0, h1_inner(mesh, field, field))))


def solve_stiffness(mesh, mu_max: float = 33.0, mu_min: float = 10.0) -> StiffnessField:
    """Harmonic blend: Laplace solve with mu_max on obstacle boundaries and
    mu_min on the outer boundary."""
    k_mat, _ = _p1_matrices(mesh)
    nv = mesh.n_vertices
    vals = np.zeros(nv)
    fixed = np.zeros(nv, dtype=bool)
    fixed[mesh.outer_vertices] = True
    vals[mesh.outer_vertices] = mu_min
    fixed[mesh.shape_vertices] = True
    vals[mesh.shape_vertices] = mu_max
    free = ~fixed
    if not np.any(free):
        return StiffnessField(vals)
    rhs = -(k_mat @ vals)[free]
    k_ff = k_mat[free][:, free].tocsc()
    try:
        vals[free] = spla.splu(k_ff).solve(rhs)
    except RuntimeError as exc:
        raise RuntimeError(f"singular stiffness system: {exc}") from exc
    return StiffnessField(vals)


def _elasticity_matrix(mesh, stiffness: StiffnessField):
    """2 mu_hat eps(V):eps(W) on P1 vectors; cached per (mesh, stiffness)."""
    space = FeSpace.from_mesh(mesh)
    p1g = space.p1_grad
    area = np.abs(mesh.signed_areas)
    mu_bar = stiffness.values[mesh.triangles].mean(axis=1)
    coef = mu_bar * area
    gg = np.einsum("tld,tmd->tlm", p1g, p1g)
    nv = mesh.n_vertices
    blocks = np.zeros((mesh.n_triangles, 6, 6))
    for c in range(2):
        for cp in range(2):
            blk = np.einsum("t,tm,tl->tlm", coef, p1g[:, :, c], p1g[:, :, cp])
            if c == cp:
                blk = blk + coef[:, None, None] * gg
            blocks[:, 3 * c : 3 * c + 3, 3 * cp : 3 * cp + 3] = blk
    gdofs = np.hstack([mesh.triangles, nv + mesh.triangles]).astype(np.int64)
    rows = np.repeat(gdofs, 6, axis=1).ravel()
    cols = np.tile(gdofs, (1, 6)).ravel()
    return sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(2 * nv, 2 * nv)).tocsr()


def solve_deformation(mesh, rhs: DerivativeFunctional, stiffness: StiffnessField) -> DeformationField:
    """Deformation direction: a(V, W) = <rhs, W> for all W vanishing on the
    outer boundary; obstacle vertices are free."""
    nv = mesh.n_vertices
    cache = mesh._cache
    key = ("elasticity_lu", stiffness.values.tobytes())
    if key not in cache:
        a_mat = _elasticity_matrix(mesh, stiffness)
        fixed = np.concatenate([mesh.outer_vertices, nv + mesh.outer_vertices])
        free = np.ones(2 * nv)
        free[fixed] = 0.0
        proj = sp.diags(free)
        a_e = (proj @ a_mat @ proj + sp.diags(1.0 - free)).tocsc()
        cache[key] = (spla.splu(a_e), free)
    lu, free = cache[key]
    b = np.concatenate([rhs.values[:, 0], rhs.values[:, 1]]) * free
    sol = lu.solve(b)
    v = np.column_stack([sol[:nv], sol[nv:]])
    return DeformationField(v=v, h1_norm=h1_norm(mesh, v))


def riesz_h1(mesh, rhs: DerivativeFunctional) -> DeformationField:
    """Riesz representative of the functional in the full H1 inner product,
    on the same space (zero on the outer boundary)."""
    k_mat, m_mat = _p1_matrices(mesh)
    nv = mesh.n_vertices
    a_scalar = (k_mat + m_mat).tocsc()
    fixed = mesh.outer_vertices
    free_mask = np.ones(nv)
    free_mask[fixed] = 0.0
    proj = sp.diags(free_mask)
    a_e = (proj @ a_scalar @ proj + sp.diags(1.0 - free_mask)).tocsc()
    lu = spla.splu(a_e)
    v = np.column_stack(
        [lu.solve(rhs.values[:, 0] * free_mask), lu.solve(rhs.values[:, 1] * free_mask)]
    )
    return DeformationField(v=v, h1_norm=h1_norm(mesh, v))
