"""Taylor-Hood finite element plumbing on triangle meshes.

P2 vector velocity / P1 pressure, a fixed degree-4 quadrature rule, and the
per-element arrays every assembler in this package shares.  The quadrature
rule is exact for all bilinear-form integrands here (products up to degree
4); element matrices are built once per mesh and cached on the mesh object.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

# Degree-4 rule on the reference triangle, 6 points (barycentric), weights
# normalized to sum to 1 (multiply by element area).
_A1, _B1 = 0.108103018168070, 0.445948490915965
_A2, _B2 = 0.816847572980459, 0.091576213509771
QUAD_BARY = np.array(
    [
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
QUAD_W = np.array(
    [
        0.223381589678011,
        0.223381589678011,
        0.223381589678011,
        0.109951743655322,
        0.109951743655322,
        0.109951743655322,
    ]
)


def p1_values(bary):
    return np.asarray(bary, dtype=float)


def p2_values(bary):
    lam = np.asarray(bary, dtype=float)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.column_stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ]
    )


def p2_barycentric_grads(bary):
    """d(basis)/d(lambda_k): shape (nq, 6, 3)."""
    lam = np.asarray(bary, dtype=float)
    nq = lam.shape[0]
    g = np.zeros((nq, 6, 3))
    for k in range(3):
        g[:, k, k] = 4 * lam[:, k] - 1
    pairs = [(0, 1), (1, 2), (2, 0)]
    for e, (a, b) in enumerate(pairs):
        g[:, 3 + e, a] = 4 * lam[:, b]
        g[:, 3 + e, b] = 4 * lam[:, a]
    return g


class FeSpace:
    """Geometry-dependent FE data for one mesh.

    Velocity dofs: vertex values then edge-midpoint values (n_p2 total) per
    component; pressure dofs: vertex values.  The flat mixed vector is
    [vx, vy, p] with component blocks of size n_p2, n_p2, n_vertices.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        nv = mesh.n_vertices
        edges = mesh.edges
        self.n_p2 = nv + len(edges)
        self.n_p = nv
        self.n_total = 2 * self.n_p2 + self.n_p

        self.p2_dofs = np.hstack([mesh.triangles, nv + mesh.tri_edges]).astype(np.int64)
        self.p1_dofs = mesh.triangles.astype(np.int64)
        self.dof_coords = np.vstack(
            [mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])]
        )

        pts = mesh.vertices[mesh.triangles]
        b_mat = np.stack([pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0]], axis=2)
        det = b_mat[:, 0, 0] * b_mat[:, 1, 1] - b_mat[:, 0, 1] * b_mat[:, 1, 0]
        inv_bt = (
            np.stack(
                [
                    np.stack([b_mat[:, 1, 1], -b_mat[:, 1, 0]], axis=1),
                    np.stack([-b_mat[:, 0, 1], b_mat[:, 0, 0]], axis=1),
                ],
                axis=1,
            )
            / det[:, None, None]
        )
        # quadrature weights include the element area (det = 2 * area)
        self.qw = 0.5 * np.abs(det)[:, None] * QUAD_W[None, :]
        self.qp = np.einsum("qk,tkd->tqd", QUAD_BARY, pts)

        self.p2_val = p2_values(QUAD_BARY)
        self.p1_val = p1_values(QUAD_BARY)
        # barycentric gradients: dlambda/dx rows are [-1 -1; 1 0; 0 1] pulled
        # through the inverse affine map
        dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        lam_x = np.einsum("kr,tdr->tkd", dlam, inv_bt)
        g_bary = p2_barycentric_grads(QUAD_BARY)
        self.p2_grad = np.einsum("qik,tkd->tqid", g_bary, lam_x)
        self.p1_grad = lam_x  # (nt, 3, 2), constant per element

        # scalar P2 stiffness per element and global (viscosity-free)
        self.k_elem = np.einsum("tq,tqid,tqjd->tij", self.qw, self.p2_grad, self.p2_grad)
        rows = np.repeat(self.p2_dofs, 6, axis=1).ravel()
        cols = np.tile(self.p2_dofs, (1, 6)).ravel()
        self.k_p2 = sp.coo_matrix(
            (self.k_elem.ravel(), (rows, cols)), shape=(self.n_p2, self.n_p2)
        ).tocsr()
        # scalar P2 mass matrix (H1 norms of deformation fields)
        m_elem = np.einsum("tq,qi,qj->tij", self.qw, self.p2_val, self.p2_val)
        self.m_p2 = sp.coo_matrix(
            (m_elem.ravel(), (rows, cols)), shape=(self.n_p2, self.n_p2)
        ).tocsr()

        # mixed-system scatter pattern: local dofs [vx(6), vy(6), p(3)]
        n2 = self.n_p2
        gdofs = np.hstack([self.p2_dofs, n2 + self.p2_dofs, 2 * n2 + self.p1_dofs])
        self.gdofs = gdofs
        self.rows15 = np.repeat(gdofs, 15, axis=1).ravel()
        self.cols15 = np.tile(gdofs, (1, 15)).ravel()

        self._edge_id = {
            (int(u), int(v)): k for k, (u, v) in enumerate(edges)
        }

    @classmethod
    def from_mesh(cls, mesh) -> "FeSpace":
        cache = getattr(mesh, "_cache", None)
        if cache is None:
            return cls(mesh)
        if "fe_space" not in cache:
            cache["fe_space"] = cls(mesh)
        return cache["fe_space"]

    def edge_dof(self, u: int, v: int) -> int:
        key = (u, v) if u < v else (v, u)
        return self.mesh.n_vertices + self._edge_id[key]

    def p2_dofs_for_tags(self, tags) -> np.ndarray:
        """Sorted P2 dof indices (scalar numbering) on the given boundary tags."""
        mesh = self.mesh
        tags = set(int(t) for t in tags)
        out = set()
        for (u, v), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            if int(tag) in tags:
                out.add(int(u))
                out.add(int(v))
                out.add(self.edge_dof(int(u), int(v)))
        return np.array(sorted(out), dtype=np.int64)

    def interpolate_p2(self, fn) -> np.ndarray:
        """Nodal interpolation of a callable (n,2)->(n,...) at P2 dof coords."""
        return np.asarray(fn(self.dof_coords))

    def integrate(self, values_at_qp) -> float:
        """Integrate a (nt, nq) sampled integrand."""
        return float(np.sum(self.qw * values_at_qp))

    def p2_at_qp(self, coef) -> np.ndarray:
        """Evaluate a scalar P2 coefficient vector at all quadrature points."""
        return np.einsum("ti,qi->tq", coef[self.p2_dofs], self.p2_val)

    def p2_grad_at_qp(self, coef) -> np.ndarray:
        """Gradient of a scalar P2 field at quadrature points: (nt, nq, 2)."""
        return np.einsum("ti,tqid->tqd", coef[self.p2_dofs], self.p2_grad)

    def p1_at_qp(self, coef) -> np.ndarray:
        return np.einsum("tl,ql->tq", coef[self.p1_dofs], self.p1_val)

    def h1_product(self, a, b) -> float:
        """Full H1 inner product of two (2, n_p2) vector fields."""
        total = 0.0
        for c in range(2):
            total += float(a[c] @ (self.k_p2 @ b[c]) + a[c] @ (self.m_p2 @ b[c]))
        return total
