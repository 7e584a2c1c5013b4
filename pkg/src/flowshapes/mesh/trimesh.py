"""Immutable triangle mesh with tagged boundary and obstacle polylines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import ShapeSet

# Boundary tag convention (also the MSH physical-group ids):
# outer Dirichlet walls/inflow, outer Neumann outflow, shape i -> 10 + i.
DIRICHLET = 1
NEUMANN = 2
SHAPE_BASE = 10


def shape_tag(i: int) -> int:
    return SHAPE_BASE + i


def is_shape_tag(tag: int) -> bool:
    return tag >= SHAPE_BASE


def shape_index(tag: int) -> int:
    return tag - SHAPE_BASE


class MeshError(RuntimeError):
    """Invalid mesh topology, failed generation, or failed remesh."""


@dataclass(frozen=True)
class MeshQuality:
    """Radius-ratio summary: 2 inradius / circumradius, in [0, 1]."""

    min_radius_ratio: float
    max_radius_ratio: float


def _frozen(arr, dtype):
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


class TriMesh:
    """Conforming triangulation of the flow domain.

    Vertices, triangles (CCW), tagged boundary edges, and per-shape loops of
    vertex indices tracing each obstacle polyline counter-clockwise.
    Instances are immutable; deformation and remeshing build new ones.
    """

    def __init__(
        self,
        vertices,
        triangles,
        boundary_edges,
        boundary_tags,
        shape_vertex_map=(),
        target_edge_length: float | None = None,
        validate: bool = True,
    ):
        self.vertices = _frozen(vertices, float)
        self.triangles = _frozen(triangles, np.int32)
        self.boundary_edges = _frozen(boundary_edges, np.int32)
        self.boundary_tags = _frozen(boundary_tags, np.int32)
        self.shape_vertex_map = tuple(_frozen(loop, np.int32) for loop in shape_vertex_map)
        self.target_edge_length = target_edge_length
        self._cache: dict = {}
        if validate:
            self._validate()

    # -- basic counts ------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_shapes(self) -> int:
        return len(self.shape_vertex_map)

    # -- derived, cached ---------------------------------------------------

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def signed_areas(self) -> np.ndarray:
        def compute():
            p = self.vertices[self.triangles]
            d1 = p[:, 1] - p[:, 0]
            d2 = p[:, 2] - p[:, 0]
            return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

        return self._cached("signed_areas", compute)

    @property
    def is_tangled(self) -> bool:
        return bool(np.any(self.signed_areas <= 0.0))

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, lexicographic."""
        return self._edge_data()[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """Per triangle: indices into edges for local edges (0,1),(1,2),(2,0)."""
        return self._edge_data()[1]

    def _edge_data(self):
        def compute():
            t = self.triangles
            raw = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            raw.sort(axis=1)
            edges, inverse = np.unique(raw, axis=0, return_inverse=True)
            tri_edges = inverse.reshape(3, -1).T
            return edges, np.ascontiguousarray(tri_edges, dtype=np.int64)

        return self._cached("edge_data", compute)

    @property
    def radius_ratios(self) -> np.ndarray:
        def compute():
            p = self.vertices[self.triangles]
            a = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
            b = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
            c = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
            area = np.abs(self.signed_areas)
            denom = (a + b + c) * a * b * c
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(denom > 0.0, 16.0 * area**2 / denom, 0.0)
            return np.clip(ratio, 0.0, 1.0)

        return self._cached("radius_ratios", compute)

    @property
    def outer_vertices(self) -> np.ndarray:
        """Vertex indices on the outer rectangle boundary (Gamma)."""

        def compute():
            mask = (self.boundary_tags == DIRICHLET) | (self.boundary_tags == NEUMANN)
            return np.unique(self.boundary_edges[mask])

        return self._cached("outer_vertices", compute)

    @property
    def shape_vertices(self) -> np.ndarray:
        """All vertex indices on obstacle boundaries."""

        def compute():
            if not self.shape_vertex_map:
                return np.empty(0, dtype=np.int32)
            return np.unique(np.concatenate(self.shape_vertex_map))

        return self._cached("shape_vertices", compute)

    def boundary_edges_with_tag(self, tag: int) -> np.ndarray:
        return self.boundary_edges[self.boundary_tags == tag]

    def shapes(self) -> ShapeSet:
        """Current obstacle polylines as a ShapeSet (geometry not re-validated)."""
        return ShapeSet([self.vertices[loop] for loop in self.shape_vertex_map], validate=False)

    def with_vertices(self, vertices, validate: bool = False) -> "TriMesh":
        return TriMesh(
            vertices,
            self.triangles,
            self.boundary_edges,
            self.boundary_tags,
            self.shape_vertex_map,
            self.target_edge_length,
            validate=validate,
        )

    # -- validation --------------------------------------------------------

    def _validate(self):
        nv = self.n_vertices
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise MeshError("triangle vertex index out of range")
        if np.any(self.signed_areas <= 0.0):
            bad = int(np.argmin(self.signed_areas))
            raise MeshError(f"triangle {bad} has non-positive area {self.signed_areas[bad]:.3e}")
        if self.boundary_edges.shape[0] != self.boundary_tags.shape[0]:
            raise MeshError("boundary_edges and boundary_tags lengths differ")

        # Topological boundary must match the tagged edge set exactly, and
        # interior edges must be shared by exactly two triangles (manifold).
        t = self.triangles
        raw = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        raw_sorted = np.sort(raw, axis=1)
        uniq, counts = np.unique(raw_sorted, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-manifold edge (shared by more than two triangles)")
        topo = {tuple(e) for e in uniq[counts == 1]}
        tagged = {tuple(sorted(e)) for e in self.boundary_edges.tolist()}
        if topo != tagged:
            missing = topo - tagged
            extra = tagged - topo
            raise MeshError(
                f"boundary mismatch: {len(missing)} untagged boundary edges, "
                f"{len(extra)} tags on non-boundary edges"
            )
        if len(tagged) != self.boundary_edges.shape[0]:
            raise MeshError("duplicate boundary edge tags")

        for tag in np.unique(self.boundary_tags):
            if tag not in (DIRICHLET, NEUMANN) and not is_shape_tag(int(tag)):
                raise MeshError(f"unknown boundary tag {tag}")

        # Shape loops: closed, CCW, and exactly covering their tagged edges.
        for i, loop in enumerate(self.shape_vertex_map):
            if loop.shape[0] < 3:
                raise MeshError(f"shape {i}: loop has fewer than 3 vertices")
            loop_edges = {
                tuple(sorted((int(loop[j]), int(loop[(j + 1) % len(loop)]))))
                for j in range(len(loop))
            }
            tag_edges = {
                tuple(sorted(e)) for e in self.boundary_edges_with_tag(shape_tag(i)).tolist()
            }
            if loop_edges != tag_edges:
                raise MeshError(f"shape {i}: vertex loop does not match its tagged edges")
            pts = self.vertices[loop]
            x, y = pts[:, 0], pts[:, 1]
            area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
            if area2 <= 0.0:
                raise MeshError(f"shape {i}: loop is not counter-clockwise")

    def quality(self) -> MeshQuality:
        r = self.radius_ratios
        if r.size == 0:
            raise MeshError("empty mesh has no quality")
        return MeshQuality(float(r.min()), float(r.max()))


def quality(mesh: TriMesh) -> MeshQuality:
    """Min/max radius ratio over the mesh."""
    return mesh.quality()


def needs_remesh(mesh: TriMesh, threshold: float = 0.4) -> bool:
    """True when the worst radius ratio drops below the threshold."""
    return bool(mesh.radius_ratios.min() < threshold)


def deform(mesh: TriMesh, field, t: float) -> TriMesh:
    """Move vertices to x + t * field(x); connectivity unchanged.

    The field must vanish on the outer boundary.  The result may contain
    inverted triangles (mesh.is_tangled); the caller decides whether to
    remesh or reject the step.
    """
    field = np.asarray(field, dtype=float)
    if field.shape != mesh.vertices.shape:
        raise MeshError(f"field shape {field.shape} != vertices shape {mesh.vertices.shape}")
    outer = mesh.outer_vertices
    if outer.size:
        worst = float(np.abs(field[outer]).max())
        if worst > 1e-12:
            raise MeshError(f"deformation field does not vanish on the outer boundary ({worst:.2e})")
    return mesh.with_vertices(mesh.vertices + t * field, validate=False)
