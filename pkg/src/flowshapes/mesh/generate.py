"""Mesh generation: CDT of a rectangle with polygonal holes, plus helpers.

`generate_benchmark` builds the channel-with-obstacles mesh used everywhere;
`remesh` rebuilds it from a deformed mesh's current polylines. Structured
grids and uniform refinement support convergence studies on simple domains.
"""

from __future__ import annotations

import numpy as np

from .. import geometry
from .cdt import Triangulation, _ukey
from .trimesh import DIRICHLET, NEUMANN, MeshError, TriMesh, is_shape_tag, shape_index, shape_tag


def _rect_loop(bounds):
    xmin, xmax, ymin, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise MeshError("degenerate rectangle bounds")
    return np.array(
        [[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]], dtype=float
    )


def _side_tags(tags):
    """(bottom, right, top, left) boundary tags for the rectangle loop."""
    if tags is None:
        return (DIRICHLET, NEUMANN, DIRICHLET, DIRICHLET)
    return tuple(tags)


def triangulate_region(
    outer_corners,
    corner_edge_tags,
    holes,
    target_h: float,
    quality_ratio: float = 0.45,
    smooth_passes: int = 3,
):
    """CDT of a convex polygon minus hole interiors, refined to target_h.

    corner_edge_tags[i] tags the outer edge corner i -> corner i+1. Outer
    edges are subdivided to the target length up front and may be split
    further during refinement; hole polylines are kept vertex-for-vertex.
    Returns a TriMesh.
    """
    outer_corners = np.asarray(outer_corners, dtype=float)
    n_corner = len(outer_corners)
    tri = Triangulation(outer_corners.min(axis=0), outer_corners.max(axis=0))

    # Outer boundary: subdivided corner-to-corner chains.
    outer_ids: list[list[int]] = []
    for i in range(n_corner):
        a = outer_corners[i]
        b = outer_corners[(i + 1) % n_corner]
        n_seg = max(1, int(np.ceil(np.hypot(*(b - a)) / target_h)))
        chain = []
        for j in range(n_seg):
            p = a + (b - a) * (j / n_seg)
            v = tri.insert_point(p, snap_tol=1e-9 * target_h)
            if v is None:
                raise MeshError("failed to insert an outer boundary point")
            chain.append(v)
        outer_ids.append(chain)
    for i in range(n_corner):
        chain = outer_ids[i] + [outer_ids[(i + 1) % n_corner][0]]
        for u, v in zip(chain[:-1], chain[1:]):
            tri.insert_segment(u, v, int(corner_edge_tags[i]))

    # Holes: exact polyline vertices, one constrained segment per edge.
    shape_loops: list[list[int]] = []
    for i, poly in enumerate(holes):
        ids = []
        for p in np.asarray(poly, dtype=float):
            v = tri.insert_point(p, snap_tol=0.0)
            if v is None:
                raise MeshError(f"failed to insert a vertex of shape {i}")
            ids.append(v)
        for u, v in zip(ids, ids[1:] + ids[:1]):
            tri.insert_segment(u, v, shape_tag(i))
        shape_loops.append(ids)

    hole_arrays = [np.asarray(p, dtype=float) for p in holes]

    def in_domain(pts):
        keep = geometry.point_in_polygon(pts, outer_corners)
        for poly in hole_arrays:
            keep &= ~geometry.point_in_polygon(pts, poly)
        return keep

    tri.refine(
        target_h,
        in_domain,
        splittable=lambda tag: not is_shape_tag(tag),
        min_ratio=quality_ratio,
    )

    points, triangles, b_edges, b_tags, old_to_new = tri.extract(in_domain)
    shape_vertex_map = tuple(
        tuple(old_to_new[v] for v in loop) for loop in shape_loops
    )
    points = _smooth(points, triangles, b_edges, smooth_passes)
    return TriMesh(
        points,
        triangles,
        b_edges,
        b_tags,
        shape_vertex_map,
        target_edge_length=target_h,
    )


def _smooth(points, triangles, boundary_edges, passes: int):
    """Laplacian smoothing of interior vertices; a move is kept only if the
    worst radius ratio among incident triangles improves and no triangle
    flips."""
    if passes <= 0:
        return points
    pts = points.copy()
    n = len(pts)
    fixed = np.zeros(n, dtype=bool)
    fixed[np.unique(boundary_edges)] = True

    v2t: list[list[int]] = [[] for _ in range(n)]
    for t, (a, b, c) in enumerate(triangles):
        v2t[a].append(t)
        v2t[b].append(t)
        v2t[c].append(t)
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for a, b, c in triangles:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))

    def local_worst(v):
        worst = np.inf
        for t in v2t[v]:
            a, b, c = triangles[t]
            pa, pb, pc = pts[a], pts[b], pts[c]
            area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
            if area2 <= 0.0:
                return -1.0
            la = np.hypot(pb[0] - pa[0], pb[1] - pa[1])
            lb = np.hypot(pc[0] - pb[0], pc[1] - pb[1])
            lc = np.hypot(pa[0] - pc[0], pa[1] - pc[1])
            worst = min(worst, 4.0 * area2 * area2 / ((la + lb + lc) * la * lb * lc))
        return worst

    for _ in range(passes):
        for v in range(n):
            if fixed[v] or not nbrs[v]:
                continue
            before = local_worst(v)
            old = pts[v].copy()
            pts[v] = np.mean([pts[u] for u in nbrs[v]], axis=0)
            if local_worst(v) <= before:
                pts[v] = old
    return pts


def generate_benchmark(bounds, shapes, target_edge_length: float) -> TriMesh:
    """Conforming mesh of a rectangle minus obstacle interiors.

    bounds = (xmin, xmax, ymin, ymax). Rectangle sides: bottom, top and left
    are Dirichlet, the right (outflow) side is Neumann. Obstacle polylines
    appear vertex-for-vertex with tags 10 + i.
    """
    xmin, xmax, ymin, ymax = bounds
    corners = _rect_loop(bounds)
    polys = list(shapes)
    for i, poly in enumerate(polys):
        if not geometry.polyline_is_simple(poly):
            raise MeshError(f"shape {i} polyline is self-intersecting")
        if (
            poly[:, 0].min() <= xmin
            or poly[:, 0].max() >= xmax
            or poly[:, 1].min() <= ymin
            or poly[:, 1].max() >= ymax
        ):
            raise MeshError(f"shape {i} touches or leaves the outer rectangle")
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            if _polys_overlap(polys[i], polys[j]):
                raise MeshError(f"shapes {i} and {j} overlap")
    # bottom, right, top, left edge tags
    tags = (DIRICHLET, NEUMANN, DIRICHLET, DIRICHLET)
    return triangulate_region(corners, tags, polys, float(target_edge_length))


def _polys_overlap(pa, pb) -> bool:
    if geometry.point_in_polygon(pa[:1], pb)[0] or geometry.point_in_polygon(pb[:1], pa)[0]:
        return True
    na, nb = len(pa), len(pb)
    for i in range(na):
        a1, a2 = pa[i], pa[(i + 1) % na]
        for j in range(nb):
            b1, b2 = pb[j], pb[(j + 1) % nb]
            if geometry._segments_intersect(a1, a2, b1, b2):
                return True
    return False


def remesh(mesh: TriMesh) -> TriMesh:
    """Re-triangulate the current polygonal domain at the original density.

    Shape polyline edges that grew beyond 1.5x the target length are split
    collinearly first (area-preserving), so boundary resolution follows the
    deformation. The outer rectangle and its tags are taken from the mesh.
    """
    h = mesh.target_edge_length
    if h is None:
        raise MeshError("mesh has no recorded target edge length; cannot remesh")
    polys = []
    for i in range(mesh.n_shapes):
        poly = mesh.vertices[list(mesh.shape_vertex_map[i])]
        if not geometry.polyline_is_simple(poly):
            raise MeshError(f"remesh failed: shape {i} polyline is self-intersecting")
        polys.append(geometry.subdivide_polyline(poly, 1.5 * h))

    outer = mesh.vertices[mesh.outer_vertices]
    xmin, xmax = outer[:, 0].min(), outer[:, 0].max()
    ymin, ymax = outer[:, 1].min(), outer[:, 1].max()
    corners = _rect_loop((xmin, xmax, ymin, ymax))

    # Recover each side's tag from an existing edge on that side.
    side_tag = [None] * 4  # bottom, right, top, left
    tol = 1e-9 * max(xmax - xmin, ymax - ymin)
    for (u, v), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        if is_shape_tag(tag):
            continue
        mid = 0.5 * (mesh.vertices[u] + mesh.vertices[v])
        if abs(mid[1] - ymin) < tol:
            k = 0
        elif abs(mid[0] - xmax) < tol:
            k = 1
        elif abs(mid[1] - ymax) < tol:
            k = 2
        elif abs(mid[0] - xmin) < tol:
            k = 3
        else:
            raise MeshError("outer boundary edge lies on no rectangle side")
        if side_tag[k] is not None and side_tag[k] != tag:
            raise MeshError("inconsistent tags along one rectangle side")
        side_tag[k] = tag
    if any(t is None for t in side_tag):
        raise MeshError("could not recover all four rectangle side tags")

    return triangulate_region(corners, tuple(side_tag), polys, h)


def structured_rectangle(nx: int, ny: int, bounds=(0.0, 1.0, 0.0, 1.0), tags=None) -> TriMesh:
    """Regular grid of 2*nx*ny triangles on a rectangle.

    tags = (bottom, right, top, left), defaulting to Dirichlet everywhere
    except a Neumann right side.
    """
    xmin, xmax, ymin, ymax = bounds
    bt, rt, tt, lt = _side_tags(tags)
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    edges = []
    tags_out = []
    for i in range(nx):
        edges.append((vid(i, 0), vid(i + 1, 0)))
        tags_out.append(bt)
        edges.append((vid(i + 1, ny), vid(i, ny)))
        tags_out.append(tt)
    for j in range(ny):
        edges.append((vid(nx, j), vid(nx, j + 1)))
        tags_out.append(rt)
        edges.append((vid(0, j + 1), vid(0, j)))
        tags_out.append(lt)
    return TriMesh(pts, np.array(tris), np.array(edges), np.array(tags_out))


def uniform_refine(mesh: TriMesh) -> TriMesh:
    """Split every triangle into four via edge midpoints (tags inherited)."""
    pts = mesh.vertices
    edges = mesh.edges
    tri_edges = mesh.tri_edges
    n = mesh.n_vertices
    mids = 0.5 * (pts[edges[:, 0]] + pts[edges[:, 1]])
    new_pts = np.vstack([pts, mids])

    tris = []
    for t, (a, b, c) in enumerate(mesh.triangles):
        mab, mbc, mca = (n + e for e in tri_edges[t])
        tris.extend([(a, mab, mca), (b, mbc, mab), (c, mca, mbc), (mab, mbc, mca)])

    edge_id = {_ukey(int(u), int(v)): n + k for k, (u, v) in enumerate(edges)}
    b_edges = []
    b_tags = []
    for (u, v), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        m = edge_id[_ukey(int(u), int(v))]
        b_edges.extend([(u, m), (m, v)])
        b_tags.extend([tag, tag])

    loops = []
    for raw in mesh.shape_vertex_map:
        loop = [int(v) for v in raw]
        new_loop = []
        for a, b in zip(loop, loop[1:] + loop[:1]):
            new_loop.append(a)
            new_loop.append(edge_id[_ukey(int(a), int(b))])
        loops.append(tuple(new_loop))

    h = mesh.target_edge_length
    return TriMesh(
        new_pts,
        np.array(tris),
        np.array(b_edges),
        np.array(b_tags),
        tuple(loops),
        target_edge_length=None if h is None else 0.5 * h,
    )
