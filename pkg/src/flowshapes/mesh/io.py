"""Mesh file I/O.

Two formats: MSH 2.2 ASCII (interchange with external tools; physical group
1 = outer Dirichlet, 2 = outer Neumann, 10 + i = shape i) and a native .npz
dump that round-trips a TriMesh exactly, including the shape vertex map and
the recorded target edge length.
"""

from __future__ import annotations

import numpy as np

from .trimesh import MeshError, TriMesh, is_shape_tag

_SURFACE_TAG = 100


def save_msh(mesh: TriMesh, path):
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat"]
    lines.append("$Nodes")
    lines.append(str(mesh.n_vertices))
    for i, (x, y) in enumerate(mesh.vertices, start=1):
        lines.append(f"{i} {float(x)!r} {float(y)!r} 0")
    lines.append("$EndNodes")
    lines.append("$Elements")
    n_elem = len(mesh.boundary_edges) + mesh.n_triangles
    lines.append(str(n_elem))
    eid = 1
    for (u, v), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        lines.append(f"{eid} 1 2 {tag} {tag} {u + 1} {v + 1}")
        eid += 1
    for a, b, c in mesh.triangles:
        lines.append(f"{eid} 2 2 {_SURFACE_TAG} {_SURFACE_TAG} {a + 1} {b + 1} {c + 1}")
        eid += 1
    lines.append("$EndElements")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _chain_loops(edges_by_tag):
    """Order directed edges of one shape into a closed CCW loop."""
    succ = {}
    for u, v in edges_by_tag:
        if u in succ:
            raise MeshError("shape boundary is not a single closed loop")
        succ[u] = v
    start = min(succ)
    loop = [start]
    cur = succ[start]
    while cur != start:
        loop.append(cur)
        if cur not in succ:
            raise MeshError("shape boundary loop is not closed")
        cur = succ[cur]
        if len(loop) > len(succ):
            raise MeshError("shape boundary is not a single closed loop")
    if len(loop) != len(succ):
        raise MeshError("shape boundary is not a single closed loop")
    # Directed boundary edges keep the flow domain on the left, which runs
    # clockwise around a hole; obstacle polylines are stored CCW.
    return loop[::-1]


def load_msh(path) -> TriMesh:
    with open(path) as f:
        tokens = f.read().split("\n")
    it = iter(tokens)

    def until(marker):
        for line in it:
            if line.strip() == marker:
                return
        raise MeshError(f"malformed MSH file: missing {marker}")

    until("$MeshFormat")
    fmt = next(it).split()
    if not fmt or not fmt[0].startswith("2.2"):
        raise MeshError(f"unsupported MSH version {fmt[0] if fmt else '?'}")
    until("$EndMeshFormat")
    until("$Nodes")
    n_nodes = int(next(it))
    coords = np.empty((n_nodes, 2))
    ids = {}
    for k in range(n_nodes):
        parts = next(it).split()
        ids[int(parts[0])] = k
        coords[k] = (float(parts[1]), float(parts[2]))
    until("$EndNodes")
    until("$Elements")
    n_elem = int(next(it))
    b_edges, b_tags, tris = [], [], []
    for _ in range(n_elem):
        parts = next(it).split()
        etype = int(parts[1])
        n_tags = int(parts[2])
        phys = int(parts[3]) if n_tags >= 1 else 0
        verts = [ids[int(p)] for p in parts[3 + n_tags:]]
        if etype == 1:
            if phys <= 0:
                raise MeshError("untagged boundary edge in MSH file")
            b_edges.append(verts)
            b_tags.append(phys)
        elif etype == 2:
            tris.append(verts)
        else:
            raise MeshError(f"unsupported MSH element type {etype}")
    until("$EndElements")
    if not tris:
        raise MeshError("MSH file contains no triangles")

    b_edges = np.asarray(b_edges, dtype=np.int32)
    b_tags = np.asarray(b_tags, dtype=np.int32)
    loops = []
    for tag in sorted({int(t) for t in b_tags if is_shape_tag(t)}):
        loops.append(tuple(_chain_loops(b_edges[b_tags == tag])))
    return TriMesh(coords, np.asarray(tris, dtype=np.int32), b_edges, b_tags, tuple(loops))


def save_mesh(mesh: TriMesh, path):
    """Native format: a flat .npz with a format version marker."""
    if mesh.shape_vertex_map:
        offsets = np.cumsum([0] + [len(l) for l in mesh.shape_vertex_map])
        concat = np.concatenate(mesh.shape_vertex_map)
    else:
        offsets = np.zeros(1, dtype=np.int64)
        concat = np.zeros(0, dtype=np.int32)
    h = mesh.target_edge_length
    np.savez(
        path,
        version=np.int32(1),
        vertices=mesh.vertices,
        triangles=mesh.triangles,
        boundary_edges=mesh.boundary_edges,
        boundary_tags=mesh.boundary_tags,
        shape_offsets=offsets.astype(np.int64),
        shape_concat=concat.astype(np.int32),
        target_edge_length=np.float64(np.nan if h is None else h),
    )


def load_mesh(path) -> TriMesh:
    with np.load(path) as data:
        if int(data["version"]) != 1:
            raise MeshError(f"unsupported mesh file version {int(data['version'])}")
        offsets = data["shape_offsets"]
        concat = data["shape_concat"]
        loops = tuple(
            tuple(int(v) for v in concat[offsets[i]:offsets[i + 1]])
            for i in range(len(offsets) - 1)
        )
        h = float(data["target_edge_length"])
        return TriMesh(
            data["vertices"],
            data["triangles"],
            data["boundary_edges"],
            data["boundary_tags"],
            loops,
            target_edge_length=None if np.isnan(h) else h,
        )


def save_vtk(mesh: TriMesh, path, point_data=None):
    """Legacy ASCII VTK unstructured grid with optional per-vertex scalars.

    point_data maps field names to arrays of length n_vertices; higher-order
    dof values (edge midpoints) are not representable here and must be
    restricted to vertices by the caller.
    """
    lines = [
        "# vtk DataFile Version 3.0",
        "triangulated channel domain",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r} 0.0")
    nt = mesh.n_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (mesh.n_vertices,):
                raise MeshError(
                    f"point_data {name!r} must have one value per vertex"
                )
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{float(v)!r}" for v in values)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
