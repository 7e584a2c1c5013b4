"""Triangular meshes of the channel domain minus obstacle interiors."""

from .trimesh import (
    DIRICHLET,
    NEUMANN,
    SHAPE_BASE,
    MeshError,
    MeshQuality,
    TriMesh,
    deform,
    is_shape_tag,
    needs_remesh,
    quality,
    shape_index,
    shape_tag,
)
from .generate import (
    generate_benchmark,
    remesh,
    structured_rectangle,
    triangulate_region,
    uniform_refine,
)
from .io import load_mesh, load_msh, save_mesh, save_msh, save_vtk

__all__ = [
    "DIRICHLET",
    "NEUMANN",
    "SHAPE_BASE",
    "MeshError",
    "MeshQuality",
    "TriMesh",
    "deform",
    "generate_benchmark",
    "is_shape_tag",
    "load_mesh",
    "load_msh",
    "needs_remesh",
    "quality",
    "remesh",
    "save_mesh",
    "save_msh",
    "save_vtk",
    "shape_index",
    "shape_tag",
    "structured_rectangle",
    "triangulate_region",
    "uniform_refine",
]
