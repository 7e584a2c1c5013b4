"""Polygonal obstacle bookkeeping: volumes, barycenters, constraint vectors.

Obstacle boundaries are closed polylines stored counter-clockwise, so the
outward normal of the obstacle (tangent rotated by -90 degrees) points into
the flow domain and the signed area is positive.  All functionals are
boundary integrals evaluated with a 2-point Gauss rule per edge, which is
exact for the polynomial integrands that occur here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# 2-point Gauss rule on [0, 1].
_GAUSS_S = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W = np.array([0.5, 0.5])


class ShapeError(ValueError):
    """Invalid obstacle polyline or shape configuration."""


def _as_polyline(poly) -> np.ndarray:
    arr = np.asarray(poly, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
        raise ShapeError("polyline must be an (n, 2) array with n >= 3")
    return arr


def _edge_normals(poly: np.ndarray) -> np.ndarray:
    """Non-unit outward normals per edge; |n_e| is the edge length."""
    d = np.roll(poly, -1, axis=0) - poly
    return np.column_stack([d[:, 1], -d[:, 0]])


def volume(poly) -> float:
    """Obstacle area via the boundary integral (1/2) closed-int x . n ds.

    Equals the shoelace area exactly for polygons.
    """
    poly = _as_polyline(poly)
    n = _edge_normals(poly)
    d = np.roll(poly, -1, axis=0) - poly
    total = 0.0
    for s, w in zip(_GAUSS_S, _GAUSS_W):
        x = poly + s * d
        total += w * np.einsum("ij,ij->", x, n)
    return 0.5 * total


def barycenter(poly) -> np.ndarray:
    """Obstacle centroid: bary_k = (1/(2 vol)) closed-int x_k^2 n_k ds."""
    poly = _as_polyline(poly)
    vol = volume(poly)
    if vol <= 0.0:
        raise ShapeError("barycenter requires positive area (CCW polyline)")
    n = _edge_normals(poly)
    d = np.roll(poly, -1, axis=0) - poly
    moment = np.zeros(2)
    for s, w in zip(_GAUSS_S, _GAUSS_W):
        x = poly + s * d
        moment += w * np.einsum("ij,ij->j", x * x, n)
    return moment / (2.0 * vol)


def shape_gradients(poly) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of volume and barycenter w.r.t. vertex positions.

    Returns (d_vol, d_bary_x, d_bary_y), each of shape (n, 2).  Derived from
    the transport identities d vol[W] = closed-int W . n ds and
    d bary_k[W] = (1/vol) closed-int (x_k - bary_k) (W . n) ds with W the
    piecewise linear interpolant of nodal displacements; the 2-point Gauss
    rule integrates the quadratic integrands exactly, so these match finite
    differences of volume()/barycenter() to rounding.
    """
    poly = _as_polyline(poly)
    nv = poly.shape[0]
    vol = volume(poly)
    if vol <= 0.0:
        raise ShapeError("gradients require positive area (CCW polyline)")
    bary = barycenter(poly)
    normals = _edge_normals(poly)
    d = np.roll(poly, -1, axis=0) - poly
    head = (np.arange(nv) + 1) % nv

    d_vol = np.zeros((nv, 2))
    # d vol[W] per edge: n_e . (W_a + W_b)/2 (integrand linear in s).
    np.add.at(d_vol, np.arange(nv), 0.5 * normals)
    np.add.at(d_vol, head, 0.5 * normals)

    d_bary = np.zeros((2, nv, 2))
    for s, w in zip(_GAUSS_S, _GAUSS_W):
        x = poly + s * d
        for k in range(2):
            coef = w * (x[:, k] - bary[k])
            np.add.at(d_bary[k], np.arange(nv), ((1.0 - s) * coef)[:, None] * normals)
            np.add.at(d_bary[k], head, (s * coef)[:, None] * normals)
    d_bary /= vol
    return d_vol, d_bary[0], d_bary[1]


def _segments_intersect(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of two closed segments."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) - 1e-14 <= c[0] <= max(a[0], b[0]) + 1e-14
            and min(a[1], b[1]) - 1e-14 <= c[1] <= max(a[1], b[1]) + 1e-14
        )

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if ((o1 > 0) != (o2 > 0)) and ((o3 > 0) != (o4 > 0)) and o1 != 0 and o2 != 0 and o3 != 0 and o4 != 0:
        return True
    for (a, b, c), o in (((p1, p2, q1), o1), ((p1, p2, q2), o2), ((q1, q2, p1), o3), ((q1, q2, p2), o4)):
        if o == 0 and on_seg(a, b, c):
            return True
    return False


def polyline_is_simple(poly) -> bool:
    """True when no two non-adjacent edges of the closed polyline intersect."""
    poly = _as_polyline(poly)
    n = poly.shape[0]
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def point_in_polygon(points, poly) -> np.ndarray:
    """Crossing-number containment test, vectorized over query points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    poly = _as_polyline(poly)
    a = poly
    b = np.roll(poly, -1, axis=0)
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    cond = (a[None, :, 1] > y) != (b[None, :, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[None, :, 0] + (y - a[None, :, 1]) / (b[None, :, 1] - a[None, :, 1]) * (
            b[None, :, 0] - a[None, :, 0]
        )
    inside = np.sum(cond & (x < xint), axis=1) % 2 == 1
    return inside


class ShapeSet:
    """Immutable collection of obstacle polylines (CCW, positive area)."""

    def __init__(self, polylines, validate: bool = True):
        polys = []
        for i, p in enumerate(polylines):
            arr = _as_polyline(p).copy()
            arr.setflags(write=False)
            if validate:
                if volume(arr) <= 0.0:
                    raise ShapeError(f"shape {i}: polyline must be CCW with positive area")
                if not polyline_is_simple(arr):
                    raise ShapeError(f"shape {i}: polyline is self-intersecting")
            polys.append(arr)
        self.polylines = tuple(polys)

    @property
    def s(self) -> int:
        return len(self.polylines)

    def __len__(self) -> int:
        return len(self.polylines)

    def __iter__(self):
        return iter(self.polylines)

    def __getitem__(self, i):
        return self.polylines[i]

    def volumes(self) -> np.ndarray:
        return np.array([volume(p) for p in self.polylines])

    def barycenters(self) -> np.ndarray:
        return np.array([barycenter(p) for p in self.polylines])


@dataclass(frozen=True)
class ConstraintSpec:
    """Volume lower bounds and barycenter boxes, one row per shape."""

    vol_min: np.ndarray  # (s,)
    bary_min: np.ndarray  # (s, 2)
    bary_max: np.ndarray  # (s, 2)

    def __post_init__(self):
        vol_min = np.atleast_1d(np.asarray(self.vol_min, dtype=float))
        bary_min = np.atleast_2d(np.asarray(self.bary_min, dtype=float))
        bary_max = np.atleast_2d(np.asarray(self.bary_max, dtype=float))
        s = vol_min.shape[0]
        if bary_min.shape != (s, 2) or bary_max.shape != (s, 2):
            raise ShapeError("constraint arrays must have shapes (s,), (s,2), (s,2)")
        if np.any(vol_min <= 0.0):
            raise ShapeError("volume lower bounds must be positive")
        if np.any(bary_min >= bary_max):
            raise ShapeError("barycenter boxes must satisfy min < max componentwise")
        for name, arr in (("vol_min", vol_min), ("bary_min", bary_min), ("bary_max", bary_max)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def s(self) -> int:
        return self.vol_min.shape[0]

    @property
    def n_rows(self) -> int:
        return 5 * self.s

    def to_dict(self) -> dict:
        return {
            "vol_min": self.vol_min.tolist(),
            "bary_min": self.bary_min.tolist(),
            "bary_max": self.bary_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        return cls(
            vol_min=np.asarray(d["vol_min"], dtype=float),
            bary_min=np.asarray(d["bary_min"], dtype=float),
            bary_max=np.asarray(d["bary_max"], dtype=float),
        )


def constraint_vector(shapes: ShapeSet, spec: ConstraintSpec) -> np.ndarray:
    """Constraint vector h of length 5s; feasible iff every entry <= 0.

    Layout: [0, s) volume rows vol_min_i - vol_i; [s, 3s) lower barycenter
    rows bary_min_i - bary_i (shape-major, x then y); [3s, 5s) upper rows
    bary_i - bary_max_i in the same order.
    """
    if shapes.s != spec.s:
        raise ShapeError(f"shape count {shapes.s} != constraint row count {spec.s}")
    s = shapes.s
    vols = shapes.volumes()
    barys = shapes.barycenters()
    h = np.empty(5 * s)
    h[:s] = spec.vol_min - vols
    h[s : 3 * s] = (spec.bary_min - barys).reshape(-1)
    h[3 * s : 5 * s] = (barys - spec.bary_max).reshape(-1)
    return h


def feasibility_H(h, w, mu: float, variant: str = "kkt") -> float:
    """Scalar feasibility/complementarity measure gating penalty growth.

    `verbatim` keeps the printed min-form ||h - max(0, h + w/mu)||_2, which
    does not vanish at strictly feasible inactive points; `kkt` uses the
    standard componentwise max(h, -w/mu), which does.
    """
    h = np.asarray(h, dtype=float)
    w = np.asarray(w, dtype=float)
    if h.shape != w.shape:
        raise ShapeError("h and w must have identical shapes")
    if mu <= 0.0:
        raise ShapeError("mu must be positive")
    if variant == "verbatim":
        vec = h - np.maximum(0.0, h + w / mu)
    elif variant == "kkt":
        vec = np.maximum(h, -w / mu)
    else:
        raise ShapeError(f"unknown variant {variant!r}")
    return float(np.linalg.norm(vec))


def save_shapes(directory, shapes: ShapeSet, spec: ConstraintSpec | None = None) -> Path:
    """Write one CSV per shape plus a JSON manifest; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, poly in enumerate(shapes):
        name = f"shape_{i:03d}.csv"
        with open(directory / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y"])
            writer.writerows(poly.tolist())
        files.append(name)
    manifest = {"version": 1, "shapes": files}
    if spec is not None:
        manifest["constraints"] = spec.to_dict()
    path = directory / "shapes.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_shapes(manifest_path) -> tuple[ShapeSet, ConstraintSpec | None]:
    """Read a shape manifest written by save_shapes."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != 1:
        raise ShapeError(f"unsupported shape manifest version {manifest.get('version')!r}")
    polys = []
    for name in manifest["shapes"]:
        with open(manifest_path.parent / name, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows and rows[0][:2] == ["x", "y"]:
            rows = rows[1:]
        polys.append(np.array([[float(r[0]), float(r[1])] for r in rows]))
    spec = None
    if "constraints" in manifest:
        spec = ConstraintSpec.from_dict(manifest["constraints"])
    return ShapeSet(polys), spec


def regular_polygon(center, area: float, n_vertices: int, phase: float = 0.0) -> np.ndarray:
    """CCW regular polygon with prescribed area; used for initial shapes."""
    if n_vertices < 3 or area <= 0.0:
        raise ShapeError("need n_vertices >= 3 and positive area")
    # Area of a regular n-gon with circumradius r: (n/2) r^2 sin(2 pi / n).
    r = np.sqrt(2.0 * area / (n_vertices * np.sin(2.0 * np.pi / n_vertices)))
    ang = phase + 2.0 * np.pi * np.arange(n_vertices) / n_vertices
    return np.asarray(center, dtype=float) + r * np.column_stack([np.cos(ang), np.sin(ang)])


def subdivide_polyline(poly, max_edge: float) -> np.ndarray:
    """Insert collinear points so that no edge exceeds max_edge.

    Keeps every original vertex, so the polygon (and its area) is unchanged.
    """
    poly = _as_polyline(poly)
    out = []
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        out.append(a)
        length = float(np.hypot(*(b - a)))
        pieces = int(np.ceil(length / max_edge))
        for t in range(1, pieces):
            out.append(a + (b - a) * (t / pieces))
    return np.array(out)
