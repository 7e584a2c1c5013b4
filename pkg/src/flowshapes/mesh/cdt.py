"""Incremental constrained Delaunay triangulation with quality refinement.

Bowyer-Watson point insertion inside a super-triangle, Sloan-style edge
flipping for constraint recovery, and Ruppert-flavored refinement driven by
a target edge length and a radius-ratio floor.  Constrained edges are never
crossed by insertion cavities; outer-boundary segments may be split when
encroached, obstacle segments are kept vertex-for-vertex.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .trimesh import MeshError

_WALK_LIMIT = 100_000
_FLIP_LIMIT = 100_000


def _ukey(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class Triangulation:
    """Mutable CDT working structure; extract arrays when done."""

    def __init__(self, bbox_min, bbox_max):
        cx = 0.5 * (bbox_min[0] + bbox_max[0])
        cy = 0.5 * (bbox_min[1] + bbox_max[1])
        span = max(bbox_max[0] - bbox_min[0], bbox_max[1] - bbox_min[1], 1.0)
        r = 10.0 * span
        # Super-triangle enclosing everything by a wide margin.
        self.pts: list[tuple[float, float]] = [
            (cx - 2.0 * r, cy - r),
            (cx + 2.0 * r, cy - r),
            (cx, cy + 2.0 * r),
        ]
        self.tris: dict[int, tuple[int, int, int]] = {0: (0, 1, 2)}
        self.adj: dict[tuple[int, int], int] = {(0, 1): 0, (1, 2): 0, (2, 0): 0}
        self.constrained: dict[tuple[int, int], int] = {}
        self._next_tid = 1
        self._last_tid = 0
        self._scale = span
        self._eps = 1e-12 * span * span

    # -- predicates ----------------------------------------------------------

    def _orient(self, pa, pb, pc) -> float:
        return (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])

    def _in_circumcircle(self, tri: tuple[int, int, int], p) -> bool:
        pa, pb, pc = (self.pts[v] for v in tri)
        ax, ay = pa[0] - p[0], pa[1] - p[1]
        bx, by = pb[0] - p[0], pb[1] - p[1]
        cx, cy = pc[0] - p[0], pc[1] - p[1]
        la, lb, lc = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
        det = (
            ax * (by * lc - cy * lb)
            - ay * (bx * lc - cx * lb)
            + la * (bx * cy - cx * by)
        )
        return det > 1e-12 * max(la, lb, lc) ** 2

    # -- element bookkeeping --------------------------------------------------

    def _add_tri(self, a: int, b: int, c: int) -> int:
        tid = self._next_tid
        self._next_tid += 1
        self.tris[tid] = (a, b, c)
        self.adj[(a, b)] = tid
        self.adj[(b, c)] = tid
        self.adj[(c, a)] = tid
        return tid

    def _remove_tri(self, tid: int):
        a, b, c = self.tris.pop(tid)
        for e in ((a, b), (b, c), (c, a)):
            if self.adj.get(e) == tid:
                del self.adj[e]

    def _edge_exists(self, u: int, v: int) -> bool:
        return (u, v) in self.adj or (v, u) in self.adj

    # -- point location --------------------------------------------------------

    def _locate(self, p) -> int:
        tid = self._last_tid if self._last_tid in self.tris else next(iter(self.tris))
        for _ in range(_WALK_LIMIT):
            a, b, c = self.tris[tid]
            pa, pb, pc = self.pts[a], self.pts[b], self.pts[c]
            worst_val = -self._eps
            worst_edge = None
            for u, v, pu, pv in ((a, b, pa, pb), (b, c, pb, pc), (c, a, pc, pa)):
                o = self._orient(pu, pv, p)
                if o < worst_val:
                    worst_val = o
                    worst_edge = (u, v)
            if worst_edge is None:
                self._last_tid = tid
                return tid
            nxt = self.adj.get((worst_edge[1], worst_edge[0]))
            if nxt is None:
                self._last_tid = tid
                return tid
            tid = nxt
        raise MeshError("point location failed (walk limit exceeded)")

    # -- Bowyer-Watson insertion ------------------------------------------------

    def insert_point(self, p, snap_tol: float = 0.0) -> int | None:
        """Insert p; returns its vertex index, an existing index if p snaps
        to a nearby vertex, or None if insertion is rejected (too close to a
        vertex without snapping)."""
        tid = self._locate(p)
        tri = self.tris[tid]
        snap2 = snap_tol * snap_tol
        for v in tri:
            q = self.pts[v]
            d2 = (q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2
            if d2 <= max(snap2, (1e-12 * self._scale) ** 2):
                return v if snap_tol > 0.0 else None

        # Grow the Delaunay cavity without crossing constrained edges.  An
        # edge of the containing triangle that p (numerically) lies on is
        # forced into the cavity so the fan cannot create a sliver.
        cavity = {tid}
        stack = [tid]
        a, b, c = tri
        for u, v in ((a, b), (b, c), (c, a)):
            pu, pv = self.pts[u], self.pts[v]
            scale = abs(pv[0] - pu[0]) + abs(pv[1] - pu[1])
            if abs(self._orient(pu, pv, p)) <= 1e-12 * self._scale * max(scale, 1e-30):
                if _ukey(u, v) in self.constrained:
                    return None  # never insert onto a constrained edge
                nb = self.adj.get((v, u))
                if nb is not None and nb not in cavity:
                    cavity.add(nb)
                    stack.append(nb)
        while stack:
            t = stack.pop()
            ta, tb, tc = self.tris[t]
            for u, v in ((ta, tb), (tb, tc), (tc, ta)):
                if _ukey(u, v) in self.constrained:
                    continue
                nb = self.adj.get((v, u))
                if nb is None or nb in cavity:
                    continue
                if self._in_circumcircle(self.tris[nb], p):
                    cavity.add(nb)
                    stack.append(nb)

        boundary = []
        for t in cavity:
            ta, tb, tc = self.tris[t]
            for u, v in ((ta, tb), (tb, tc), (tc, ta)):
                nb = self.adj.get((v, u))
                if nb is None or nb not in cavity:
                    boundary.append((u, v))
        for t in list(cavity):
            self._remove_tri(t)
        w = len(self.pts)
        self.pts.append((float(p[0]), float(p[1])))
        last = None
        for u, v in boundary:
            last = self._add_tri(u, v, w)
        if last is not None:
            self._last_tid = last
        return w

    # -- constrained segment insertion -------------------------------------------

    def insert_segment(self, u: int, v: int, tag: int):
        """Force undirected edge (u, v) into the triangulation and tag it."""
        if u == v:
            raise MeshError("degenerate segment")
        guard = 0
        while not self._edge_exists(u, v):
            guard += 1
            if guard > 64:
                raise MeshError("segment recovery failed to converge")
            mid = self._march_and_flip(u, v)
            if mid is not None:
                # A vertex lies on the segment; recover the two halves.
                self.insert_segment(u, mid, tag)
                self.insert_segment(mid, v, tag)
                return
        self.constrained[_ukey(u, v)] = tag

    def _tri_around(self, u: int) -> list[int]:
        """All triangles incident to u (scan; set sizes here are small)."""
        return [tid for tid, t in self.tris.items() if u in t]

    def _march_and_flip(self, u: int, v: int) -> int | None:
        """Flip edges crossing segment (u, v).  Returns a vertex index if one
        lies exactly on the segment (caller splits), else None."""
        pu, pv = self.pts[u], self.pts[v]
        seg_len = abs(pv[0] - pu[0]) + abs(pv[1] - pu[1])
        eps = 1e-12 * self._scale * max(seg_len, 1e-30)

        def side(w: int) -> float:
            return self._orient(pu, pv, self.pts[w])

        def between(w: int) -> bool:
            pw = self.pts[w]
            d = (pw[0] - pu[0]) * (pv[0] - pu[0]) + (pw[1] - pu[1]) * (pv[1] - pu[1])
            l2 = (pv[0] - pu[0]) ** 2 + (pv[1] - pu[1]) ** 2
            return 0.0 < d < l2

        # Find the triangle at u whose opposite edge straddles the segment.
        # Crossing tuples are kept as (right-of-segment, left-of-segment).
        crossing: deque[tuple[int, int]] = deque()
        start = None
        for tid in self._tri_around(u):
            t = self.tris[tid]
            i = t.index(u)
            p, q = t[(i + 1) % 3], t[(i + 2) % 3]
            sp, sq = side(p), side(q)
            if abs(sp) <= eps and between(p):
                return p
            if abs(sq) <= eps and between(q):
                return q
            if sp < -eps and sq > eps:
                # Opposite edge (p, q) straddles; confirm the crossing point
                # lies ahead of u (not behind).
                o_up = self._orient(self.pts[p], self.pts[q], pu)
                o_uv = self._orient(self.pts[p], self.pts[q], pv)
                if (o_up > 0.0) != (o_uv > 0.0):
                    start = (tid, p, q)
                    break
        if start is None:
            raise MeshError("segment recovery lost its way (no starting triangle)")

        tid, p, q = start
        if _ukey(p, q) in self.constrained:
            raise MeshError("input segments intersect each other")
        crossing.append((p, q))
        cur = self.adj.get((q, p))
        while cur is not None:
            t = self.tris[cur]
            if v in t:
                break
            w = next(x for x in t if x != p and x != q)
            sw = side(w)
            if abs(sw) <= eps and between(w):
                return w
            if sw > eps:
                q = w  # w is left of the segment, exit via edge {p, w}
            else:
                p = w
            if _ukey(p, q) in self.constrained:
                raise MeshError("input segments intersect each other")
            crossing.append((p, q))
            cur = self.adj.get((q, p))

        # Flip crossing edges until the segment edge appears.
        guard = 0
        while crossing:
            guard += 1
            if guard > _FLIP_LIMIT:
                raise MeshError("edge flipping failed to converge")
            a, b = crossing.popleft()
            t1 = self.adj.get((a, b))
            t2 = self.adj.get((b, a))
            if t1 is None or t2 is None:
                continue  # edge no longer present
            r = next(x for x in self.tris[t1] if x != a and x != b)
            s = next(x for x in self.tris[t2] if x != a and x != b)
            # Flip only strictly convex quads.
            o1 = self._orient(self.pts[r], self.pts[s], self.pts[a])
            o2 = self._orient(self.pts[r], self.pts[s], self.pts[b])
            if not (o1 > eps and o2 < -eps) and not (o1 < -eps and o2 > eps):
                crossing.append((a, b))
                continue
            self._flip(a, b, t1, t2, r, s)
            sr, ss = side(r), side(s)
            if {r, s} != {u, v} and sr * ss < 0.0 and self._seg_crosses(u, v, r, s):
                crossing.append((r, s))
        return None

    def _seg_crosses(self, u: int, v: int, r: int, s: int) -> bool:
        pu, pv, pr, ps = (self.pts[i] for i in (u, v, r, s))
        o1 = self._orient(pu, pv, pr)
        o2 = self._orient(pu, pv, ps)
        o3 = self._orient(pr, ps, pu)
        o4 = self._orient(pr, ps, pv)
        return (o1 > 0) != (o2 > 0) and (o3 > 0) != (o4 > 0)

    def _flip(self, a: int, b: int, t1: int, t2: int, r: int, s: int):
        self._remove_tri(t1)
        self._remove_tri(t2)
        self._add_tri(r, a, s)
        self._last_tid = self._add_tri(s, b, r)

    # -- refinement ---------------------------------------------------------------

    def _metrics(self, tri: tuple[int, int, int]):
        pa, pb, pc = (self.pts[v] for v in tri)
        ab = np.hypot(pb[0] - pa[0], pb[1] - pa[1])
        bc = np.hypot(pc[0] - pb[0], pc[1] - pb[1])
        ca = np.hypot(pa[0] - pc[0], pa[1] - pc[1])
        area = 0.5 * abs(self._orient(pa, pb, pc))
        if area <= 0.0:
            return 0.0, np.inf
        ratio = 16.0 * area * area / ((ab + bc + ca) * ab * bc * ca)
        circumradius = ab * bc * ca / (4.0 * area)
        return ratio, circumradius

    def _circumcenter(self, tri: tuple[int, int, int]):
        pa, pb, pc = (self.pts[v] for v in tri)
        d = 2.0 * self._orient(pa, pb, pc)
        if abs(d) < 1e-30:
            return None
        la = pa[0] ** 2 + pa[1] ** 2
        lb = pb[0] ** 2 + pb[1] ** 2
        lc = pc[0] ** 2 + pc[1] ** 2
        ux = (la * (pb[1] - pc[1]) + lb * (pc[1] - pa[1]) + lc * (pa[1] - pb[1])) / d
        uy = (la * (pc[0] - pb[0]) + lb * (pa[0] - pc[0]) + lc * (pb[0] - pa[0])) / d
        return (ux, uy)

    def _encroached_segment(self, p) -> tuple[int, int] | None:
        """Nearest constrained segment whose diametral circle contains p."""
        best = None
        best_d2 = np.inf
        for (a, b) in self.constrained:
            pa, pb = self.pts[a], self.pts[b]
            mx, my = 0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])
            r2 = 0.25 * ((pb[0] - pa[0]) ** 2 + (pb[1] - pa[1]) ** 2)
            d2 = (p[0] - mx) ** 2 + (p[1] - my) ** 2
            if d2 < r2 * (1.0 - 1e-12) and d2 < best_d2:
                best = (a, b)
                best_d2 = d2
        return best

    def split_constrained(self, key: tuple[int, int]) -> int:
        """Split a constrained segment at its midpoint, inheriting the tag."""
        a, b = key
        tag = self.constrained.pop(key)
        pa, pb = self.pts[a], self.pts[b]
        mid = (0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]))
        w = self.insert_point(mid, snap_tol=0.0)
        if w is None:
            self.constrained[key] = tag
            raise MeshError("failed to split an encroached boundary segment")
        self.constrained[_ukey(a, w)] = tag
        self.constrained[_ukey(w, b)] = tag
        return w

    def refine(
        self,
        target_h: float,
        in_domain,
        splittable,
        min_ratio: float = 0.45,
        max_points: int = 200_000,
        max_sweeps: int = 60,
    ):
        """Insert circumcenters until size and shape targets hold.

        in_domain: vectorized predicate on centroid coordinates.
        splittable: predicate on a constrained tag (outer boundary: yes).
        Triangles with circumradius below 0.25 * target_h are never split for
        quality, which bounds the insertion count and guarantees termination.
        """
        size_cap = 0.62 * target_h
        floor = 0.25 * target_h
        for _ in range(max_sweeps):
            tids = sorted(self.tris)
            cents = np.array(
                [
                    [
                        (self.pts[a][0] + self.pts[b][0] + self.pts[c][0]) / 3.0,
                        (self.pts[a][1] + self.pts[b][1] + self.pts[c][1]) / 3.0,
                    ]
                    for a, b, c in (self.tris[t] for t in tids)
                ]
            )
            inside = in_domain(cents)
            work = []
            for tid, keep in zip(tids, inside):
                if not keep:
                    continue
                ratio, circumradius = self._metrics(self.tris[tid])
                if circumradius > size_cap or (ratio < min_ratio and circumradius >= floor):
                    work.append(tid)
            if not work:
                return
            progress = False
            for tid in work:
                if tid not in self.tris:
                    continue
                ratio, circumradius = self._metrics(self.tris[tid])
                if circumradius <= size_cap and (ratio >= min_ratio or circumradius < floor):
                    continue
                center = self._circumcenter(self.tris[tid])
                if center is None:
                    continue
                seg = self._encroached_segment(center)
                if seg is not None:
                    if splittable(self.constrained[seg]):
                        self.split_constrained(seg)
                        progress = True
                    continue
                if not bool(in_domain(np.array([center]))[0]):
                    continue
                if self.insert_point(center, snap_tol=0.0) is not None:
                    progress = True
                if len(self.pts) > max_points:
                    raise MeshError("refinement failure: point budget exceeded")
            if not progress:
                return

    # -- extraction ------------------------------------------------------------

    def extract(self, in_domain):
        """Arrays of the kept (in-domain) triangulation.

        Returns (points, triangles, boundary_edges, boundary_tags, old_to_new)
        with boundary edges oriented as in their kept triangle.
        """
        tids = sorted(self.tris)
        cents = np.array(
            [
                [
                    (self.pts[a][0] + self.pts[b][0] + self.pts[c][0]) / 3.0,
                    (self.pts[a][1] + self.pts[b][1] + self.pts[c][1]) / 3.0,
                ]
                for a, b, c in (self.tris[t] for t in tids)
            ]
        )
        inside = in_domain(cents)
        kept = [tid for tid, keep in zip(tids, inside) if keep]
        if not kept:
            raise MeshError("triangulation contains no in-domain triangles")
        kept_set = set(kept)

        used = sorted({v for tid in kept for v in self.tris[tid]})
        old_to_new = {old: new for new, old in enumerate(used)}
        points = np.array([self.pts[v] for v in used])
        triangles = np.array(
            [[old_to_new[v] for v in self.tris[tid]] for tid in kept], dtype=np.int32
        )

        b_edges = []
        b_tags = []
        for (a, b), tag in sorted(self.constrained.items()):
            t_ab = self.adj.get((a, b))
            t_ba = self.adj.get((b, a))
            in_ab = t_ab in kept_set
            in_ba = t_ba in kept_set
            if in_ab == in_ba:
                raise MeshError("constrained edge is not a boundary of the kept region")
            if in_ab:
                b_edges.append((old_to_new[a], old_to_new[b]))
            else:
                b_edges.append((old_to_new[b], old_to_new[a]))
            b_tags.append(tag)
        return points, triangles, np.array(b_edges, dtype=np.int32), np.array(b_tags, dtype=np.int32), old_to_new
