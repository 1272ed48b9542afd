"""Signed-distance body representations.

Every body answers point queries with (d, p, n): signed distance (negative
inside), nearest surface point, and outward unit normal at that point.
Analytic primitives (sphere, capsule) are exact; composites take the union
by minimum signed distance; triangle-mesh bodies use exact nearest-point
queries accelerated by a centroid KD-tree, with inside/outside decided by
angle-weighted pseudonormals (requires a watertight mesh).

Bodies are immutable after construction and queries are pure, so they are
safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import TopologyError, ValidationError

_FALLBACK_DIR = np.array([0.0, 1.0, 0.0])  # used when x coincides with a center


@dataclass(frozen=True)
class BodyQuery:
    """Batch query result: d (Q,), p (Q,3), n (Q,3)."""

    d: np.ndarray
    p: np.ndarray
    n: np.ndarray


class BodyModel:
    """Interface: query_batch(X) -> (d, p, n); bounds() -> (lo, hi)."""

    def query_batch(self, X):
        raise NotImplementedError

    def bounds(self):
        raise NotImplementedError


class Sphere(BodyModel):
    def __init__(self, center, radius):
        if not (radius > 0):
            raise ValidationError(f"sphere radius must be > 0, got {radius}")
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.radius = float(radius)

    def query_batch(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        rel = X - self.center
        dist = np.linalg.norm(rel, axis=1)
        n = np.where(dist[:, None] > 1e-12, rel / np.maximum(dist, 1e-300)[:, None], _FALLBACK_DIR)
        p = self.center + self.radius * n
        d = dist - self.radius
        return d, p, n

    def bounds(self):
        return self.center - self.radius, self.center + self.radius


class Capsule(BodyModel):
    def __init__(self, a, b, radius):
        a = np.asarray(a, dtype=np.float64).reshape(3)
        b = np.asarray(b, dtype=np.float64).reshape(3)
        if not (radius > 0):
            raise ValidationError(f"capsule radius must be > 0, got {radius}")
        if np.allclose(a, b):
            raise ValidationError("capsule endpoints must differ")
        self.a = a
        self.b = b
        self.radius = float(radius)

    def query_batch(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        ab = self.b - self.a
        t = np.clip((X - self.a) @ ab / (ab @ ab), 0.0, 1.0)
        axis_pt = self.a + t[:, None] * ab
        rel = X - axis_pt
        dist = np.linalg.norm(rel, axis=1)
        n = np.where(dist[:, None] > 1e-12, rel / np.maximum(dist, 1e-300)[:, None], _FALLBACK_DIR)
        p = axis_pt + self.radius * n
        d = dist - self.radius
        return d, p, n

    def bounds(self):
        lo = np.minimum(self.a, self.b) - self.radius
        hi = np.maximum(self.a, self.b) + self.radius
        return lo, hi


class CompositeBody(BodyModel):
    """Union of bodies by minimum signed distance; p, n from the argmin child."""

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise ValidationError("composite body needs at least one part")
        self.parts = parts

    def query_batch(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        results = [part.query_batch(X) for part in self.parts]
        ds = np.stack([r[0] for r in results], axis=0)
        best = np.argmin(ds, axis=0)
        rows = np.arange(X.shape[0])
        d = ds[best, rows]
        p = np.stack([r[1] for r in results], axis=0)[best, rows]
        n = np.stack([r[2] for r in results], axis=0)[best, rows]
        return d, p, n

    def bounds(self):
        los, his = zip(*(part.bounds() for part in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)


class MeshBody(BodyModel):
    """Watertight triangle mesh with angle-weighted pseudonormal sign."""

    def __init__(self, vertices, faces):
        V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if F.min() < 0 or F.max() >= len(V):
            raise ValidationError("mesh body face index out of range")
        self.vertices = V
        self.faces = F
        self._check_watertight()
        self._precompute()

    def _check_watertight(self):
        edges = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        und = np.sort(edges, axis=1)
        _, counts = np.unique(und, axis=0, return_counts=True)
        if not np.all(counts == 2):
            raise TopologyError(
                "mesh body must be watertight (every edge shared by exactly 2 faces)"
            )

    def _precompute(self):
        V, F = self.vertices, self.faces
        a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
        fn = np.cross(b - a, c - a)
        norms = np.linalg.norm(fn, axis=1)
        if (norms < 1e-18).any():
            raise ValidationError("mesh body has a degenerate triangle")
        self._face_normal = fn / norms[:, None]

        # angle-weighted vertex pseudonormals
        vn = np.zeros_like(V)
        corners = (a, b, c)
        for k in range(3):
            p0 = corners[k]
            p1 = corners[(k + 1) % 3]
            p2 = corners[(k + 2) % 3]
            u = p1 - p0
            w = p2 - p0
            cosang = np.einsum("ij,ij->i", u, w) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1)
            )
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            contrib = ang[:, None] * self._face_normal
            for col in range(3):
                vn[:, col] += np.bincount(
                    F[:, k], weights=contrib[:, col], minlength=len(V)
                )
        self._vertex_normal = vn / np.linalg.norm(vn, axis=1)[:, None]

        # edge pseudonormals, stored per face edge slot (01, 12, 20)
        edge_key = {}
        for fi in range(len(F)):
            for slot, (u, v) in enumerate(((0, 1), (1, 2), (2, 0))):
                key = tuple(sorted((int(F[fi, u]), int(F[fi, v]))))
                edge_key.setdefault(key, []).append((fi, slot))
        self._edge_normal = np.zeros((len(F), 3, 3))
        for key, users in edge_key.items():
            n_sum = np.zeros(3)
            for fi, _ in users:
                n_sum += self._face_normal[fi]
            n_sum /= np.linalg.norm(n_sum)
            for fi, slot in users:
                self._edge_normal[fi, slot] = n_sum

        self._centroid = (a + b + c) / 3.0
        self._tri_radius = np.maximum(
            np.maximum(
                np.linalg.norm(a - self._centroid, axis=1),
                np.linalg.norm(b - self._centroid, axis=1),
            ),
            np.linalg.norm(c - self._centroid, axis=1),
        )
        self._tree = cKDTree(self._centroid)
        self._rmax = float(self._tri_radius.max())

    def query_batch(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        if X.shape[0] == 0:
            return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))
        q = X.shape[0]
        k = min(8, len(self.faces))
        _, ci = self._tree.query(X, k=k)
        ci = np.asarray(ci).reshape(q, k)
        # exact distance to the k candidate triangles gives an upper bound
        pidx0 = np.repeat(np.arange(q), k)
        d2_0, _, _ = _closest_on_triangles(
            X[pidx0], self.vertices, self.faces[ci.reshape(-1)]
        )
        ub = np.sqrt(d2_0.reshape(q, k).min(axis=1))
        # every triangle possibly closer has centroid within ub + its radius
        radius = ub + self._rmax + 1e-12
        cand_lists = self._tree.query_ball_point(X, r=radius)
        counts = np.array([len(c) for c in cand_lists])
        tri_idx = np.concatenate([np.sort(c) for c in cand_lists]) if counts.sum() else np.zeros(0, int)
        pt_idx = np.repeat(np.arange(q), counts)
        d2, point, feat = _closest_on_triangles(
            X[pt_idx], self.vertices, self.faces[tri_idx]
        )
        # per-point argmin with deterministic tie-break on triangle index
        order = np.lexsort((tri_idx, d2, pt_idx))
        first = np.zeros(q, dtype=np.int64)
        first[1:] = np.cumsum(counts)[:-1]
        best = order[first]
        bp = point[best]
        btri = tri_idx[best]
        bfeat = feat[best]
        n = self._feature_normal(btri, bfeat)
        rel = X - bp
        dist = np.sqrt(d2[best])
        sign = np.where(np.einsum("ij,ij->i", rel, n) >= 0.0, 1.0, -1.0)
        return sign * dist, bp, n

    def _feature_normal(self, tri, feat):
        """feat: 0..2 vertex, 3..5 edge slot (01,12,20), 6 interior."""
        n = np.empty((len(tri), 3))
        for code in range(7):
            mask = feat == code
            if not mask.any():
                continue
            if code < 3:
                n[mask] = self._vertex_normal[self.faces[tri[mask], code]]
            elif code < 6:
                n[mask] = self._edge_normal[tri[mask], code - 3]
            else:
                n[mask] = self._face_normal[tri[mask]]
        return n

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _closest_on_triangles(Q, V, F):
    """Vectorized closest point on triangles (Ericson's region test).

    Q: (K,3) query points paired with triangles F: (K,3) into V.
    Returns squared distances (K,), closest points (K,3), and feature codes
    (0..2 vertex a/b/c, 3..5 edge ab/bc/ca, 6 face interior).
    """
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    ab = b - a
    ac = c - a
    ap = Q - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = Q - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = Q - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    K = Q.shape[0]
    point = np.empty((K, 3))
    feat = np.full(K, 6, dtype=np.int8)
    done = np.zeros(K, dtype=bool)

    def settle(mask, pts, code):
        m = mask & ~done
        point[m] = pts[m]
        feat[m] = code
        done[m] = True

    settle((d1 <= 0) & (d2 <= 0), a, 0)  # vertex a
    settle((d3 >= 0) & (d4 <= d3), b, 1)  # vertex b
    vc = d1 * d4 - d3 * d2
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & ~done
    t = np.where(np.abs(d1 - d3) > 1e-300, d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3), 0.0)
    settle(m, a + t[:, None] * ab, 3)  # edge ab
    settle((d6 >= 0) & (d5 <= d6), c, 2)  # vertex c
    vb = d5 * d2 - d1 * d6
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & ~done
    t = np.where(np.abs(d2 - d6) > 1e-300, d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6), 0.0)
    settle(m, a + t[:, None] * ac, 5)  # edge ca
    va = d3 * d6 - d5 * d4
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0) & ~done
    denom = (d4 - d3) + (d5 - d6)
    t = np.where(np.abs(denom) > 1e-300, (d4 - d3) / np.where(denom == 0, 1.0, denom), 0.0)
    settle(m, b + t[:, None] * (c - b), 4)  # edge bc
    # interior
    m = ~done
    denom = np.where(va + vb + vc == 0, 1.0, va + vb + vc)
    v = vb / denom
    w = vc / denom
    point[m] = (a + v[:, None] * ab + w[:, None] * ac)[m]

    diff = Q - point
    return np.einsum("ij,ij->i", diff, diff), point, feat


def query(body: BodyModel, x) -> BodyQuery:
    """Single-point query; identical kernel to batch_query."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    if not np.isfinite(x).all():
        raise ValidationError("query: non-finite point")
    d, p, n = body.query_batch(x[None, :])
    return BodyQuery(d=d[0], p=p[0], n=n[0])


def batch_query(body: BodyModel, X) -> BodyQuery:
    """Elementwise query over (Q,3) points; deterministic ordering."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    if X.size and not np.isfinite(X).all():
        raise ValidationError("batch_query: non-finite points")
    d, p, n = body.query_batch(X)
    return BodyQuery(d=d, p=p, n=n)


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    """Watertight icosphere (vertices, faces) for mesh-body tests and scenes."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []
        vlist = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key in cache:
                return cache[key]
            m = np.asarray(vlist[i]) + np.asarray(vlist[j])
            m /= np.linalg.norm(m)
            vlist.append(tuple(m))
            cache[key] = len(vlist) - 1
            return cache[key]

        for (i, j, k) in faces:
            a = midpoint(i, j)
            b = midpoint(j, k)
            c = midpoint(k, i)
            new_faces += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
        faces = new_faces
        verts = vlist
    V = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return V, np.asarray(faces, dtype=np.int64)
