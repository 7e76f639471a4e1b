"""Bounding-volume hierarchy over triangles, with numba ray queries.

Nodes are stored flat. An interior node has ``count == 0`` and children at
``left`` and ``left + 1``; a leaf covers ``tri_index[start:start + count]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from specklepc.geometry import TriangleMesh

LEAF_SIZE = 4
RAY_EPS = 1e-9


@dataclass(frozen=True)
class BVH:
    node_lo: np.ndarray  # (N, 3)
    node_hi: np.ndarray  # (N, 3)
    node_left: np.ndarray  # (N,) first child (interior) or -1
    node_start: np.ndarray  # (N,)
    node_count: np.ndarray  # (N,) triangles in leaf, 0 for interior
    v0: np.ndarray  # (F, 3) triangle corners, in BVH order
    e1: np.ndarray
    e2: np.ndarray
    normals: np.ndarray  # (F, 3) unit
    tri_index: np.ndarray  # BVH order -> original face index

    @property
    def n_nodes(self) -> int:
        return len(self.node_count)

    def arrays(self):
        return (self.node_lo, self.node_hi, self.node_left, self.node_start, self.node_count,
                self.v0, self.e1, self.e2, self.tri_index)


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> BVH:
    """Median split on the longest centroid axis."""
    tris = mesh.triangles
    n = len(tris)
    lo_t, hi_t = tris.min(axis=1), tris.max(axis=1)
    cent = tris.mean(axis=1)
    order = np.arange(n)

    lo_nodes, hi_nodes, left, start, count = [], [], [], [], []

    def new_node():
        lo_nodes.append(None)
        hi_nodes.append(None)
        left.append(-1)
        start.append(0)
        count.append(0)
        return len(count) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        lo_nodes[node] = lo_t[idx].min(axis=0) if e > s else np.zeros(3)
        hi_nodes[node] = hi_t[idx].max(axis=0) if e > s else np.zeros(3)
        if e - s <= leaf_size:
            start[node], count[node] = s, e - s
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (e - s) // 2
        part = np.argpartition(c[:, axis], mid, kind="introselect")
        order[s:e] = idx[part]
        a, b = new_node(), new_node()
        left[node] = a
        # push right first so the left subtree is laid out first; not required for correctness
        stack.append((b, s + mid, e))
        stack.append((a, s, s + mid))

    tris = tris[order]
    normals = mesh.face_normals[order]
    if n == 0:
        # keep a valid empty root so kernels can run on empty scenes
        lo_nodes[0] = np.full(3, np.inf)
        hi_nodes[0] = np.full(3, -np.inf)
    return BVH(
        node_lo=np.array(lo_nodes, dtype=np.float64).reshape(-1, 3),
        node_hi=np.array(hi_nodes, dtype=np.float64).reshape(-1, 3),
        node_left=np.array(left, dtype=np.int64),
        node_start=np.array(start, dtype=np.int64),
        node_count=np.array(count, dtype=np.int64),
        v0=np.ascontiguousarray(tris[:, 0]).reshape(-1, 3),
        e1=np.ascontiguousarray(tris[:, 1] - tris[:, 0]).reshape(-1, 3),
        e2=np.ascontiguousarray(tris[:, 2] - tris[:, 0]).reshape(-1, 3),
        normals=np.ascontiguousarray(normals).reshape(-1, 3),
        tri_index=order.astype(np.int64),
    )


@numba.njit(cache=True, inline="always")
def _tri_hit(v0, e1, e2, k, ox, oy, oz, dx, dy, dz):
    # Moller-Trumbore; returns t or inf
    px = dy * e2[k, 2] - dz * e2[k, 1]
    py = dz * e2[k, 0] - dx * e2[k, 2]
    pz = dx * e2[k, 1] - dy * e2[k, 0]
    det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
    if abs(det) < 1e-14:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[k, 0]
    ty = oy - v0[k, 1]
    tz = oz - v0[k, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1[k, 2] - tz * e1[k, 1]
    qy = tz * e1[k, 0] - tx * e1[k, 2]
    qz = tx * e1[k, 1] - ty * e1[k, 0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
    if t <= RAY_EPS:
        return np.inf
    return t


@numba.njit(cache=True, inline="always")
def _box_hit(lo, hi, n, ox, oy, oz, ix, iy, iz, tmax):
    t0 = (lo[n, 0] - ox) * ix
    t1 = (hi[n, 0] - ox) * ix
    tmin_ = min(t0, t1)
    tmax_ = max(t0, t1)
    t0 = (lo[n, 1] - oy) * iy
    t1 = (hi[n, 1] - oy) * iy
    tmin_ = max(tmin_, min(t0, t1))
    tmax_ = min(tmax_, max(t0, t1))
    t0 = (lo[n, 2] - oz) * iz
    t1 = (hi[n, 2] - oz) * iz
    tmin_ = max(tmin_, min(t0, t1))
    tmax_ = min(tmax_, max(t0, t1))
    return tmax_ >= max(tmin_, 0.0) and tmin_ < tmax


@numba.njit(cache=True)
def _safe_inv(d):
    if d == 0.0:
        return 1e300
    return 1.0 / d


@numba.njit(cache=True)
def trace_ray(lo, hi, left, start, count, v0, e1, e2, tid, ox, oy, oz, dx, dy, dz, tmax, any_hit):
    """Nearest hit along the ray within (eps, tmax). Returns (t, triangle) or (inf, -1).

    With ``any_hit`` the first hit found is returned (shadow queries)."""
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    best_t = tmax
    best_k = -1
    stack = np.empty(64, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if not _box_hit(lo, hi, n, ox, oy, oz, ix, iy, iz, best_t):
            continue
        c = count[n]
        if c > 0:
            s = start[n]
            for k in range(s, s + c):
                t = _tri_hit(v0, e1, e2, k, ox, oy, oz, dx, dy, dz)
                # lower original face index wins exact ties, as in brute force
                if t < best_t or (t == best_t and best_k >= 0 and tid[k] < tid[best_k]):
                    best_t = t
                    best_k = k
                    if any_hit:
                        return best_t, best_k
        elif left[n] >= 0:
            stack[sp] = left[n] + 1
            sp += 1
            stack[sp] = left[n]
            sp += 1
    if best_k < 0:
        return np.inf, -1
    return best_t, best_k


@numba.njit(cache=True, parallel=True)
def _trace_many(lo, hi, left, start, count, v0, e1, e2, tid, origins, dirs):
    n = len(origins)
    ts = np.empty(n)
    ks = np.empty(n, dtype=np.int64)
    for i in numba.prange(n):
        t, k = trace_ray(lo, hi, left, start, count, v0, e1, e2, tid,
                         origins[i, 0], origins[i, 1], origins[i, 2],
                         dirs[i, 0], dirs[i, 1], dirs[i, 2], np.inf, False)
        ts[i] = t
        ks[i] = k
    return ts, ks


def intersect_rays(bvh: BVH, origins: np.ndarray, directions: np.ndarray):
    """Nearest hits for a batch of rays. Returns (t, face index) with (inf, -1) for misses.

    Face indices refer to the original mesh ordering."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    ts, ks = _trace_many(*bvh.arrays(), origins, directions)
    face = np.where(ks >= 0, bvh.tri_index[np.maximum(ks, 0)], -1)
    return ts, face


@numba.njit(cache=True)
def _brute(v0, e1, e2, origins, dirs):
    n = len(origins)
    ts = np.full(n, np.inf)
    ks = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for k in range(len(v0)):
            t = _tri_hit(v0, e1, e2, k, origins[i, 0], origins[i, 1], origins[i, 2],
                         dirs[i, 0], dirs[i, 1], dirs[i, 2])
            if t < ts[i]:
                ts[i] = t
                ks[i] = k
    return ts, ks


def intersect_rays_brute(mesh: TriangleMesh, origins: np.ndarray, directions: np.ndarray):
    """Reference: test every triangle for every ray. Same return convention as ``intersect_rays``."""
    tris = mesh.triangles
    v0 = np.ascontiguousarray(tris[:, 0]).reshape(-1, 3)
    e1 = np.ascontiguousarray(tris[:, 1] - tris[:, 0]).reshape(-1, 3)
    e2 = np.ascontiguousarray(tris[:, 2] - tris[:, 0]).reshape(-1, 3)
    return _brute(v0, e1, e2,
                  np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3),
                  np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3))
