"""Point-cloud fusion, farthest-point sampling, normalization, augmentation and I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from specklepc.geometry import rotate_about_z

MIN_POINTS_AFTER_DROPOUT = 16


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3)
    label: int | None = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {p.shape}")
        if len(p) == 0:
            raise ValueError("point cloud must hold at least one point")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)

    def with_points(self, points: np.ndarray) -> PointCloud:
        return replace(self, points=points)


def _as_array(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64).reshape(-1, 3)


def fuse_views(clouds: Sequence[PointCloud | np.ndarray], label: int | None = None) -> PointCloud:
    """Concatenate world-frame clouds in the given order; empty inputs are skipped."""
    arrays = [_as_array(c) for c in clouds]
    arrays = [a for a in arrays if len(a)]
    if not arrays:
        raise ValueError("all input clouds are empty")
    return PointCloud(np.concatenate(arrays), label)


@numba.njit(cache=True)
def _fps(pts, n, start):
    total = pts.shape[0]
    chosen = np.empty(n, dtype=np.int64)
    d = np.empty(total)
    chosen[0] = start
    for j in range(total):
        dx = pts[j, 0] - pts[start, 0]
        dy = pts[j, 1] - pts[start, 1]
        dz = pts[j, 2] - pts[start, 2]
        d[j] = dx * dx + dy * dy + dz * dz
    d[start] = -np.inf
    for i in range(1, n):
        k = 0
        for j in range(1, total):
            if d[j] > d[k]:
                k = j
        chosen[i] = k
        for j in range(total):
            dx = pts[j, 0] - pts[k, 0]
            dy = pts[j, 1] - pts[k, 1]
            dz = pts[j, 2] - pts[k, 2]
            dj = dx * dx + dy * dy + dz * dz
            if dj < d[j]:
                d[j] = dj
        d[k] = -np.inf
    return chosen


def farthest_point_indices(points: np.ndarray, n: int, start: int) -> np.ndarray:
    """Greedy FPS: begin at ``start``, then repeatedly take the point whose distance to the
    selected set is largest (lowest index on ties). Indices in selection order."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    total = len(pts)
    if not 1 <= n <= total:
        raise ValueError(f"cannot sample {n} of {total} points")
    if not 0 <= start < total:
        raise ValueError("start index out of range")
    return _fps(pts, int(n), int(start))


def farthest_point_sample(pc: PointCloud, n: int, rng: np.random.Generator | int) -> PointCloud:
    """FPS with the start index drawn from ``rng`` (or given directly as an int)."""
    start = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(len(pc)))
    return pc.with_points(pc.points[farthest_point_indices(pc.points, n, int(start))])


def normalize_unit_ball(pc: PointCloud) -> PointCloud:
    centered = pc.points - pc.points.mean(axis=0)
    scale = np.sqrt((centered ** 2).sum(axis=1)).max()
    if not scale > 0:
        raise ValueError("all points coincide")
    return pc.with_points(centered / scale)


def augment(pc: PointCloud, rng: np.random.Generator, rotate: bool = True, jitter: bool = True,
            sigma: float = 0.01, clip: float = 0.05) -> PointCloud:
    """Random rotation about z in [0, 2pi) plus clipped Gaussian jitter."""
    pts = pc.points
    if rotate:
        pts = rotate_about_z(pts, rng.uniform(0.0, 2 * np.pi))
    if jitter:
        pts = pts + np.clip(sigma * rng.standard_normal(pts.shape), -clip, clip)
    return pc.with_points(pts)


def region_dropout(pc: PointCloud, rng: np.random.Generator, drop_fraction: float) -> PointCloud:
    """Remove the ``floor(drop_fraction * N)`` points nearest a random anchor (anchor included)."""
    if not 0 < drop_fraction < 1:
        raise ValueError("drop_fraction must lie in (0, 1)")
    n = len(pc)
    k = int(np.floor(drop_fraction * n))
    if n - k < MIN_POINTS_AFTER_DROPOUT:
        raise ValueError(f"dropout would leave {n - k} points (< {MIN_POINTS_AFTER_DROPOUT})")
    anchor = int(rng.integers(n))
    if k == 0:
        return pc
    d = ((pc.points - pc.points[anchor]) ** 2).sum(axis=1)
    drop = np.argsort(d, kind="stable")[:k]
    keep = np.ones(n, dtype=bool)
    keep[drop] = False
    return pc.with_points(pc.points[keep])


def mixup(a: PointCloud, b: PointCloud, lam: float, n: int, n_classes: int,
          rng: np.random.Generator) -> tuple[PointCloud, np.ndarray]:
    """``floor(lam * n)`` FPS points of ``a`` followed by the rest from ``b``; the soft label
    is ``lam * onehot(a) + (1 - lam) * onehot(b)``."""
    if not 0 <= lam <= 1:
        raise ValueError("lam must lie in [0, 1]")
    if a.label is None or b.label is None:
        raise ValueError("mixup needs labelled inputs")
    if len(a) < n or len(b) < n:
        raise ValueError(f"mixup needs {n} points in each input")
    na = int(np.floor(lam * n))
    parts = []
    if na:
        parts.append(a.points[farthest_point_indices(a.points, na, int(rng.integers(len(a))))])
    if n - na:
        parts.append(b.points[farthest_point_indices(b.points, n - na, int(rng.integers(len(b))))])
    soft = np.zeros(n_classes)
    soft[a.label] += lam
    soft[b.label] += 1 - lam
    return PointCloud(np.concatenate(parts)), soft


# --------------------------------------------------------------------------
# serialization


def write_ply(path: str | Path, pc: PointCloud | np.ndarray) -> None:
    pts = _as_array(pc)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in pts:
            fh.write(f"{x:.7g} {y:.7g} {z:.7g}\n")


def read_ply_points(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    n = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        if line.strip() == "end_header":
            body = lines[i + 1:i + 1 + n]
            return np.array([[float(v) for v in ln.split()[:3]] for ln in body]).reshape(-1, 3)
    raise ValueError(f"{path}: missing end_header")


def write_cloud(path: str | Path, pc: PointCloud | np.ndarray) -> None:
    """Binary cloud: little-endian uint32 count, then count x 3 float32."""
    pts = np.asarray(_as_array(pc), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.tobytes())


def read_cloud(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data)
    if len(data) != 4 + 12 * n:
        raise ValueError(f"{path}: size does not match header count {n}")
    return np.frombuffer(data, dtype="<f4", offset=4).reshape(n, 3).astype(np.float64)
