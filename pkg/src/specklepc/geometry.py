"""Triangle meshes, rigid poses and the mesh pre-processing used before rendering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    face_normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        n = _raw_normals(v, f)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
        n.setflags(write=False)
        object.__setattr__(self, "face_normals", n)

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_raw_normals(self.vertices, self.faces), axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, pose: RigidPose) -> TriangleMesh:
        return TriangleMesh(pose.apply(self.vertices), self.faces)


def _raw_normals(v, f):
    if len(f) == 0:
        return np.zeros((0, 3))
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return np.cross(b - a, c - a)


def drop_degenerate(mesh: TriangleMesh, min_area: float = DEGENERATE_AREA) -> TriangleMesh:
    keep = mesh.face_areas() >= min_area
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropped %d degenerate faces", dropped)
    return TriangleMesh(mesh.vertices, mesh.faces[keep])


@dataclass(frozen=True)
class RigidPose:
    """Maps local coordinates to world: ``x_world = rotation @ x_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidPose:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> RigidPose:
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: RigidPose) -> RigidPose:
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


# --------------------------------------------------------------------------
# loading


def load_mesh(path: str | Path) -> TriangleMesh:
    """Read an OBJ or ASCII PLY triangle mesh.

    Quads are fan-triangulated; larger polygons are rejected. Faces with
    (near) zero area are dropped and the count is logged.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise MeshError(f"cannot read {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, faces = _parse_obj(text, path)
    elif suffix == ".ply":
        verts, faces = _parse_ply(text, path)
    else:
        raise MeshError(f"unsupported mesh format: {path.suffix}")
    if len(faces) == 0:
        raise MeshError(f"{path}: no faces")
    mesh = drop_degenerate(TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                                        np.array(faces, dtype=np.int64).reshape(-1, 3)))
    if len(mesh.faces) == 0:
        raise MeshError(f"{path}: zero valid faces")
    return mesh


def _polygon_to_triangles(idx: list[int], path) -> list[tuple[int, int, int]]:
    if len(idx) == 3:
        return [tuple(idx)]
    if len(idx) == 4:
        return [(idx[0], idx[1], idx[2]), (idx[0], idx[2], idx[3])]
    raise MeshError(f"{path}: polygon with {len(idx)} vertices not supported")


def _parse_obj(text: str, path):
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                # negative indices are relative to the current vertex count
                idx.append(i - 1 if i > 0 else len(verts) + i)
            faces.extend(_polygon_to_triangles(idx, f"{path}:{lineno}"))
    return verts, faces


def _parse_ply(text: str, path):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    vert_props: list[str] = []
    current = None
    body_start = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise MeshError(f"{path}: missing end_header")
    try:
        ix, iy, iz = (vert_props.index(a) for a in "xyz")
    except ValueError as exc:
        raise MeshError(f"{path}: vertex x/y/z properties missing") from exc
    body = lines[body_start:]
    if len(body) < n_vert + n_face:
        raise MeshError(f"{path}: truncated body")
    verts = []
    for line in body[:n_vert]:
        p = line.split()
        verts.append([float(p[ix]), float(p[iy]), float(p[iz])])
    faces = []
    for line in body[n_vert:n_vert + n_face]:
        p = [int(x) for x in line.split()]
        faces.extend(_polygon_to_triangles(p[1:1 + p[0]], path))
    return verts, faces


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*(float(x) for x in v)))
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# --------------------------------------------------------------------------
# pre-processing


def normalize_to_unit_cube(mesh: TriangleMesh) -> TriangleMesh:
    """Uniformly scale so the longest bounding-box side is 1 and center the box at the origin."""
    if len(mesh.vertices) == 0:
        raise MeshError("empty mesh")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if not extent > 0:
        raise MeshError("mesh has zero extent")
    center = 0.5 * (lo + hi)
    return TriangleMesh((mesh.vertices - center) / extent, mesh.faces)


def random_z_rotation(mesh: TriangleMesh, rng: np.random.Generator) -> TriangleMesh:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return TriangleMesh(rotate_about_z(mesh.vertices, angle), mesh.faces)


def rotate_about_z(points: np.ndarray, angle: float) -> np.ndarray:
    # explicit form keeps z bit-identical
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty_like(points, dtype=np.float64)
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    out[:, 2] = points[:, 2]
    return out


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, shape (n, 3)."""
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[face]
    return ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2])


# --------------------------------------------------------------------------
# primitive shapes (desk-scale benchmarks and tests)


def make_box(size=(1.0, 1.0, 1.0)) -> TriangleMesh:
    sx, sy, sz = (0.5 * np.asarray(size, dtype=np.float64))
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # outward winding
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(faces))


def make_uv_sphere(radius: float = 0.5, n_lat: int = 64, n_lon: int = 96) -> TriangleMesh:
    """Latitude/longitude sphere with poles on z; even ``n_lat`` and ``n_lon % 4 == 0``
    put vertices on all six axis extremes so the bounding box is exactly ±radius."""
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.arange(n_lon) * (2 * np.pi / n_lon)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi), np.broadcast_to(ct, (len(theta), n_lon))], axis=-1)
    verts = np.concatenate([[[0, 0, 1.0]], ring.reshape(-1, 3), [[0, 0, -1.0]]]) * radius
    south = len(verts) - 1

    def idx(i, j):
        return 1 + i * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((0, idx(0, j), idx(0, j + 1)))
        faces.append((south, idx(n_lat - 2, j + 1), idx(n_lat - 2, j)))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(faces))


def make_cylinder(radius: float = 0.5, height: float = 1.0, segments: int = 48) -> TriangleMesh:
    return _make_frustum(radius, radius, height, segments)


def make_cone(radius: float = 0.5, height: float = 1.0, segments: int = 48) -> TriangleMesh:
    return _make_frustum(radius, 0.0, height, segments)


def _make_frustum(r_bottom: float, r_top: float, height: float, segments: int) -> TriangleMesh:
    phi = np.arange(segments) * (2 * np.pi / segments)
    circle = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    h = 0.5 * height
    bottom = np.column_stack([r_bottom * circle, np.full(segments, -h)])
    verts = [bottom, [[0, 0, -h]]]
    faces = []
    bc = segments
    for j in range(segments):
        faces.append((bc, (j + 1) % segments, j))
    if r_top > 0:
        top = np.column_stack([r_top * circle, np.full(segments, h)])
        verts += [top, [[0, 0, h]]]
        t0, tc = segments + 1, 2 * segments + 1
        for j in range(segments):
            k = (j + 1) % segments
            faces += [(j, k, t0 + k), (j, t0 + k, t0 + j), (tc, t0 + j, t0 + k)]
    else:
        apex = segments + 1
        verts.append([[0, 0, h]])
        for j in range(segments):
            faces.append((j, (j + 1) % segments, apex))
    return TriangleMesh(np.concatenate(verts), np.array(faces))


def make_plane(center, normal_axis: int = 2, size: float = 10.0) -> TriangleMesh:
    """Square of side ``size`` perpendicular to a coordinate axis."""
    c = np.asarray(center, dtype=np.float64)
    u, v = [a for a in range(3) if a != normal_axis]
    corners = []
    for du, dv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
        p = c.copy()
        p[u] += du * size / 2
        p[v] += dv * size / 2
        corners.append(p)
    return TriangleMesh(np.array(corners), np.array([(0, 1, 2), (0, 2, 3)]))
