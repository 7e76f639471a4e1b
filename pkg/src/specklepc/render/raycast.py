"""Ray-cast rendering of speckle-lit stereo pairs and of clean depth.

Shading is Lambertian with a single albedo:

    radiance = albedo * (ambient + area_light + projector)

``area_light`` averages shadow-tested samples on a downward-facing square
emitter, each contributing ``I * cos_surface * cos_emitter / d^2`` (a zero-size
light is an isotropic point source, ``I * cos_surface / d^2``). ``projector``
is ``P * texture(uv) * cos_surface`` with bilinear texture lookup, zero outside
the projector frustum or when the projector is occluded. Background is 0 and
the result is clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from specklepc.geometry import RigidPose, TriangleMesh
from specklepc.render.bvh import BVH, build_bvh, trace_ray
from specklepc.render.camera import CameraIntrinsics, StereoRig
from specklepc.render.speckle import SpecklePattern
from specklepc.stereo import DepthMap

SHADOW_OFFSET = 1e-6


@dataclass(frozen=True)
class SceneConfig:
    mesh: TriangleMesh
    albedo: float = 0.7
    light_position: tuple[float, float, float] = (0.0, 0.0, 2.0)
    light_size: float = 1.0
    light_intensity: float = 1.5
    ambient: float = 0.05
    light_samples: int = 16

    def __post_init__(self):
        if not 0 < self.albedo <= 1:
            raise ValueError("albedo must lie in (0, 1]")
        if self.light_intensity < 0 or self.ambient < 0:
            raise ValueError("light terms must be nonnegative")
        side = int(round(np.sqrt(self.light_samples)))
        if side * side != self.light_samples:
            raise ValueError("light_samples must be a perfect square (stratified grid)")
        if self.light_intensity > 0 and len(self.mesh.vertices) and self.light_position[2] <= self.mesh.vertices[:, 2].max():
            raise ValueError("light must sit above the model")


def _light_samples(scene: SceneConfig) -> np.ndarray:
    """Stratum centers on the square emitter, (N, 3)."""
    c = np.asarray(scene.light_position, dtype=np.float64)
    if scene.light_size == 0:
        return c[None, :].copy()
    side = int(round(np.sqrt(scene.light_samples)))
    g = (np.arange(side) + 0.5) / side - 0.5
    gx, gy = np.meshgrid(g * scene.light_size, g * scene.light_size, indexing="xy")
    return np.column_stack([gx.ravel() + c[0], gy.ravel() + c[1], np.full(side * side, c[2])])


@numba.njit(cache=True)
def _bilinear(tex, x, y):
    h, w = tex.shape
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@numba.njit(cache=True, parallel=True)
def _render_kernel(lo, hi, left, start, count, v0, e1, e2, tid, normals,
                   f, cx, cy, width, height, rot, org,
                   albedo, ambient, lights, light_intensity, point_light,
                   use_proj, prot, porg, pf, pcx, pcy, tex, proj_intensity):
    img = np.zeros((height, width))
    n_l = lights.shape[0]
    pw = tex.shape[1]
    ph = tex.shape[0]
    for v in numba.prange(height):
        for u in range(width):
            xc = (u - cx) / f
            yc = (v - cy) / f
            dx = rot[0, 0] * xc + rot[0, 1] * yc + rot[0, 2]
            dy = rot[1, 0] * xc + rot[1, 1] * yc + rot[1, 2]
            dz = rot[2, 0] * xc + rot[2, 1] * yc + rot[2, 2]
            t, k = trace_ray(lo, hi, left, start, count, v0, e1, e2, tid,
                             org[0], org[1], org[2], dx, dy, dz, np.inf, False)
            if k < 0:
                continue
            px = org[0] + t * dx
            py = org[1] + t * dy
            pz = org[2] + t * dz
            nx = normals[k, 0]
            ny = normals[k, 1]
            nz = normals[k, 2]
            if nx * dx + ny * dy + nz * dz > 0:  # two-sided: face the viewer
                nx = -nx
                ny = -ny
                nz = -nz
            sx = px + SHADOW_OFFSET * nx
            sy = py + SHADOW_OFFSET * ny
            sz = pz + SHADOW_OFFSET * nz

            light = 0.0
            for j in range(n_l):
                lx = lights[j, 0] - px
                ly = lights[j, 1] - py
                lz = lights[j, 2] - pz
                d2 = lx * lx + ly * ly + lz * lz
                dist = np.sqrt(d2)
                cos_s = (nx * lx + ny * ly + nz * lz) / dist
                if cos_s <= 0:
                    continue
                cos_e = 1.0 if point_light else lz / dist
                if cos_e <= 0:
                    continue
                ts, ks = trace_ray(lo, hi, left, start, count, v0, e1, e2, tid,
                                   sx, sy, sz, lx, ly, lz, 1.0, True)
                if ks >= 0:
                    continue
                light += cos_s * cos_e / d2
            light *= light_intensity / n_l

            proj = 0.0
            if use_proj:
                qx0 = px - porg[0]
                qy0 = py - porg[1]
                qz0 = pz - porg[2]
                qx = prot[0, 0] * qx0 + prot[1, 0] * qy0 + prot[2, 0] * qz0
                qy = prot[0, 1] * qx0 + prot[1, 1] * qy0 + prot[2, 1] * qz0
                qz = prot[0, 2] * qx0 + prot[1, 2] * qy0 + prot[2, 2] * qz0
                if qz > 0:
                    up = pf * qx / qz + pcx
                    vp = pf * qy / qz + pcy
                    if up >= 0 and up <= pw - 1 and vp >= 0 and vp <= ph - 1:
                        lx = -qx0
                        ly = -qy0
                        lz = -qz0
                        dist = np.sqrt(lx * lx + ly * ly + lz * lz)
                        cos_s = (nx * lx + ny * ly + nz * lz) / dist
                        if cos_s > 0:
                            ts, ks = trace_ray(lo, hi, left, start, count, v0, e1, e2, tid,
                                               sx, sy, sz, lx, ly, lz, 1.0, True)
                            if ks < 0:
                                proj = proj_intensity * _bilinear(tex, up, vp) * cos_s
            val = albedo * (ambient + light + proj)
            img[v, u] = min(max(val, 0.0), 1.0)
    return img


@numba.njit(cache=True, parallel=True)
def _depth_kernel(lo, hi, left, start, count, v0, e1, e2, tid, f, cx, cy, width, height, rot, org):
    depth = np.zeros((height, width))
    valid = np.zeros((height, width), dtype=np.bool_)
    for v in numba.prange(height):
        for u in range(width):
            xc = (u - cx) / f
            yc = (v - cy) / f
            dx = rot[0, 0] * xc + rot[0, 1] * yc + rot[0, 2]
            dy = rot[1, 0] * xc + rot[1, 1] * yc + rot[1, 2]
            dz = rot[2, 0] * xc + rot[2, 1] * yc + rot[2, 2]
            # direction has unit camera-z, so t is the depth along the optical axis
            t, k = trace_ray(lo, hi, left, start, count, v0, e1, e2, tid,
                             org[0], org[1], org[2], dx, dy, dz, np.inf, False)
            if k >= 0:
                depth[v, u] = t
                valid[v, u] = True
    return depth, valid


def render_view(scene: SceneConfig, intr: CameraIntrinsics, pose: RigidPose,
                rig: StereoRig | None = None, pattern: SpecklePattern | None = None,
                bvh: BVH | None = None) -> np.ndarray:
    """Gray image (H, W) seen from one camera; the projector is off unless both
    ``rig`` and ``pattern`` are given."""
    bvh = bvh or build_bvh(scene.mesh)
    lights = _light_samples(scene)
    use_proj = rig is not None and pattern is not None
    if use_proj:
        pp = rig.projector_pose
        pi = rig.projector_intrinsics
        if pattern.resolution != pi.resolution:
            raise ValueError("pattern resolution must equal projector resolution")
        prot, porg, pf, (pcx, pcy), tex = pp.rotation, pp.translation, pi.focal_length_px, pi.principal_point, pattern.texture
        pint = rig.projector_intensity
    else:
        prot, porg, pf, pcx, pcy, tex, pint = np.eye(3), np.zeros(3), 1.0, 0.0, 0.0, np.zeros((2, 2)), 0.0
    cx, cy = intr.principal_point
    return _render_kernel(*bvh.arrays(), bvh.normals,
                          intr.focal_length_px, cx, cy, intr.width, intr.height,
                          np.ascontiguousarray(pose.rotation), np.ascontiguousarray(pose.translation),
                          float(scene.albedo), float(scene.ambient), lights, float(scene.light_intensity),
                          scene.light_size == 0,
                          use_proj, np.ascontiguousarray(prot), np.ascontiguousarray(porg), float(pf),
                          float(pcx), float(pcy), np.ascontiguousarray(tex, dtype=np.float64), float(pint))


def render_stereo(scene: SceneConfig, rig: StereoRig, pattern: SpecklePattern | None,
                  bvh: BVH | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Left and right gray images of the speckle-lit scene (``pattern=None`` turns the projector off)."""
    bvh = bvh or build_bvh(scene.mesh)
    left = render_view(scene, rig.intrinsics, rig.left_pose, rig, pattern, bvh)
    right = render_view(scene, rig.intrinsics, rig.right_pose, rig, pattern, bvh)
    return left, right


def render_clean_depth(scene: SceneConfig | TriangleMesh, intr: CameraIntrinsics, pose: RigidPose,
                       bvh: BVH | None = None) -> DepthMap:
    """Exact optical-axis depth of the nearest surface per pixel."""
    mesh = scene.mesh if isinstance(scene, SceneConfig) else scene
    bvh = bvh or build_bvh(mesh)
    cx, cy = intr.principal_point
    depth, valid = _depth_kernel(*bvh.arrays(), intr.focal_length_px, cx, cy, intr.width, intr.height,
                                 np.ascontiguousarray(pose.rotation), np.ascontiguousarray(pose.translation))
    return DepthMap(depth, valid)
