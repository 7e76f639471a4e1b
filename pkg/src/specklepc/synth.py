"""Dataset generation: camera pose sampling, per-view sensing, fusion and FPS.

Per instance the pipeline is::

    normalize mesh -> random z rotation -> sample anchor + variant poses
    -> per view: render speckle stereo pair -> block match -> depth
                 -> median downsample -> back-project
    -> fuse views -> farthest point sampling

``clean`` mode swaps the stereo part for exact ray-cast depth and ``surface``
mode samples the mesh surface directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from specklepc.geometry import (RigidPose, TriangleMesh, euler_xyz, load_mesh, normalize_to_unit_cube,
                                random_z_rotation, sample_surface)
from specklepc.pointcloud import (PointCloud, farthest_point_sample, fuse_views, normalize_unit_ball, read_cloud,
                                  write_cloud)
from specklepc.render.bvh import build_bvh
from specklepc.render.camera import StereoRig, look_at
from specklepc.render.raycast import SceneConfig, render_clean_depth, render_stereo
from specklepc.render.speckle import make_speckle_pattern
from specklepc.stereo import (DepthMap, DisparityMap, MatchParams, backproject, block_match,
                              disparity_to_depth, downsample_depth)

log = logging.getLogger(__name__)

MODES = ("speckle", "clean", "surface")
MESH_SUFFIXES = (".obj", ".ply")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    distance_range: tuple[float, float] = (3.0, 5.0)
    elevation_range_deg: tuple[float, float] = (20.0, 50.0)
    n_views: int = 3
    view_translation_jitter: float = 0.10
    view_rotation_jitter: float = 0.1
    baseline_m: float = 0.10
    focal_length_px: float = 1000.0
    render_resolution: tuple[int, int] = (1080, 1080)
    depth_downsample: int = 4
    fps_points: int = 2048
    mode: str = "speckle"
    dot_density: float = 0.15
    projector_intensity: float = 0.8
    albedo: float = 0.7
    ambient: float = 0.05
    light_height: float = 2.0
    light_size: float = 1.0
    light_intensity: float = 1.5
    light_samples: int = 16
    window_radius: int = 5
    max_disparity: int = 128
    min_disparity: int = 0
    uniqueness_ratio: float = 1.15
    lr_consistency_tol: int = 1
    texture_threshold: float = 1e-4
    surface_oversample: int = 8

    def __post_init__(self):
        object.__setattr__(self, "distance_range", tuple(float(x) for x in self.distance_range))
        object.__setattr__(self, "elevation_range_deg", tuple(float(x) for x in self.elevation_range_deg))
        object.__setattr__(self, "render_resolution", tuple(int(x) for x in self.render_resolution))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.distance_range[0] > self.distance_range[1] or self.elevation_range_deg[0] > self.elevation_range_deg[1]:
            raise ValueError("ranges must be ordered")
        if self.n_views < 1 or self.fps_points < 1:
            raise ValueError("n_views and fps_points must be >= 1")
        w, h = self.render_resolution
        if w % self.depth_downsample or h % self.depth_downsample:
            raise ValueError("depth_downsample must divide the render resolution")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> GenerationConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown generation settings: {sorted(unknown)}")
        return cls(**d)

    def match_params(self) -> MatchParams:
        return MatchParams(self.window_radius, self.max_disparity, self.min_disparity,
                           self.uniqueness_ratio, self.lr_consistency_tol, self.texture_threshold)

    def rig(self, pose: RigidPose) -> StereoRig:
        return StereoRig.default(pose, self.focal_length_px, self.render_resolution, self.baseline_m,
                                 projector_intensity=self.projector_intensity)


# --------------------------------------------------------------------------
# seeding


def instance_seed(global_seed: int, instance_id: str) -> int:
    digest = hashlib.sha256(instance_id.encode()).digest()
    ss = np.random.SeedSequence([int(global_seed), int.from_bytes(digest[:8], "little")])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("rotation", "poses", "pattern", "fps", "surface")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# --------------------------------------------------------------------------
# poses


def sample_camera_poses(rng: np.random.Generator, cfg: GenerationConfig) -> list[RigidPose]:
    """Anchor pose looking at the origin plus ``n_views - 1`` jittered variants."""
    dist = rng.uniform(*cfg.distance_range)
    elev = np.deg2rad(rng.uniform(*cfg.elevation_range_deg))
    azim = rng.uniform(0.0, 2 * np.pi)
    eye = dist * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
    anchor = look_at(eye)
    poses = [anchor]
    for _ in range(cfg.n_views - 1):
        dt = rng.uniform(-cfg.view_translation_jitter, cfg.view_translation_jitter, 3)
        de = rng.uniform(-cfg.view_rotation_jitter, cfg.view_rotation_jitter, 3)
        poses.append(RigidPose(anchor.rotation @ euler_xyz(*de), anchor.translation + dt))
    return poses


# --------------------------------------------------------------------------
# one instance


@dataclass
class ViewProducts:
    pose: RigidPose
    depth: DepthMap  # at the output (downsampled) resolution
    points: np.ndarray  # world frame, possibly empty
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    disparity: DisparityMap | None = None


@dataclass
class InstanceProducts:
    cloud: PointCloud
    views: list[ViewProducts] = field(default_factory=list)
    mesh: TriangleMesh | None = None


def _sense_views(mesh: TriangleMesh, cfg: GenerationConfig, streams, keep_images: bool) -> list[ViewProducts]:
    poses = sample_camera_poses(streams["poses"], cfg)
    bvh = build_bvh(mesh)
    out_intr = cfg.rig(poses[0]).intrinsics.downsampled(cfg.depth_downsample)
    views = []
    if cfg.mode == "clean":
        for pose in poses:
            depth = render_clean_depth(mesh, out_intr, pose, bvh=bvh)
            views.append(ViewProducts(pose, depth, _points_or_empty(depth, out_intr, pose)))
        return views
    scene = SceneConfig(mesh, albedo=cfg.albedo, light_position=(0.0, 0.0, cfg.light_height),
                        light_size=cfg.light_size, light_intensity=cfg.light_intensity,
                        ambient=cfg.ambient, light_samples=cfg.light_samples)
    pattern = make_speckle_pattern(int(streams["pattern"].integers(2 ** 31)), cfg.render_resolution,
                                   cfg.dot_density)
    params = cfg.match_params()
    for pose in poses:
        rig = cfg.rig(pose)
        left, right = render_stereo(scene, rig, pattern, bvh=bvh)
        disp = block_match(left, right, params)
        depth = downsample_depth(disparity_to_depth(disp, cfg.focal_length_px, cfg.baseline_m),
                                 cfg.depth_downsample)
        v = ViewProducts(pose, depth, _points_or_empty(depth, out_intr, pose))
        if keep_images:
            v.left, v.right, v.disparity = left, right, disp
        views.append(v)
    return views


def _points_or_empty(depth, intr, pose) -> np.ndarray:
    if not depth.valid.any():
        return np.zeros((0, 3))
    return backproject(depth, intr, pose).points


def generate_instance_products(mesh: TriangleMesh, class_id: int | None, cfg: GenerationConfig, seed: int,
                               keep_images: bool = False, name: str = "") -> InstanceProducts:
    streams = _streams(seed)
    mesh = random_z_rotation(normalize_to_unit_cube(mesh), streams["rotation"])
    if cfg.mode == "surface":
        dense = sample_surface(mesh, cfg.fps_points * cfg.surface_oversample, streams["surface"])
        fused = PointCloud(dense, class_id)
        views = []
    else:
        views = _sense_views(mesh, cfg, streams, keep_images)
        n = sum(len(v.points) for v in views)
        if n < cfg.fps_points:
            raise GenerationError(f"{name or 'instance'}: {n} fused points from {len(views)} views "
                                  f"< fps_points={cfg.fps_points}")
        fused = fuse_views([v.points for v in views], class_id)
    cloud = farthest_point_sample(fused, cfg.fps_points, streams["fps"])
    return InstanceProducts(cloud, views, mesh)


def generate_instance(mesh: TriangleMesh, class_id: int | None, cfg: GenerationConfig, seed: int) -> PointCloud:
    """Synthetic cloud of ``cfg.fps_points`` world-frame points for one mesh."""
    return generate_instance_products(mesh, class_id, cfg, seed).cloud


# --------------------------------------------------------------------------
# datasets


@dataclass
class ManifestEntry:
    instance_id: str
    class_index: int
    class_name: str
    mesh: str
    cloud: str  # relative to the manifest directory
    seed: int
    mode: str


@dataclass
class DatasetManifest:
    class_names: list[str]
    entries: list[ManifestEntry]
    config: dict = field(default_factory=dict)
    global_seed: int | None = None
    root: Path | None = None

    def to_json(self) -> str:
        return json.dumps({
            "version": MANIFEST_VERSION,
            "class_names": self.class_names,
            "global_seed": self.global_seed,
            "config": self.config,
            "entries": [asdict(e) for e in self.entries],
        }, indent=2, sort_keys=True)

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(self.to_json() + "\n")
        os.replace(tmp, path)
        return path

    def cloud_path(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.cloud

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.class_index for e in self.entries], dtype=np.int64)


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    d = json.loads(path.read_text())
    entries = [ManifestEntry(**e) for e in d["entries"]]
    k = len(d["class_names"])
    for e in entries:
        if not 0 <= e.class_index < k:
            raise ValueError(f"{e.instance_id}: class index {e.class_index} out of range")
    return DatasetManifest(d["class_names"], entries, d.get("config", {}), d.get("global_seed"), path.parent)


def discover_meshes(mesh_dir: str | Path) -> tuple[list[str], list[tuple[int, Path]]]:
    mesh_dir = Path(mesh_dir)
    if not mesh_dir.is_dir():
        raise GenerationError(f"mesh directory not found: {mesh_dir}")
    classes = sorted(p.name for p in mesh_dir.iterdir() if p.is_dir())
    if not classes:
        raise GenerationError(f"{mesh_dir}: no class subdirectories")
    found = []
    for ci, name in enumerate(classes):
        files = sorted(p for p in (mesh_dir / name).iterdir() if p.suffix.lower() in MESH_SUFFIXES)
        if not files:
            raise GenerationError(f"class directory {name!r} holds no meshes")
        found += [(ci, f) for f in files]
    return classes, found


def _generate_job(job):
    mesh_path, class_id, cfg_dict, seed, out_path, instance_id = job
    cfg = GenerationConfig.from_dict(cfg_dict)
    cloud = generate_instance(load_mesh(mesh_path), class_id, cfg, seed)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_cloud(out_path, cloud)
    return instance_id


def _worker_init():
    import numba

    numba.set_num_threads(1)


def generate_dataset(mesh_dir: str | Path, out_dir: str | Path, cfg: GenerationConfig, seed: int,
                     repetitions: int = 1, workers: int = 1) -> DatasetManifest:
    """One cloud per mesh per repetition under ``out_dir/clouds``, then ``manifest.json``.

    Instance seeds depend only on (seed, instance id), so output does not
    depend on ``workers``. The manifest is written only if every instance succeeds.
    """
    classes, meshes = discover_meshes(mesh_dir)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise GenerationError(f"cannot create {out_dir}: {exc}") from exc
    entries, jobs = [], []
    for ci, path in meshes:
        for rep in range(repetitions):
            iid = f"{classes[ci]}/{path.stem}/{rep}"
            s = instance_seed(seed, iid)
            rel = Path("clouds") / classes[ci] / f"{path.stem}_{rep}.bin"
            entries.append(ManifestEntry(iid, ci, classes[ci], str(path), rel.as_posix(), s, cfg.mode))
            jobs.append((path, ci, cfg.to_dict(), s, out_dir / rel, iid))
    if len({e.instance_id for e in entries}) != len(entries):
        raise GenerationError("duplicate instance ids (mesh files sharing a stem within a class?)")
    t0 = time.perf_counter()
    if workers <= 1:
        for job in jobs:
            _generate_job(job)
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
            list(pool.map(_generate_job, jobs))
    manifest = DatasetManifest(classes, entries, cfg.to_dict(), seed, out_dir)
    manifest.write(out_dir)
    log.info("generated instances=%d classes=%d mode=%s seconds=%.1f", len(entries), len(classes),
             cfg.mode, time.perf_counter() - t0)
    return manifest


def load_clouds(manifest: DatasetManifest, input_points: int | None = 1024) -> list[PointCloud]:
    """Manifest clouds reduced by FPS to ``input_points`` (start index drawn from
    the instance seed) and normalized to the unit ball, labelled by class index."""
    out = []
    for e in manifest.entries:
        pc = PointCloud(read_cloud(manifest.cloud_path(e)), e.class_index)
        if input_points is not None and input_points < len(pc):
            rng = np.random.default_rng([e.seed, 1024])
            pc = farthest_point_sample(pc, input_points, rng)
        out.append(normalize_unit_ball(pc))
    return out
