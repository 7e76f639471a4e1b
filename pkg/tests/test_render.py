import numpy as np
import pytest

from specklepc.geometry import RigidPose, TriangleMesh, make_box, make_plane, make_uv_sphere
from specklepc.pointcloud import fuse_views
from specklepc.render.bvh import build_bvh, intersect_rays, intersect_rays_brute
from specklepc.render.camera import Camera, CameraIntrinsics, StereoRig, look_at
from specklepc.render.raycast import SceneConfig, render_clean_depth, render_stereo, render_view
from specklepc.render.speckle import make_speckle_pattern
from specklepc.stereo import backproject

# camera at (0, 0, 4) looking straight down: x right, y down -> world -y, z -> world -z
DOWN = np.diag([1.0, -1.0, -1.0])
EMPTY = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def _random_rays(n, rng, radius=2.0):
    origins = rng.normal(size=(n, 3))
    origins *= radius / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-0.6, 0.6, size=(n, 3))
    return origins, targets - origins


# --------------------------------------------------------------------------
# BVH


def test_bvh_single_triangle():
    tri = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    bvh = build_bvh(tri)
    assert len(bvh.node_left) == 1 and bvh.node_left[0] == -1
    o = np.array([[0.2, 0.2, 1.0], [2.0, 2.0, 1.0]])
    d = np.array([[0, 0, -1.0], [0, 0, -1.0]])
    t, k = intersect_rays(bvh, o, d)
    tb, kb = intersect_rays_brute(tri, o, d)
    np.testing.assert_array_equal(k, kb)
    assert t[0] == pytest.approx(1.0) and k[0] == 0
    assert k[1] == -1 and np.isinf(t[1])


def test_bvh_matches_brute_force_on_sphere():
    mesh = make_uv_sphere(0.5, 72, 72)
    assert len(mesh.faces) >= 10_000
    rng = np.random.default_rng(0)
    o, d = _random_rays(1000, rng)
    t, k = intersect_rays(build_bvh(mesh), o, d)
    tb, kb = intersect_rays_brute(mesh, o, d)
    np.testing.assert_array_equal(k, kb)
    np.testing.assert_array_equal(t, tb)


def test_bvh_miss():
    mesh = make_box()
    o = np.array([[5.0, 5, 5]])
    d = np.array([[1.0, 0, 0]])
    for t, k in (intersect_rays(build_bvh(mesh), o, d), intersect_rays_brute(mesh, o, d)):
        assert k[0] == -1 and np.isinf(t[0])


# --------------------------------------------------------------------------
# cameras


def test_stereo_rig_rectification_and_disparity():
    rig = StereoRig.default(look_at([3.0, -2.0, 1.5]), 1000.0, (1080, 1080), 0.1)
    pts = make_uv_sphere(0.5, 16, 24).vertices
    (ul, zl), (ur, zr) = rig.left.project_world(pts), rig.right.project_world(pts)
    np.testing.assert_allclose(ul[:, 1], ur[:, 1], atol=0.01)
    np.testing.assert_allclose(zl, zr, atol=1e-12)
    np.testing.assert_allclose(ul[:, 0] - ur[:, 0], 1000 * 0.1 / zl, atol=0.01)
    np.testing.assert_allclose(rig.projector_pose.translation,
                               (rig.left_pose.translation + rig.right_pose.translation) / 2)


def test_intrinsics_validation_and_downsampling():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, (1, 1), (4, 4))
    with pytest.raises(ValueError):
        CameraIntrinsics(100.0, (10, 1), (4, 4))
    with pytest.raises(ValueError):
        CameraIntrinsics(100.0, (0, 0), (1, 4))
    full = CameraIntrinsics.centered(1000.0, 1080, 1080)
    small = full.downsampled(4)
    assert small.resolution == (270, 270)
    # a camera-frame point lands in the block that contains its full-resolution pixel
    p = np.array([[0.31, -0.17, 4.0]])
    u_full = full.project(p)[0]
    u_small = small.project(p)[0]
    np.testing.assert_allclose(u_small, (u_full - 1.5) / 4, atol=1e-12)


def test_look_at_points_optical_axis_at_target():
    pose = look_at([2.0, 1.0, 3.0], target=[0.1, 0.2, 0.3])
    fwd = pose.rotation[:, 2]
    to_target = np.array([0.1, 0.2, 0.3]) - [2.0, 1.0, 3.0]
    np.testing.assert_allclose(fwd, to_target / np.linalg.norm(to_target), atol=1e-12)
    assert pose.rotation[2, 1] < 0  # image "down" points downward in the world


# --------------------------------------------------------------------------
# speckle


def test_speckle_deterministic():
    a = make_speckle_pattern(11, (128, 96))
    b = make_speckle_pattern(11, (128, 96))
    np.testing.assert_array_equal(a.texture, b.texture)
    assert a.texture.shape == (96, 128)
    assert not np.array_equal(a.texture, make_speckle_pattern(12, (128, 96)).texture)


def test_speckle_density_counting():
    pat = make_speckle_pattern(0, (512, 512), 0.1)
    assert 0.05 <= pat.lit_fraction(0.5) <= 0.2
    assert pat.texture.min() >= 0 and pat.texture.max() <= 1


def test_speckle_near_zero_density_is_dark():
    pat = make_speckle_pattern(0, (256, 256), 1e-4)
    assert pat.texture.mean() < 1e-3


# --------------------------------------------------------------------------
# shading


def test_empty_scene_renders_black():
    scene = SceneConfig(EMPTY)
    rig = StereoRig.default(RigidPose.identity(), 100.0, (32, 24))
    left, right = render_stereo(scene, rig, make_speckle_pattern(0, (32, 24)))
    assert not left.any() and not right.any()
    depth = render_clean_depth(scene, rig.intrinsics, rig.left_pose)
    assert not depth.valid.any()


def test_lambertian_point_light_closed_form():
    albedo, ambient, power, h_light = 0.6, 0.05, 1.5, 2.0
    scene = SceneConfig(make_plane((0, 0, 0), 2, 20.0), albedo=albedo, light_position=(0, 0, h_light),
                        light_size=0.0, light_intensity=power, ambient=ambient, light_samples=1)
    intr = CameraIntrinsics.centered(200.0, 64, 48)
    pose = RigidPose(DOWN, np.array([0.0, 0.0, 4.0]))
    img = render_view(scene, intr, pose)
    u, v = np.meshgrid(np.arange(64), np.arange(48))
    cx, cy = intr.principal_point
    x, y = 4 * (u - cx) / 200.0, -4 * (v - cy) / 200.0
    d2 = x ** 2 + y ** 2 + h_light ** 2
    cos = h_light / np.sqrt(d2)
    expected = np.clip(albedo * (ambient + power * cos / d2), 0, 1)
    np.testing.assert_allclose(img, expected, atol=1e-3)


def test_area_light_shadow_and_energy_bound():
    # a box resting on the floor casts a shadow; nothing exceeds 1
    mesh = fuse_mesh(make_plane((0, 0, 0), 2, 6.0), make_box((0.5, 0.5, 0.5)), (0, 0, 0.25))
    scene = SceneConfig(mesh, light_intensity=20.0, light_position=(1.0, 0.0, 2.0), light_size=0.2)
    intr = CameraIntrinsics.centered(150.0, 80, 80)
    pose = RigidPose(DOWN, np.array([0.0, 0.0, 5.0]))
    img = render_view(scene, intr, pose)
    assert img.max() <= 1.0 and img.min() >= 0.0
    np.testing.assert_array_equal(img, render_view(scene, intr, pose))
    # floor on the far side of the box from the light is darker than the lit side
    cx = intr.principal_point[0]
    shadow_px = int(round(cx - 150.0 * 0.45 / 5.0))
    lit_px = int(round(cx + 150.0 * 0.7 / 5.0))
    row = int(intr.principal_point[1])
    assert img[row, shadow_px] < 0.5 * img[row, lit_px]


def fuse_mesh(a: TriangleMesh, b: TriangleMesh, offset) -> TriangleMesh:
    return TriangleMesh(np.vstack([a.vertices, b.vertices + np.asarray(offset)]),
                        np.vstack([a.faces, b.faces + len(a.vertices)]))


def test_speckle_shift_between_views():
    f, b, z = 200.0, 0.1, 2.0
    shift = f * b / z  # 10 px
    scene = SceneConfig(make_plane((0, 0, z), 2, 10.0), light_intensity=0.0, ambient=0.0)
    rig = StereoRig.default(RigidPose.identity(), f, (160, 120), b)
    pattern = make_speckle_pattern(4, (160, 120), 0.05)
    left, right = render_stereo(scene, rig, pattern)
    s = int(shift)
    # each right pixel sees the world point of the left pixel s columns further right
    np.testing.assert_allclose(right[:, 20:-20], left[:, 20 + s:-20 + s], atol=1e-6)
    # dot centroids: a dot at u in the left image appears at u - f b / z in the right image
    for v0, u0 in _isolated_peaks(left, margin=20)[:10]:
        cl = _centroid(left, v0, u0)
        cr = _centroid(right, v0, u0 - s)
        assert abs(cl[0] - cr[0]) < 0.5
        assert abs((cl[1] - cr[1]) - shift) < 0.5


def _isolated_peaks(img, margin):
    out = []
    for v in range(margin, img.shape[0] - margin):
        for u in range(margin, img.shape[1] - margin):
            w = img[v - 3:v + 4, u - 3:u + 4]
            if img[v, u] > 0.3 and img[v, u] == w.max() and (w > 0.3 * img[v, u]).sum() < 15:
                out.append((v, u))
    return out


def _centroid(img, v, u, r=2):
    w = img[v - r:v + r + 1, u - r:u + r + 1]
    vv, uu = np.mgrid[v - r:v + r + 1, u - r:u + r + 1]
    return (w * vv).sum() / w.sum(), (w * uu).sum() / w.sum()


def test_projector_shadow_receives_no_speckle():
    mesh = fuse_mesh(make_plane((0, 0, 0), 2, 6.0), make_box((0.4, 0.4, 0.4)), (0, 0, 1.5))
    scene = SceneConfig(mesh, light_intensity=0.0, ambient=0.0, light_position=(0, 0, 10))
    pose = RigidPose(DOWN, np.array([-0.3, 0.0, 4.0]))
    rig = StereoRig.default(pose, 60.0, (64, 64), 0.6)
    pattern = make_speckle_pattern(0, (64, 64), 0.5)
    pattern = type(pattern)(np.ones_like(pattern.texture), 0.5, 0)
    left = render_view(scene, rig.intrinsics, rig.left_pose, rig, pattern)
    depth = render_clean_depth(mesh, rig.intrinsics, rig.left_pose)
    world = backproject(depth, rig.intrinsics, rig.left_pose).points
    proj = rig.projector_pose.translation
    normals_up = world[:, 2] < 1e-6  # floor points
    o = world + 1e-6 * np.array([0, 0, 1.0])
    _, hit = intersect_rays_brute(mesh, o, proj - world)
    occluded = (hit >= 0) & normals_up
    lit_vals = left[depth.valid]
    assert occluded.sum() > 10
    np.testing.assert_array_equal(lit_vals[occluded], 0.0)
    uv, zp = Camera(rig.projector_intrinsics, rig.projector_pose).project_world(world)
    inside = (zp > 0) & (uv >= 0).all(axis=1) & (uv <= 63).all(axis=1)
    assert np.all(lit_vals[~occluded & normals_up & inside] > 0)


# --------------------------------------------------------------------------
# clean depth


def test_clean_depth_plane():
    intr = CameraIntrinsics.centered(300.0, 40, 30)
    depth = render_clean_depth(make_plane((0, 0, 4.0), 2, 20.0), intr, RigidPose.identity())
    assert depth.valid.all()
    np.testing.assert_allclose(depth.values, 4.0, atol=1e-6)


def test_clean_depth_sphere_center_pixel():
    r, z = 0.5, 4.0
    mesh = make_uv_sphere(r, 64, 96)
    mesh = TriangleMesh(mesh.vertices + [0, 0, z], mesh.faces)
    intr = CameraIntrinsics.centered(500.0, 101, 101)  # odd size: pixel 50 is on the axis
    depth = render_clean_depth(mesh, intr, RigidPose.identity())
    assert depth.valid[50, 50]
    assert depth.values[50, 50] == pytest.approx(z - r, abs=1e-6)
    assert not depth.valid[0, 0]
