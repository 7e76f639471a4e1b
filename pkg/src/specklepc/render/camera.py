"""Pinhole cameras and the rectified stereo rig with a central projector.

Camera frames follow the usual vision convention: x right, y down, z along
the optical axis. Poses map camera coordinates to world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from specklepc.geometry import RigidPose


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length_px: float
    principal_point: tuple[float, float]
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        w, h = self.resolution
        cx, cy = self.principal_point
        if not self.focal_length_px > 0:
            raise ValueError("focal length must be positive")
        if w < 2 or h < 2:
            raise ValueError("resolution must be at least 2x2")
        if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
            raise ValueError("principal point outside the image")
        object.__setattr__(self, "focal_length_px", float(self.focal_length_px))
        object.__setattr__(self, "principal_point", (float(cx), float(cy)))
        object.__setattr__(self, "resolution", (int(w), int(h)))

    @classmethod
    def centered(cls, focal_length_px: float, width: int, height: int) -> CameraIntrinsics:
        return cls(focal_length_px, ((width - 1) / 2, (height - 1) / 2), (width, height))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def matrix(self) -> np.ndarray:
        f = self.focal_length_px
        cx, cy = self.principal_point
        return np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])

    def downsampled(self, factor: int) -> CameraIntrinsics:
        """Intrinsics of an image whose pixel (u, v) covers the ``factor``-sized block at
        (factor*u, factor*v); the block center sits at ``factor*u + (factor-1)/2``."""
        w, h = self.resolution
        if w % factor or h % factor:
            raise ValueError(f"factor {factor} does not divide {w}x{h}")
        off = (factor - 1) / 2
        cx, cy = self.principal_point
        return CameraIntrinsics(self.focal_length_px / factor,
                                ((cx - off) / factor, (cy - off) / factor),
                                (w // factor, h // factor))

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """(N, 3) camera-frame points -> (N, 2) pixel coordinates (u, v)."""
        p = np.asarray(points_cam, dtype=np.float64)
        f = self.focal_length_px
        cx, cy = self.principal_point
        return np.column_stack([f * p[:, 0] / p[:, 2] + cx, f * p[:, 1] / p[:, 2] + cy])


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: RigidPose

    def project_world(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera-frame depth of world points."""
        pc = self.pose.inverse().apply(points)
        return self.intrinsics.project(pc), pc[:, 2]


@dataclass(frozen=True)
class StereoRig:
    """Rectified pair: the right camera sits ``baseline_m`` along the left camera's x axis
    with identical orientation; the projector sits halfway between them."""

    intrinsics: CameraIntrinsics
    left_pose: RigidPose
    baseline_m: float
    projector_intrinsics: CameraIntrinsics
    projector_intensity: float = 0.8

    def __post_init__(self):
        if not self.baseline_m > 0:
            raise ValueError("baseline must be positive")

    @property
    def right_pose(self) -> RigidPose:
        r = self.left_pose.rotation
        return RigidPose(r, self.left_pose.translation + self.baseline_m * r[:, 0])

    @property
    def projector_pose(self) -> RigidPose:
        r = self.left_pose.rotation
        return RigidPose(r, self.left_pose.translation + 0.5 * self.baseline_m * r[:, 0])

    @property
    def left(self) -> Camera:
        return Camera(self.intrinsics, self.left_pose)

    @property
    def right(self) -> Camera:
        return Camera(self.intrinsics, self.right_pose)

    @classmethod
    def default(cls, left_pose: RigidPose, focal_length_px: float = 1000.0,
                resolution: tuple[int, int] = (1080, 1080), baseline_m: float = 0.10,
                projector_resolution: tuple[int, int] | None = None,
                projector_intensity: float = 0.8) -> StereoRig:
        """Projector field of view matches the cameras'."""
        w, h = resolution
        intr = CameraIntrinsics.centered(focal_length_px, w, h)
        pw, ph = projector_resolution or resolution
        proj = CameraIntrinsics.centered(focal_length_px * pw / w, pw, ph)
        return cls(intr, left_pose, baseline_m, proj, projector_intensity)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera pose at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidPose(np.column_stack([right, down, fwd]), eye)
