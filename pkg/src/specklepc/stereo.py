"""Block-matching stereo, depth conversion and back-projection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from specklepc.geometry import RigidPose
from specklepc.pointcloud import PointCloud
from specklepc.render.camera import CameraIntrinsics

INVALID_DISPARITY = -1.0
MIN_DISPARITY_FOR_DEPTH = 0.5
_STRIP_ROWS = 32  # fixed so results never depend on the thread count


@dataclass(frozen=True)
class MatchParams:
    window_radius: int = 5
    max_disparity: int = 128
    min_disparity: int = 0
    uniqueness_ratio: float = 1.15
    lr_consistency_tol: int = 1
    texture_threshold: float = 1e-4  # variance of intensities in the window

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.max_disparity < 1 or self.min_disparity < 0 or self.min_disparity > self.max_disparity:
            raise ValueError("need 0 <= min_disparity <= max_disparity, max_disparity >= 1")
        if not self.uniqueness_ratio > 1:
            raise ValueError("uniqueness_ratio must exceed 1")


@dataclass
class DisparityMap:
    values: np.ndarray  # (H, W) pixels, INVALID_DISPARITY where invalid
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.where(self.valid, self.values, INVALID_DISPARITY)


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) meters, 0 where invalid
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.where(self.valid, self.values, 0.0)

    @property
    def shape(self):
        return self.values.shape


# --------------------------------------------------------------------------
# matching


@numba.njit(cache=True)
def _match_strip(left, right, y0, y1, r, dmin, dmax, uniq, lr_tol, out):
    h, w = left.shape
    nd = dmax + 1
    colsum = np.zeros((w, nd))
    for yy in range(y0 - r, y0 + r + 1):
        for x in range(w):
            for d in range(dmin, min(nd, x + 1)):
                colsum[x, d] += abs(left[yy, x] - right[yy, x - d])
    cost = np.full((w, nd), np.inf)
    best_l = np.full(w, -1, dtype=np.int64)
    best_r = np.full(w, -1, dtype=np.int64)
    for y in range(y0, y1):
        if y > y0:
            ya = y + r
            ys = y - r - 1
            for x in range(w):
                for d in range(dmin, min(nd, x + 1)):
                    colsum[x, d] += abs(left[ya, x] - right[ya, x - d]) - abs(left[ys, x] - right[ys, x - d])
        # box sums along x; cost[x, d] needs the whole window inside both images
        for d in range(dmin, nd):
            xs = r + d
            if xs >= w - r:
                continue
            run = 0.0
            for xx in range(xs - r, xs + r + 1):
                run += colsum[xx, d]
            cost[xs, d] = run
            for x in range(xs + 1, w - r):
                run += colsum[x + r, d] - colsum[x - r - 1, d]
                cost[x, d] = run
        # left-to-right winner with uniqueness
        for x in range(r, w - r):
            best_l[x] = -1
            dhi = min(dmax, x - r)
            if dhi < dmin:
                continue
            b = dmin
            cb = cost[x, dmin]
            for d in range(dmin + 1, dhi + 1):
                if cost[x, d] < cb:
                    cb = cost[x, d]
                    b = d
            second = np.inf
            for d in range(dmin, dhi + 1):
                if abs(d - b) > 1 and cost[x, d] < second:
                    second = cost[x, d]
            if second < uniq * cb:
                continue
            best_l[x] = b
        # right-to-left winner for the consistency check
        for xr in range(r, w - r):
            dhi = min(dmax, w - 1 - r - xr)
            best_r[xr] = -1
            if dhi < dmin:
                continue
            b = dmin
            cb = cost[xr + dmin, dmin]
            for d in range(dmin + 1, dhi + 1):
                if cost[xr + d, d] < cb:
                    cb = cost[xr + d, d]
                    b = d
            best_r[xr] = b
        for x in range(r, w - r):
            b = best_l[x]
            if b < 0:
                continue
            xr = x - b
            if xr < r or best_r[xr] < 0 or abs(best_r[xr] - b) > lr_tol:
                continue
            val = float(b)
            c0 = cost[x, b]
            dhi = min(dmax, x - r)
            # a zero SAD is an exact integer alignment; the parabola would only add bias
            if b > dmin and b < dhi and c0 > 1e-12:
                cm = cost[x, b - 1]
                cp = cost[x, b + 1]
                den = cm - 2.0 * c0 + cp
                if den > 0:
                    off = 0.5 * (cm - cp) / den
                    val += min(max(off, -0.5), 0.5)
            out[y, x] = val
    return out


@numba.njit(cache=True, parallel=True)
def _match(left, right, r, dmin, dmax, uniq, lr_tol):
    h, w = left.shape
    out = np.full((h, w), -1.0)
    n_rows = h - 2 * r
    n_strips = (n_rows + _STRIP_ROWS - 1) // _STRIP_ROWS
    for s in numba.prange(n_strips):
        y0 = r + s * _STRIP_ROWS
        y1 = min(y0 + _STRIP_ROWS, h - r)
        _match_strip(left, right, y0, y1, r, dmin, dmax, uniq, lr_tol, out)
    return out


def window_variance(img: np.ndarray, r: int) -> np.ndarray:
    """Intensity variance over the (2r+1)^2 window at each pixel; 0 within r of the border."""
    h, w = img.shape
    out = np.zeros((h, w))
    if h <= 2 * r or w <= 2 * r:
        return out
    k = 2 * r + 1

    def box(a):
        s = np.zeros((h + 1, w + 1))
        s[1:, 1:] = a.cumsum(0).cumsum(1)
        return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]

    n = k * k
    mean = box(img) / n
    var = box(img * img) / n - mean * mean
    out[r:h - r, r:w - r] = np.maximum(var, 0.0)
    return out


def block_match(left: np.ndarray, right: np.ndarray, params: MatchParams = MatchParams()) -> DisparityMap:
    """SAD block matching of a rectified pair; left pixel x matches right pixel x - d.

    A disparity survives when the second-best cost (excluding the immediate
    neighbours of the winner) is at least ``uniqueness_ratio`` times the best,
    the right-to-left winner agrees within ``lr_consistency_tol`` and the left
    window variance reaches ``texture_threshold``. Survivors are refined by a
    parabola through the three costs around the minimum. Pixels closer than
    ``window_radius`` to the border, or whose full disparity range does not fit
    in the right image, are invalid.
    """
    left = np.ascontiguousarray(left, dtype=np.float64)
    right = np.ascontiguousarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 2:
        raise ValueError(f"image shapes differ or are not 2-D: {left.shape} vs {right.shape}")
    r = params.window_radius
    h, w = left.shape
    if h <= 2 * r or w <= 2 * r:
        return DisparityMap(np.full((h, w), INVALID_DISPARITY), np.zeros((h, w), dtype=bool))
    disp = _match(left, right, r, params.min_disparity, params.max_disparity,
                  float(params.uniqueness_ratio), int(params.lr_consistency_tol))
    valid = disp >= 0
    # the search range of the first r + max_disparity columns runs off the right image
    valid[:, : r + params.max_disparity] = False
    valid &= window_variance(left, r) >= params.texture_threshold
    return DisparityMap(disp, valid)


# --------------------------------------------------------------------------
# depth


def disparity_to_depth(disp: DisparityMap, focal_px: float, baseline_m: float,
                       min_disparity: float = MIN_DISPARITY_FOR_DEPTH) -> DepthMap:
    if not (focal_px > 0 and baseline_m > 0):
        raise ValueError("focal length and baseline must be positive")
    valid = disp.valid & (disp.values > min_disparity)
    depth = np.zeros_like(disp.values, dtype=np.float64)
    depth[valid] = focal_px * baseline_m / disp.values[valid]
    return DepthMap(depth, valid)


def downsample_depth(depth: DepthMap, factor: int) -> DepthMap:
    """Median of the valid depths in each ``factor`` x ``factor`` block; a block with
    fewer than half its pixels valid is invalid."""
    h, w = depth.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {w}x{h}")
    if factor == 1:
        return DepthMap(depth.values.copy(), depth.valid.copy())
    hb, wb = h // factor, w // factor

    def blocks(a):
        return a.reshape(hb, factor, wb, factor).transpose(0, 2, 1, 3).reshape(hb, wb, factor * factor)

    vals = np.where(depth.valid, depth.values, np.nan)
    count = blocks(depth.valid).sum(axis=2)
    ok = count * 2 >= factor * factor
    out = np.zeros((hb, wb))
    if ok.any():
        out[ok] = np.nanmedian(blocks(vals)[ok], axis=1)
    return DepthMap(out, ok)


def backproject(depth: DepthMap, intr: CameraIntrinsics, pose: RigidPose) -> PointCloud:
    """World-frame points for every valid pixel, in row-major pixel order."""
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth {depth.shape} does not match intrinsics {intr.resolution}")
    vs, us = np.nonzero(depth.valid)
    if len(us) == 0:
        raise ValueError("depth map has no valid pixels")
    z = depth.values[vs, us]
    f = intr.focal_length_px
    cx, cy = intr.principal_point
    cam = np.column_stack([(us - cx) * z / f, (vs - cy) * z / f, z])
    return PointCloud(pose.apply(cam))


# --------------------------------------------------------------------------
# debug export


def write_pfm(path: str | Path, values: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    a = np.asarray(values, dtype="<f4")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h)
    return data.reshape(h, w)[::-1].astype(np.float64)


def false_color(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 blue-to-red map of the valid range; invalid pixels black."""
    out = np.zeros(values.shape + (3,), dtype=np.uint8)
    if not valid.any():
        return out
    lo, hi = values[valid].min(), values[valid].max()
    t = np.clip((values - lo) / (hi - lo if hi > lo else 1.0), 0, 1)
    rgb = np.stack([np.clip(1.5 - abs(4 * t - 3), 0, 1),
                    np.clip(1.5 - abs(4 * t - 2), 0, 1),
                    np.clip(1.5 - abs(4 * t - 1), 0, 1)], axis=-1)
    out[valid] = (rgb[valid] * 255).round().astype(np.uint8)
    return out
