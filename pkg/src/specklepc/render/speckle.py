from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPLAT_SIGMA = 1.0
_SPLAT_REACH = 3


@dataclass(frozen=True)
class SpecklePattern:
    texture: np.ndarray  # (H, W) in [0, 1]
    dot_density: float
    seed: int

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.texture.shape
        return w, h

    def lit_fraction(self, level: float = 0.5) -> float:
        return float((self.texture > level).mean())


def make_speckle_pattern(seed: int, resolution=(1080, 1080), dot_density: float = 0.15) -> SpecklePattern:
    """Random dot field of Gaussian splats (sigma = 1 texel, peak 1, overlaps take the max).

    A splat lights ``pi * 2 ln 2 * sigma^2`` texels above 0.5, so for Poisson-placed
    dots the expected lit fraction is ``1 - exp(-n * that / area)``; the dot count
    is solved from that so ``dot_density`` is the expected lit fraction.
    """
    if not 0 < dot_density < 1:
        raise ValueError("dot_density must lie in (0, 1)")
    w, h = resolution
    rng = np.random.default_rng(seed)
    lit_area = np.pi * 2 * np.log(2) * SPLAT_SIGMA ** 2
    n = int(round(-np.log1p(-dot_density) * w * h / lit_area))
    cx = rng.uniform(-0.5, w - 0.5, n)
    cy = rng.uniform(-0.5, h - 0.5, n)
    tex = np.zeros((h, w))
    ix0, iy0 = np.rint(cx).astype(np.int64), np.rint(cy).astype(np.int64)
    for dy in range(-_SPLAT_REACH, _SPLAT_REACH + 1):
        for dx in range(-_SPLAT_REACH, _SPLAT_REACH + 1):
            ix, iy = ix0 + dx, iy0 + dy
            ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            val = np.exp(-((ix - cx) ** 2 + (iy - cy) ** 2) / (2 * SPLAT_SIGMA ** 2))
            np.maximum.at(tex, (iy[ok], ix[ok]), val[ok])
    return SpecklePattern(tex, float(dot_density), int(seed))
