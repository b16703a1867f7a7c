"""Patch grids and seam-free assembly of patch predictions.

Grid modes follow the evaluation setups: grid16 is the disjoint 4x4 tiling,
grid49 adds half-stride shifted grids (3x4 column-shifted, 4x3 row-shifted,
3x3 both-shifted: 16+12+12+9 = 49 rois), random(n) places n uniform rois.

Assembly blends overlapping predictions with per-patch raised-cosine (Hann)
weights, the simplest scheme whose output has no seam discontinuities when
the patch predictions agree; uniform weights are available for tests.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .types import PatchRoi


@dataclass
class PatchGrid:
    rois: list
    mode: str
    image_h: int
    image_w: int
    patch_h: int
    patch_w: int

    def coverage(self):
        cov = np.zeros((self.image_h, self.image_w), dtype=np.int32)
        for roi in self.rois:
            cov[roi.slices()] += 1
        return cov

    def covers_image(self):
        return bool((self.coverage() > 0).all())


def make_grid(image_h, image_w, patch_h, patch_w, mode, seed=0, random_n=128):
    """Build the roi list for one of the modes {grid16, grid49, random}."""
    if patch_h > image_h or patch_w > image_w:
        raise ConfigError("patch larger than image")
    if mode in ("grid16", "grid49"):
        if image_h % patch_h or image_w % patch_w:
            raise ConfigError(
                f"{mode} needs image dims divisible by the patch size, "
                f"got {image_h}x{image_w} / {patch_h}x{patch_w}")
        if image_h // patch_h != 4 or image_w // patch_w != 4:
            raise ConfigError(f"{mode} is defined for a 4x4 base tiling, "
                              f"got {image_h // patch_h}x{image_w // patch_w}")
    rois = []
    if mode in ("grid16", "grid49"):
        for r in range(4):
            for c in range(4):
                rois.append(PatchRoi(r * patch_h, c * patch_w, patch_h, patch_w))
    if mode == "grid49":
        if patch_h % 2 or patch_w % 2:
            raise ConfigError("grid49 needs even patch dims for half-stride shifts")
        hh, hw = patch_h // 2, patch_w // 2
        for r in range(4):                 # column-shifted 4x3
            for c in range(3):
                rois.append(PatchRoi(r * patch_h, c * patch_w + hw, patch_h, patch_w))
        for r in range(3):                 # row-shifted 3x4
            for c in range(4):
                rois.append(PatchRoi(r * patch_h + hh, c * patch_w, patch_h, patch_w))
        for r in range(3):                 # both-shifted 3x3 interior
            for c in range(3):
                rois.append(PatchRoi(r * patch_h + hh, c * patch_w + hw, patch_h, patch_w))
        assert len(rois) == 49
    elif mode == "random":
        # placements are uniform over every offset where the patch overlaps
        # the image, then clamped to bounds (no wrapping); clamping piles
        # probability mass onto the borders so corners get covered
        rng = np.random.default_rng(np.random.SeedSequence([0x716E, int(seed)]))
        for _ in range(int(random_n)):
            r = int(np.clip(rng.integers(1 - patch_h, image_h), 0, image_h - patch_h))
            c = int(np.clip(rng.integers(1 - patch_w, image_w), 0, image_w - patch_w))
            rois.append(PatchRoi(r, c, patch_h, patch_w))
    elif mode not in ("grid16", "grid49"):
        raise ConfigError(f"unknown tiling mode {mode!r}")
    for roi in rois:
        assert roi.inside(image_h, image_w)
    return PatchGrid(rois, mode, image_h, image_w, patch_h, patch_w)


def _hann(n):
    # strictly positive raised-cosine taper over pixel centers
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * (np.arange(n) + 0.5) / n)


def assemble(preds, grid: PatchGrid, feather=True):
    """Weighted-average blend of per-roi predictions into a full map.

    preds[i] must match grid.rois[i] spatially; every image pixel must be
    covered. Output at each pixel is a convex combination of the contributing
    patch values, so disjoint grids paste exactly.
    """
    if len(preds) != len(grid.rois):
        raise ShapeError(f"{len(preds)} predictions for {len(grid.rois)} rois")
    total = np.zeros((grid.image_h, grid.image_w))
    weight = np.zeros((grid.image_h, grid.image_w))
    count = np.zeros((grid.image_h, grid.image_w), dtype=np.int32)
    single = np.zeros((grid.image_h, grid.image_w))
    for pred, roi in zip(preds, grid.rois):
        arr = np.asarray(pred, dtype=np.float64)
        if arr.shape != (roi.height, roi.width):
            raise ShapeError(f"prediction shape {arr.shape} mismatches roi "
                             f"{roi.height}x{roi.width}")
        w = np.outer(_hann(roi.height), _hann(roi.width)) if feather \
            else np.ones((roi.height, roi.width))
        total[roi.slices()] += w * arr
        weight[roi.slices()] += w
        count[roi.slices()] += 1
        single[roi.slices()] = arr
    if (weight == 0).any():
        r, c = np.argwhere(weight == 0)[0]
        raise ShapeError(f"pixel ({r}, {c}) not covered by any roi")
    # single-contributor pixels take the patch value directly, keeping
    # disjoint grids bit-exact pastes
    blended = total / weight
    return np.where(count == 1, single, blended)
