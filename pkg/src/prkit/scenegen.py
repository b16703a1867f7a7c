"""Procedural paired image/depth/segmentation scenes.

Scenes are a far background plane plus layered rectangles/ellipses/bars, each
living in its own multiplicative depth band. Bands are separated by >12% in
ratio while in-object tilt changes depth by <0.5% per pixel, so depth
discontinuities coincide exactly with segmentation boundaries and a 4-neighbor
">5% relative jump" scan recovers the segmentation edges.

The image is per-object albedo times a depth-correlated luminance: albedos
are normalized to unit channel mean (chroma identifies objects) and the
luminance falls off linearly in log depth, so scene brightness is a clean
monotone depth cue for the networks while color stays object-specific.

`degrade_to_real` simulates real-domain ground truth: pixels near segmentation
boundaries are dropped at a configured rate and the surviving depth is warped
by a per-scene affine map, reproducing the scale gap between domains.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .io_formats import read_depth, read_pgm, read_ppm, write_depth, write_pgm, write_ppm
from .types import DepthMap

BAND_GAP = 1.12          # min depth ratio between adjacent bands (> 1.05 jump rule)
MAX_TILT_REL = 0.003     # per-pixel tilt cap; keeps in-object Sobel below 0.05*depth
MIN_THIN = 3             # thin bars: boundary carriers that real GT holes swallow
MAX_THIN = 6


@dataclass
class SceneConfig:
    h: int = 128
    w: int = 256
    n_objects: int = 10
    d_min: float = 1.0
    d_max: float = 80.0

    def validate(self):
        if self.h < 32 or self.w < 32:
            raise ConfigError(f"scene size {self.h}x{self.w} below the 32px minimum")
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")
        if not (0 < self.d_min < self.d_max):
            raise ConfigError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")


@dataclass
class SceneMeta:
    seed: int
    h: int
    w: int
    d_min: float
    d_max: float


@dataclass
class Scene:
    image: np.ndarray      # [3,H,W] in [0,1]
    depth: DepthMap        # dense, meters
    seg: np.ndarray        # [H,W] int32 labels, 0 = background
    meta: SceneMeta


@dataclass
class DegradedScene:
    base: Scene
    sparse_depth: DepthMap  # holes near boundaries, affine-warped values
    warp_a: float
    warp_b: float


def _depth_bands(d_min, d_max, n):
    """n disjoint [lo, hi] bands, each >= BAND_GAP above the previous one."""
    factor = (d_max / d_min) ** (1.0 / n)
    gap = min(BAND_GAP, np.sqrt(factor))
    bands = []
    lo = d_min
    for _ in range(n):
        hi = lo * factor / gap
        bands.append((lo, hi))
        lo = lo * factor
    return bands


def _object_geometry(rng, h, w, thin):
    """Random rectangle/ellipse footprint; thin objects are narrow bars."""
    kind = "rect" if rng.random() < 0.5 else "ellipse"
    if thin:
        kind = "rect"
        thickness = int(rng.integers(MIN_THIN, MAX_THIN + 1))
        length = int(rng.integers(h // 4, int(h * 0.7) + 1))
        if rng.random() < 0.5:
            oh, ow = length, thickness
        else:
            oh, ow = thickness, length
    else:
        oh = int(rng.integers(h // 6, int(h * 0.55) + 1))
        ow = int(rng.integers(w // 8, int(w * 0.45) + 1))
    top = int(rng.integers(0, max(1, h - oh)))
    left = int(rng.integers(0, max(1, w - ow)))
    return kind, top, left, oh, ow


def _object_mask(kind, top, left, oh, ow, h, w):
    mask = np.zeros((h, w), dtype=bool)
    if kind == "rect":
        mask[top:top + oh, left:left + ow] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = top + oh / 2.0, left + ow / 2.0
        mask = ((yy - cy) / (oh / 2.0)) ** 2 + ((xx - cx) / (ow / 2.0)) ** 2 <= 1.0
    return mask


def _tilted_plane(rng, band_lo, band_hi, h, w):
    """Per-pixel depth for one object: base value plus a gentle tilt,
    clipped to the band so cross-band gaps survive."""
    base = rng.uniform(band_lo + 0.25 * (band_hi - band_lo),
                       band_lo + 0.75 * (band_hi - band_lo))
    g_cap = MAX_TILT_REL * band_lo
    gy = rng.uniform(-g_cap, g_cap)
    gx = rng.uniform(-g_cap, g_cap)
    yy, xx = np.mgrid[0:h, 0:w]
    plane = base + gy * (yy - h / 2.0) + gx * (xx - w / 2.0)
    return np.clip(plane, band_lo, band_hi)


def generate_scene(seed, cfg: SceneConfig) -> Scene:
    """Deterministic scene from (seed, cfg); nearer objects occlude farther ones."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE2E, int(seed)]))
    h, w, n = cfg.h, cfg.w, cfg.n_objects
    bands = _depth_bands(cfg.d_min, cfg.d_max, n)

    depth = np.empty((h, w), dtype=np.float64)
    seg = np.zeros((h, w), dtype=np.int32)
    albedo = np.empty((3, h, w), dtype=np.float64)

    def unit_mean_albedo():
        a = rng.uniform(0.6, 1.4, 3)
        return a / a.mean()

    # label 0: background plane in the farthest band
    depth[:] = _tilted_plane(rng, *bands[n - 1], h, w)
    albedo[:] = unit_mean_albedo()[:, None, None]

    # labels 1..n-1 fill bands n-2..0; drawing near-to-last makes occlusion
    # ordering automatic because bands are disjoint
    for label in range(1, n):
        band = bands[n - 1 - label]
        thin = label % 2 == 0
        kind, top, left, oh, ow = _object_geometry(rng, h, w, thin)
        mask = _object_mask(kind, top, left, oh, ow, h, w)
        obj_depth = _tilted_plane(rng, *band, h, w)
        obj_albedo = unit_mean_albedo()
        depth[mask] = obj_depth[mask]
        seg[mask] = label
        for c in range(3):
            albedo[c][mask] = obj_albedo[c]

    # luminance falls linearly in log depth; unit-mean albedos keep channel
    # values below 1 (max albedo ratio is 1.4/0.6 after normalization)
    rel = (np.log(depth) - np.log(cfg.d_min)) / max(
        np.log(cfg.d_max) - np.log(cfg.d_min), 1e-9)
    lum = 0.08 + 0.54 * (1.0 - rel)
    image = albedo * lum[None]

    meta = SceneMeta(int(seed), h, w, cfg.d_min, cfg.d_max)
    return Scene(image, DepthMap(depth), seg, meta)


def seg_boundary_mask(seg):
    """Pixels with any 4-neighbor of a different label (both sides marked)."""
    edge = np.zeros(seg.shape, dtype=bool)
    edge[:-1, :] |= seg[:-1, :] != seg[1:, :]
    edge[1:, :] |= seg[1:, :] != seg[:-1, :]
    edge[:, :-1] |= seg[:, :-1] != seg[:, 1:]
    edge[:, 1:] |= seg[:, 1:] != seg[:, :-1]
    return edge


def chebyshev_dilate(mask, radius):
    """Binary dilation with a (2r+1)^2 square structuring element."""
    out = np.array(mask, dtype=bool)
    for _ in range(int(radius)):
        grown = out.copy()
        grown[:-1, :] |= out[1:, :]
        grown[1:, :] |= out[:-1, :]
        grown[:, :-1] |= out[:, 1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        out = grown
    return out


@dataclass
class DegradeConfig:
    band: int = 3
    drop_rate: float = 0.7
    warp_a: float = 1.4
    warp_b: float = 2.0
    seed: int = 99

    def validate(self):
        if self.band < 0:
            raise ConfigError("band must be >= 0")
        if not (0.0 <= self.drop_rate <= 1.0):
            raise ConfigError(f"drop_rate must be in [0,1], got {self.drop_rate}")
        if self.warp_a <= 0:
            raise ConfigError("warp slope a must be > 0")


def degrade_to_real(scene: Scene, cfg: DegradeConfig) -> DegradedScene:
    """Punch holes near segmentation boundaries and affine-warp the depth."""
    cfg.validate()
    rng = np.random.default_rng(
        np.random.SeedSequence([0xDE62ADE, int(cfg.seed), scene.meta.seed]))
    valid = np.ones(scene.seg.shape, dtype=bool)
    if cfg.band > 0 and cfg.drop_rate > 0:
        band_zone = chebyshev_dilate(seg_boundary_mask(scene.seg), cfg.band)
        dropped = band_zone & (rng.random(scene.seg.shape) < cfg.drop_rate)
        valid &= ~dropped
    warped = cfg.warp_a * scene.depth.values + cfg.warp_b
    sparse = DepthMap(np.where(valid, warped, 0.0), valid)
    return DegradedScene(scene, sparse, cfg.warp_a, cfg.warp_b)


# ---------------------------------------------------------------------------
# dataset directory layout: {split}/{index:05}_{kind}.{ext}
# ---------------------------------------------------------------------------

def write_scene(root, split, index, scene: Scene, degraded: DegradedScene = None):
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    stem = f"{index:05d}"
    write_ppm(d / f"{stem}_image.ppm", scene.image)
    write_depth(d / f"{stem}_depth.pfm", scene.depth)
    write_pgm(d / f"{stem}_seg.pgm", scene.seg.astype(np.uint8))
    if degraded is not None:
        write_depth(d / f"{stem}_sparse.pfm", degraded.sparse_depth)
        write_pgm(d / f"{stem}_valid.pgm", degraded.sparse_depth.valid)


@dataclass
class SceneRecord:
    index: int
    image: np.ndarray
    depth: DepthMap            # dense synthetic GT
    seg: np.ndarray
    sparse_depth: DepthMap = None   # present for the degraded "real" domain
    pseudo: DepthMap = None         # teacher pseudo labels, when generated


def load_split(root, split, with_pseudo=False):
    d = Path(root) / split
    records = []
    for depth_path in sorted(d.glob("*_depth.pfm")):
        stem = depth_path.name.split("_")[0]
        image = read_ppm(d / f"{stem}_image.ppm")
        depth = read_depth(depth_path)
        seg = read_pgm(d / f"{stem}_seg.pgm").astype(np.int32)
        rec = SceneRecord(int(stem), image, depth, seg)
        sparse_path = d / f"{stem}_sparse.pfm"
        if sparse_path.exists():
            values = read_depth(sparse_path).values
            valid = read_pgm(d / f"{stem}_valid.pgm") > 0
            rec.sparse_depth = DepthMap(values, valid)
        if with_pseudo:
            pseudo_path = d / f"{stem}_pseudo.pfm"
            if pseudo_path.exists():
                rec.pseudo = read_depth(pseudo_path)
        records.append(rec)
    return records
