"""Coarse depth network and the patch refiner.

The coarse net runs on a 4x-downsampled image and emits a positive depth map
(softplus head) plus a 6-level feature pyramid with strictly increasing
resolution (1/32 ... 1/1 of its input): the encoder top plus every decoder
stage. The refiner wraps a base net with the identical architecture, fuses
its pyramid with roi-cropped coarse features through 1x1 projection blocks,
and decodes a signed residual added to the roi-cropped coarse prediction.

Downsampling between encoder stages uses bilinear resampling (stride-2 odd
kernels cannot produce exact integer output sizes on even inputs under the
conv contract, so striding is realized by resampling).
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .types import PatchRoi


@dataclass
class ModelConfig:
    widths: tuple = (8, 16, 24, 32, 48, 64)
    in_channels: int = 3
    fuse_levels: int = 6
    leaky_slope: float = 0.01
    d_min_clamp: float = 0.01
    coarse_downsample: int = 4
    coarse_head_bias: float = 9.0   # softplus(bias) ~ geometric mid-depth
    seed: int = 3

    @property
    def levels(self):
        return len(self.widths)

    def validate(self):
        if self.levels < 1:
            raise ConfigError("need at least one feature level")
        if not (1 <= self.fuse_levels <= self.levels):
            raise ConfigError(f"fuse_levels must be in [1, {self.levels}]")
        if self.coarse_downsample < 1:
            raise ConfigError("coarse_downsample must be >= 1")


class Conv:
    """3x3 (or 1x1) convolution with bias; He-normal init unless zeroed."""

    def __init__(self, rng, c_in, c_out, k=3, zero=False, bias_init=0.0):
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), (c_out, c_in, k, k))
        self.w = nm.Tensor(w, requires_grad=True)
        self.b = nm.Tensor(np.full(c_out, float(bias_init)), requires_grad=True)
        self.k = k

    def __call__(self, x):
        return nm.add_channel_bias(nm.conv2d(x, self.w, 1, self.k // 2), self.b)

    def params(self):
        return [("w", self.w), ("b", self.b)]


def _half(x):
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"cannot halve odd spatial dims {h}x{w}")
    return nm.bilinear_resample(x, nm.FULL_ROI, h // 2, w // 2)


def _resize_to(x, h, w):
    return nm.bilinear_resample(x, nm.FULL_ROI, h, w)


class CoarseNet:
    """Encoder/decoder depth net; forward returns (depth, feature pyramid)."""

    def __init__(self, cfg: ModelConfig, rng=None):
        cfg.validate()
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence([0xC0A25E, cfg.seed]))
        ws = cfg.widths
        self.stem = Conv(rng, cfg.in_channels, ws[0])
        self.downs = [Conv(rng, ws[j - 1], ws[j]) for j in range(1, len(ws))]
        self.dec = [Conv(rng, ws[j + 1] + ws[j], ws[j])
                    for j in range(len(ws) - 2, -1, -1)]
        self.head = Conv(rng, ws[0], 1, k=1, bias_init=cfg.coarse_head_bias)
        self.trainable = True

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        for _, p in self.named_parameters():
            p.requires_grad = bool(flag)

    def named_parameters(self, prefix=""):
        out = []
        for name, p in self.stem.params():
            out.append((f"{prefix}stem.{name}", p))
        for i, conv in enumerate(self.downs):
            for name, p in conv.params():
                out.append((f"{prefix}down{i}.{name}", p))
        for i, conv in enumerate(self.dec):
            for name, p in conv.params():
                out.append((f"{prefix}dec{i}.{name}", p))
        for name, p in self.head.params():
            out.append((f"{prefix}head.{name}", p))
        return out

    def forward(self, image):
        """image: Tensor[3,h,w] with h, w divisible by 2^(levels-1).

        Returns (depth Tensor[h,w], features). features[i] sits at
        1/2^(levels-1-i) of the input resolution, coarsest first.
        """
        c, h, w = image.data.shape
        if h < 1 or w < 1:
            raise ShapeError("non-positive working resolution")
        stride_total = 2 ** (self.cfg.levels - 1)
        if h % stride_total or w % stride_total:
            raise ShapeError(
                f"input {h}x{w} must be divisible by {stride_total}")
        slope = self.cfg.leaky_slope
        enc = [nm.leaky_relu(self.stem(image), slope)]
        for conv in self.downs:
            enc.append(nm.leaky_relu(conv(_half(enc[-1])), slope))
        feats = [enc[-1]]
        x = enc[-1]
        for conv, skip in zip(self.dec, reversed(enc[:-1])):
            _, sh, sw = skip.data.shape
            x = nm.leaky_relu(conv(nm.concat_channels(_resize_to(x, sh, sw), skip)), slope)
            feats.append(x)
        depth = nm.softplus(self.head(x))
        return nm.reshape(depth, (h, w)), feats

    def load_state(self, params, prefix=""):
        own = dict(self.named_parameters(prefix))
        for name, tensor in own.items():
            if name not in params:
                raise ShapeError(f"checkpoint missing parameter {name}")
            if params[name].shape != tensor.data.shape:
                raise ShapeError(f"shape mismatch for {name}")
            tensor.data = np.ascontiguousarray(params[name], dtype=np.float64)

    def copy_params_from(self, other):
        for (_, dst), (_, src) in zip(self.named_parameters(), other.named_parameters()):
            if dst.data.shape != src.data.shape:
                raise ShapeError("architecture mismatch when copying parameters")
            dst.data = src.data.copy()


class RefinerNet:
    """Base net (same architecture as the coarse net) + per-level fusion
    blocks + a decoder emitting the signed residual."""

    def __init__(self, cfg: ModelConfig, rng=None):
        cfg.validate()
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence([0x2EF15E, cfg.seed]))
        self.base = CoarseNet(cfg, rng)
        level_ch = self._level_channels(cfg)
        sel = self.selected_levels()
        # linear 1x1 projections so identity initialization is expressible
        self.fuse = {l: Conv(rng, 2 * level_ch[l], level_ch[l], k=1) for l in sel}
        self.dec = []
        for prev, cur in zip(sel[:-1], sel[1:]):
            self.dec.append(Conv(rng, level_ch[prev] + level_ch[cur], level_ch[cur]))
        self.head = Conv(rng, level_ch[sel[-1]], 1, k=1, zero=True)
        self.trainable = True

    @staticmethod
    def _level_channels(cfg):
        # features run coarsest -> finest, so channel widths are reversed
        return list(reversed(cfg.widths))

    def selected_levels(self):
        """Indices of the fused pyramid levels: the fuse_levels finest ones."""
        return list(range(self.cfg.levels - self.cfg.fuse_levels, self.cfg.levels))

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        for _, p in self.named_parameters():
            p.requires_grad = bool(flag)

    def named_parameters(self, prefix=""):
        out = self.base.named_parameters(prefix + "base.")
        for l in self.selected_levels():
            for name, p in self.fuse[l].params():
                out.append((f"{prefix}fuse{l}.{name}", p))
        for i, conv in enumerate(self.dec):
            for name, p in conv.params():
                out.append((f"{prefix}dec{i}.{name}", p))
        for name, p in self.head.params():
            out.append((f"{prefix}head.{name}", p))
        return out

    def load_state(self, params, prefix=""):
        own = self.named_parameters(prefix)
        for name, tensor in own:
            if name not in params:
                raise ShapeError(f"checkpoint missing parameter {name}")
            if params[name].shape != tensor.data.shape:
                raise ShapeError(f"shape mismatch for {name}")
            tensor.data = np.ascontiguousarray(params[name], dtype=np.float64)

    def fuse_features(self, level, f_d, f_c_roi):
        """CB(Cat(f_d, roi-cropped coarse feature)) at one pyramid level."""
        if f_d.data.shape[1:] != f_c_roi.data.shape[1:]:
            raise ShapeError(
                f"fuse: spatial {f_d.data.shape[1:]} vs {f_c_roi.data.shape[1:]}")
        return self.fuse[level](nm.concat_channels(f_d, f_c_roi))

    def forward(self, patch_image, coarse_feats, roi_norm):
        """patch_image: Tensor[3,ph,pw]; coarse_feats: pyramid from the coarse
        net; roi_norm: the patch location in normalized full-image coords.

        Returns the residual Tensor[ph,pw].
        """
        _, ph, pw = patch_image.data.shape
        _, f_d = self.base.forward(patch_image)
        fused = []
        for l in self.selected_levels():
            _, fh, fw = f_d[l].data.shape
            f_c_roi = nm.bilinear_resample(coarse_feats[l], roi_norm, fh, fw)
            fused.append(self.fuse_features(l, f_d[l], f_c_roi))
        x = fused[0]
        slope = self.cfg.leaky_slope
        for conv, nxt in zip(self.dec, fused[1:]):
            _, fh, fw = nxt.data.shape
            x = nm.leaky_relu(conv(nm.concat_channels(_resize_to(x, fh, fw), nxt)), slope)
        residual = self.head(x)
        return nm.reshape(residual, (ph, pw))


def refine_patch(refiner: RefinerNet, patch_image, coarse_depth, coarse_feats,
                 roi: PatchRoi, image_h, image_w):
    """Patch depth = roi-cropped coarse depth + predicted residual, clamped
    below at d_min_clamp. Returns (depth, residual) Tensors of [ph,pw]."""
    if not roi.inside(image_h, image_w):
        raise ShapeError(f"roi {roi} outside {image_h}x{image_w} image")
    roi_norm = roi.normalized(image_h, image_w)
    residual = refiner.forward(patch_image, coarse_feats, roi_norm)
    h, w = coarse_depth.data.shape
    crop = nm.bilinear_resample(nm.reshape(coarse_depth, (1, h, w)),
                                roi_norm, roi.height, roi.width)
    crop = nm.reshape(crop, (roi.height, roi.width))
    depth = nm.clamp_min(nm.add(crop, residual), refiner.cfg.d_min_clamp)
    return depth, residual


# ---------------------------------------------------------------------------
# image/depth working-resolution helpers
# ---------------------------------------------------------------------------

def downsample_image(image, factor):
    """Box-mean downsample of [C,H,W] by an integer factor."""
    c, h, w = image.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} not divisible by downsample factor {factor}")
    return image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def downsample_depth(values, valid, factor):
    """Masked box-mean: a low-res cell is valid if any source pixel is."""
    h, w = values.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} not divisible by downsample factor {factor}")
    v = values.reshape(h // factor, factor, w // factor, factor)
    m = valid.reshape(h // factor, factor, w // factor, factor)
    counts = m.sum(axis=(1, 3))
    sums = (v * m).sum(axis=(1, 3))
    out_valid = counts > 0
    out = np.where(out_valid, sums / np.maximum(counts, 1), 0.0)
    return out, out_valid
