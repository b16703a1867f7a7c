import numpy as np
import pytest

from prkit import numerics as nm
from prkit.errors import ShapeError
from prkit.model import (CoarseNet, ModelConfig, RefinerNet, downsample_depth,
                         downsample_image, refine_patch)
from prkit.types import PatchRoi

CFG = ModelConfig()


def rand_image(shape=(3, 32, 64), seed=0):
    return nm.Tensor(np.random.default_rng(seed).uniform(0, 1, shape))


class TestCoarseNet:
    def test_output_shape_matches_input(self):
        net = CoarseNet(CFG)
        depth, feats = net.forward(rand_image())
        assert depth.data.shape == (32, 64)
        assert len(feats) == 6

    def test_feature_pyramid_resolutions_increase(self):
        net = CoarseNet(CFG)
        _, feats = net.forward(rand_image())
        # level i sits at 1/2^(L-1-i) of the input
        for i, f in enumerate(feats):
            scale = 2 ** (CFG.levels - 1 - i)
            assert f.data.shape[1:] == (32 // scale, 64 // scale)
        widths = [f.data.shape[0] for f in feats]
        assert widths == list(reversed(CFG.widths))

    def test_outputs_finite_and_positive(self):
        net = CoarseNet(CFG)
        depth, feats = net.forward(rand_image(seed=3))
        assert np.all(np.isfinite(depth.data))
        assert (depth.data > 0).all()
        for f in feats:
            assert np.all(np.isfinite(f.data))

    def test_zeroed_head_gives_softplus_of_zero(self):
        net = CoarseNet(CFG)
        net.head.w.data[:] = 0.0
        net.head.b.data[:] = 0.0
        depth, _ = net.forward(rand_image(seed=4))
        np.testing.assert_allclose(depth.data, np.log(2.0), atol=1e-12)

    def test_indivisible_resolution_rejected(self):
        net = CoarseNet(CFG)
        with pytest.raises(ShapeError):
            net.forward(rand_image((3, 33, 64), seed=5))

    def test_same_seed_same_params(self):
        a = CoarseNet(ModelConfig(seed=9))
        b = CoarseNet(ModelConfig(seed=9))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)


class TestRefinerNet:
    def test_architecture_mirror(self):
        refiner = RefinerNet(CFG)
        coarse = CoarseNet(CFG)
        shapes_base = [p.data.shape for _, p in refiner.base.named_parameters()]
        shapes_coarse = [p.data.shape for _, p in coarse.named_parameters()]
        assert shapes_base == shapes_coarse

    def test_fusion_identity_initialization(self):
        refiner = RefinerNet(CFG)
        level = 5
        ch = refiner._level_channels(CFG)[level]
        w = np.zeros((ch, 2 * ch, 1, 1))
        for c in range(ch):
            w[c, c, 0, 0] = 1.0
        refiner.fuse[level].w.data = w
        refiner.fuse[level].b.data[:] = 0.0
        rng = np.random.default_rng(6)
        f_d = nm.Tensor(rng.uniform(-1, 1, (ch, 8, 8)))
        f_c = nm.Tensor(rng.uniform(-1, 1, (ch, 8, 8)))
        fused = refiner.fuse_features(level, f_d, f_c)
        np.testing.assert_allclose(fused.data, f_d.data, atol=1e-12)

    def test_fusion_spatial_mismatch_rejected(self):
        refiner = RefinerNet(CFG)
        ch = refiner._level_channels(CFG)[5]
        with pytest.raises(ShapeError):
            refiner.fuse_features(5, nm.Tensor(np.ones((ch, 4, 4))),
                                  nm.Tensor(np.ones((ch, 4, 5))))

    def test_fusion_gradient_reaches_both_inputs(self):
        refiner = RefinerNet(CFG)
        level = 5
        ch = refiner._level_channels(CFG)[level]
        rng = np.random.default_rng(7)
        f_d = nm.Tensor(rng.uniform(-1, 1, (ch, 4, 4)), requires_grad=True)
        f_c = nm.Tensor(rng.uniform(-1, 1, (ch, 4, 4)), requires_grad=True)
        nm.backward(nm.mean_all(nm.square(refiner.fuse_features(level, f_d, f_c))))
        assert f_d.grad is not None and np.abs(f_d.grad).max() > 0
        assert f_c.grad is not None and np.abs(f_c.grad).max() > 0

    def test_selected_levels_for_partial_fusion(self):
        refiner = RefinerNet(ModelConfig(fuse_levels=2))
        assert refiner.selected_levels() == [4, 5]
        patch = rand_image(seed=8)
        coarse = CoarseNet(CFG)
        _, feats = coarse.forward(rand_image(seed=9))
        residual = refiner.forward(patch, feats, (0.0, 0.0, 0.25, 0.25))
        assert residual.data.shape == (32, 64)


class TestRefinePatch:
    def setup_method(self):
        self.coarse = CoarseNet(CFG)
        self.coarse.set_trainable(False)
        self.refiner = RefinerNet(CFG)  # head zero-initialized by default
        self.image = np.random.default_rng(10).uniform(0, 1, (3, 128, 256))
        img_low = nm.Tensor(downsample_image(self.image, 4))
        self.coarse_depth, self.feats = self.coarse.forward(img_low)

    def patch_tensor(self, roi):
        return nm.Tensor(self.image[:, roi.slices()[0], roi.slices()[1]])

    def test_residual_identity_with_zero_head(self):
        roi = PatchRoi(32, 64, 32, 64)
        depth, residual = refine_patch(self.refiner, self.patch_tensor(roi),
                                       self.coarse_depth, self.feats, roi, 128, 256)
        assert np.abs(residual.data).max() == 0.0
        crop = nm.bilinear_resample(
            nm.reshape(self.coarse_depth, (1, 32, 64)),
            roi.normalized(128, 256), 32, 64)
        assert np.abs(depth.data - crop.data[0]).max() <= 1e-12

    def test_pixel_aligned_roi_is_exact_subarray(self):
        # coarse map is 32x64; a roi covering coarse rows 8..16, cols 16..32
        # maps to full-image rows 32..64, cols 64..128 at the x4 downsample
        roi = PatchRoi(32, 64, 32, 64)
        crop = nm.bilinear_resample(nm.reshape(self.coarse_depth, (1, 32, 64)),
                                    roi.normalized(128, 256), 8, 16)
        assert np.array_equal(crop.data[0], self.coarse_depth.data[8:16, 16:32])

    def test_roi_outside_image_rejected(self):
        roi = PatchRoi(100, 200, 32, 64)
        with pytest.raises(ShapeError):
            refine_patch(self.refiner, self.patch_tensor(PatchRoi(0, 0, 32, 64)),
                         self.coarse_depth, self.feats, roi, 128, 256)

    def test_depth_clamped_below(self):
        self.refiner.head.b.data[:] = -1000.0
        roi = PatchRoi(0, 0, 32, 64)
        depth, _ = refine_patch(self.refiner, self.patch_tensor(roi),
                                self.coarse_depth, self.feats, roi, 128, 256)
        assert depth.data.min() >= CFG.d_min_clamp


class TestDownsampling:
    def test_image_box_mean(self):
        img = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
        low = downsample_image(img, 2)
        assert low.shape == (2, 2, 2)
        assert low[0, 0, 0] == pytest.approx(np.mean([0, 1, 4, 5]))

    def test_depth_masked_mean(self):
        vals = np.array([[1.0, 3.0], [5.0, 7.0]])
        valid = np.array([[True, False], [False, False]])
        out, out_valid = downsample_depth(vals, valid, 2)
        assert out[0, 0] == 1.0 and out_valid[0, 0]
        out2, out_valid2 = downsample_depth(vals, np.zeros((2, 2), bool), 2)
        assert not out_valid2[0, 0] and out2[0, 0] == 0.0

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            downsample_image(np.ones((3, 5, 4)), 2)
