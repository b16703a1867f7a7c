import numpy as np
import pytest

from prkit import tiling as tl
from prkit.errors import ConfigError, ShapeError

# seed found once by scanning for full coverage of 128x256 with 128 random
# 32x64 patches, then frozen
RANDOM_COVER_SEED = 5


class TestMakeGrid:
    def test_grid16_partitions_paper_resolution(self):
        grid = tl.make_grid(2160, 3840, 540, 960, "grid16")
        assert len(grid.rois) == 16
        cov = grid.coverage()
        assert (cov == 1).all()

    def test_grid16_pairwise_disjoint(self):
        grid = tl.make_grid(128, 256, 32, 64, "grid16")
        for i, a in enumerate(grid.rois):
            for b in grid.rois[i + 1:]:
                dr = min(a.row + a.height, b.row + b.height) - max(a.row, b.row)
                dc = min(a.col + a.width, b.col + b.width) - max(a.col, b.col)
                assert dr <= 0 or dc <= 0

    def test_grid49_count_and_coverage(self):
        grid = tl.make_grid(128, 256, 32, 64, "grid49")
        assert len(grid.rois) == 49
        assert grid.covers_image()

    def test_random_mode_coverage_with_frozen_seed(self):
        grid = tl.make_grid(128, 256, 32, 64, "random", seed=RANDOM_COVER_SEED,
                            random_n=128)
        assert len(grid.rois) == 128
        assert grid.covers_image()
        for roi in grid.rois:
            assert roi.inside(128, 256)

    def test_random_mode_deterministic(self):
        g1 = tl.make_grid(64, 64, 16, 16, "random", seed=5, random_n=20)
        g2 = tl.make_grid(64, 64, 16, 16, "random", seed=5, random_n=20)
        assert g1.rois == g2.rois

    def test_non_divisible_rejected(self):
        with pytest.raises(ConfigError):
            tl.make_grid(130, 256, 32, 64, "grid16")

    def test_wrong_tile_count_rejected(self):
        with pytest.raises(ConfigError):
            tl.make_grid(96, 256, 32, 64, "grid16")  # 3x4 tiling, not 4x4

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            tl.make_grid(128, 256, 32, 64, "grid25")


class TestAssemble:
    def test_disjoint_grid_pastes_exactly(self):
        rng = np.random.default_rng(0)
        grid = tl.make_grid(64, 64, 16, 16, "grid16")
        full = rng.uniform(1, 5, (64, 64))
        preds = [full[roi.slices()] for roi in grid.rois]
        out = tl.assemble(preds, grid)
        assert np.array_equal(out, full)

    def test_constant_patches_stay_constant(self):
        grid = tl.make_grid(64, 64, 16, 16, "grid49")
        preds = [np.full((16, 16), 2.75) for _ in grid.rois]
        out = tl.assemble(preds, grid)
        np.testing.assert_allclose(out, 2.75, atol=1e-12)

    def test_half_overlap_uniform_weights_average(self):
        grid = tl.PatchGrid([tl.PatchRoi(0, 0, 4, 8), tl.PatchRoi(0, 4, 4, 8)],
                            "random", 4, 12, 4, 8)
        preds = [np.full((4, 8), 1.0), np.full((4, 8), 3.0)]
        out = tl.assemble(preds, grid, feather=False)
        np.testing.assert_array_equal(out[:, :4], 1.0)
        np.testing.assert_array_equal(out[:, 4:8], 2.0)
        np.testing.assert_array_equal(out[:, 8:], 3.0)

    def test_convexity_on_random_overlaps(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            h, w = 24, 24
            ph, pw = 12, 12
            rois = [tl.PatchRoi(0, 0, h, w)]  # base covering roi
            for _ in range(rng.integers(1, 5)):
                rois.append(tl.PatchRoi(int(rng.integers(0, h - ph + 1)),
                                        int(rng.integers(0, w - pw + 1)), ph, pw))
            grid = tl.PatchGrid(rois, "random", h, w, ph, pw)
            preds = [rng.uniform(0, 10, (r.height, r.width)) for r in rois]
            out = tl.assemble(preds, grid, feather=True)
            lo = np.full((h, w), np.inf)
            hi = np.full((h, w), -np.inf)
            for pred, roi in zip(preds, rois):
                lo[roi.slices()] = np.minimum(lo[roi.slices()], pred)
                hi[roi.slices()] = np.maximum(hi[roi.slices()], pred)
            assert (out >= lo - 1e-9).all() and (out <= hi + 1e-9).all()

    def test_seam_free_for_consistent_predictions(self):
        # identical-geometry predictions must reassemble to the global map
        rng = np.random.default_rng(2)
        full = rng.uniform(1, 80, (128, 256))
        grid = tl.make_grid(128, 256, 32, 64, "grid49")
        preds = [full[roi.slices()] for roi in grid.rois]
        out = tl.assemble(preds, grid, feather=True)
        np.testing.assert_allclose(out, full, atol=1e-9)

    def test_uncovered_pixel_error_names_pixel(self):
        grid = tl.PatchGrid([tl.PatchRoi(0, 0, 2, 2)], "random", 4, 4, 2, 2)
        with pytest.raises(ShapeError, match=r"\(0, 2\)|\(2, 0\)"):
            tl.assemble([np.ones((2, 2))], grid)

    def test_shape_mismatch_rejected(self):
        grid = tl.make_grid(64, 64, 16, 16, "grid16")
        preds = [np.ones((16, 16)) for _ in grid.rois]
        preds[3] = np.ones((8, 16))
        with pytest.raises(ShapeError):
            tl.assemble(preds, grid)
