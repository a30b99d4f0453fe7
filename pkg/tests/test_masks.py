import numpy as np
import pytest

from tinydet.autodiff import Tensor
from tinydet.geometry import Box
from tinydet.masks import (
    MaskHead,
    assign_level,
    paste_mask,
    rasterize_mask_target,
    roi_align,
)

from oracles import (
    assert_grads_close,
    finite_difference,
    roi_align_dense_oracle,
    roi_align_scipy,
)


class TestAssignLevel:
    def test_canonical_size_maps_to_p4(self):
        assert assign_level(Box(0, 0, 224, 224)) == 4

    def test_small_box_clamps_to_p3(self):
        assert assign_level(Box(0, 0, 100, 100)) == 3

    def test_large_box_maps_to_p5(self):
        assert assign_level(Box(0, 0, 600, 600)) == 5

    def test_monotone_in_area(self):
        sides = np.linspace(8, 2000, 120)
        levels = [assign_level(Box(0, 0, s, s)) for s in sides]
        assert all(a <= b for a, b in zip(levels, levels[1:]))

    def test_zero_area_rejected(self):
        with pytest.raises(ValueError, match="positive area"):
            assign_level(Box(0, 0, 0, 10))

    def test_scaled_canonical(self):
        # desk-scale variant: canonical 28 shifts the P4 region to [28, 56)
        assert assign_level(Box(0, 0, 28, 28), canonical=28.0) == 4
        assert assign_level(Box(0, 0, 20, 20), canonical=28.0) == 3
        assert assign_level(Box(0, 0, 70, 70), canonical=28.0) == 5


class TestRoiAlign:
    def test_constant_feature_map(self):
        feat = Tensor(np.full((3, 10, 10), 2.5, dtype=np.float32))
        out = roi_align(feat, np.array([[4.0, 4.0, 60.0, 44.0]]), stride=8)
        assert out.data.shape == (1, 3, 14, 14)
        np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)

    def test_grid_aligned_box_equals_direct_bin_averages(self):
        # box covering a 14x14 whole-cell region: each bin integrates one
        # bilinear cell exactly, which equals the average of its 4 corners
        rng = np.random.default_rng(0)
        feat_arr = rng.normal(size=(2, 20, 20)).astype(np.float64)
        x1, y1 = 1, 2  # feature coords; stride 1 so image == feature
        out = roi_align(Tensor(feat_arr), np.array([[x1, y1, x1 + 14, y1 + 14.0]]),
                        stride=1)
        corners = (
            feat_arr[:, y1 : y1 + 14, x1 : x1 + 14]
            + feat_arr[:, y1 + 1 : y1 + 15, x1 : x1 + 14]
            + feat_arr[:, y1 : y1 + 14, x1 + 1 : x1 + 15]
            + feat_arr[:, y1 + 1 : y1 + 15, x1 + 1 : x1 + 15]
        ) / 4.0
        np.testing.assert_allclose(out.data[0], corners, atol=1e-10)

    def test_matches_dense_resampling_oracle(self):
        rng = np.random.default_rng(1)
        feat_arr = rng.normal(size=(3, 32, 32)).astype(np.float64)
        for cells_per_bin in (1, 2):
            side = 14 * cells_per_bin
            box = np.array([[2.0, 3.0, 2.0 + side, 3.0 + side]])
            out = roi_align(Tensor(feat_arr), box, stride=1)
            dense = roi_align_dense_oracle(feat_arr, box[0])
            np.testing.assert_allclose(out.data[0], dense, atol=1e-3)

    def test_matches_scipy_on_random_boxes(self):
        rng = np.random.default_rng(2)
        feat_arr = rng.normal(size=(2, 12, 18)).astype(np.float64)
        xy = rng.uniform(-20, 120, size=(6, 2))
        wh = rng.uniform(4, 90, size=(6, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        out = roi_align(Tensor(feat_arr), boxes, stride=8)
        ref = roi_align_scipy(feat_arr, boxes, 1 / 8.0)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_linearity_in_the_feature_map(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(2, 10, 10))
        g = rng.normal(size=(2, 10, 10))
        boxes = np.array([[5.0, 5.0, 70.0, 50.0]])
        a, b = 1.7, -0.4
        combined = roi_align(Tensor(a * f + b * g), boxes, stride=8).data
        split = a * roi_align(Tensor(f), boxes, stride=8).data \
            + b * roi_align(Tensor(g), boxes, stride=8).data
        np.testing.assert_allclose(combined, split, atol=1e-6)

    def test_gradient_conserves_mass_inside_map(self):
        feat = Tensor(np.zeros((1, 20, 20)), requires_grad=True, dtype=np.float64)
        boxes = np.array([[16.0, 16.0, 144.0, 144.0]])  # well inside at stride 8
        out = roi_align(feat, boxes, stride=8)
        out.sum().backward()
        assert feat.grad.sum() == pytest.approx(out.data.size, rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        feat = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True, dtype=np.float64)
        boxes = np.array([[3.0, 5.0, 50.0, 40.0], [-5.0, -5.0, 30.0, 30.0]])
        roi_align(feat, boxes, stride=8).sum().backward()

        from tinydet._kernels import roi_align_forward

        (num,) = finite_difference(
            lambda f: roi_align_forward(f, boxes, 1 / 8.0, 14, 2).sum(),
            [feat.data.copy()],
        )
        assert_grads_close(feat.grad, num)


class TestRasterizeMaskTarget:
    def test_all_ones_mask(self):
        gt = np.ones((64, 64), dtype=np.uint8)
        out = rasterize_mask_target(gt, Box(5.2, 7.9, 40.0, 31.5))
        assert out.shape == (28, 28)
        np.testing.assert_array_equal(out, 1.0)

    def test_left_half_mask_with_left_half_box(self):
        gt = np.zeros((64, 64), dtype=np.uint8)
        gt[:, :32] = 1
        out = rasterize_mask_target(gt, Box(0, 0, 32, 64))
        np.testing.assert_array_equal(out, 1.0)

    def test_disjoint_box_is_all_zero(self):
        gt = np.zeros((64, 64), dtype=np.uint8)
        gt[:8, :8] = 1
        out = rasterize_mask_target(gt, Box(40, 40, 60, 60))
        np.testing.assert_array_equal(out, 0.0)

    def test_box_outside_image_is_all_zero(self):
        gt = np.ones((32, 32), dtype=np.uint8)
        out = rasterize_mask_target(gt, Box(100, 100, 130, 130))
        np.testing.assert_array_equal(out, 0.0)

    def test_values_are_binary(self):
        rng = np.random.default_rng(5)
        gt = (rng.uniform(size=(64, 64)) > 0.5).astype(np.uint8)
        out = rasterize_mask_target(gt, Box(10.3, 11.7, 50.1, 49.2))
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError, match="positive area"):
            rasterize_mask_target(np.ones((8, 8)), Box(3, 3, 3, 6))


class TestPasteMask:
    def test_full_confidence_grid_fills_box(self):
        grid = np.ones((28, 28), dtype=np.float32)
        out = paste_mask(grid, Box(8, 8, 24, 24), 32, 32)
        assert out.dtype == bool
        assert out[10, 10] and out[23, 23]
        assert not out[0, 0] and not out[31, 31]
        assert out.sum() == 16 * 16

    def test_zero_grid_pastes_nothing(self):
        out = paste_mask(np.zeros((28, 28)), Box(4, 4, 20, 20), 32, 32)
        assert out.sum() == 0

    def test_roundtrip_with_rasterize(self):
        # rasterize a blob into a 28x28 target, paste it back: the result
        # should mostly agree with the original mask (28-cell quantization
        # smears the boundary by about one pixel)
        gt = np.zeros((64, 64), dtype=np.uint8)
        gt[20:44, 12:52] = 1
        box = Box(8, 16, 56, 48)
        target = rasterize_mask_target(gt, box)
        pasted = paste_mask(target, box, 64, 64)
        inter = (pasted & gt.astype(bool)).sum()
        union = (pasted | gt.astype(bool)).sum()
        assert inter / union > 0.8


class TestMaskHead:
    def test_output_shape(self):
        rng = np.random.default_rng(6)
        head = MaskHead(rng, in_channels=8, num_classes=5)
        feats = Tensor(rng.normal(size=(3, 8, 14, 14)).astype(np.float32))
        out = head(feats)
        assert out.data.shape == (3, 5, 28, 28)

    def test_empty_batch(self):
        rng = np.random.default_rng(7)
        head = MaskHead(rng, in_channels=8, num_classes=5)
        out = head(Tensor(np.zeros((0, 8, 14, 14), dtype=np.float32)))
        assert out.data.shape == (0, 5, 28, 28)

    def test_end_to_end_gradient_to_features(self):
        rng = np.random.default_rng(8)
        head = MaskHead(rng, in_channels=4, num_classes=2, width=4)
        for _, p in head.params():
            p.data = p.data.astype(np.float64)
        feats = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True,
                       dtype=np.float64)
        head(feats).sum().backward()

        def ref(f):
            return float(head(Tensor(f, dtype=np.float64)).data.sum())

        (num,) = finite_difference(ref, [feats.data.copy()])
        assert_grads_close(feats.grad, num, rtol=1e-3, atol=1e-5)

    def test_param_names_unique(self):
        rng = np.random.default_rng(9)
        head = MaskHead(rng, in_channels=8, num_classes=3)
        names = [n for n, _ in head.params()]
        assert len(names) == len(set(names))
