import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereorefine.geometry import ScalarField
from stereorefine.imaging import (Image, bilinear_sample, shading_image,
                                  warp_right_to_left)


def gray_image(vals):
    return Image(np.asarray(vals, dtype=float)[:, :, None])


QUAD = gray_image(np.array([[0.0, 1.0], [2.0, 3.0]]) / 3.0)


class TestImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Image(np.full((2, 2, 1), 1.5))

    def test_rejects_bad_channels(self):
        with pytest.raises(ValueError):
            Image(np.zeros((2, 2, 2)))

    def test_gray_is_channel_mean(self):
        img = Image(np.stack([np.zeros((2, 2)), np.ones((2, 2)),
                              np.full((2, 2), 0.5)], axis=2))
        np.testing.assert_allclose(img.gray(), 0.5)


class TestBilinearSample:
    def test_grid_points_exact(self):
        # scaled 2x2 quad: corners are 0, 1/3, 2/3, 1
        for (x, y), want in [((0, 0), 0.0), ((1, 0), 1 / 3),
                             ((0, 1), 2 / 3), ((1, 1), 1.0)]:
            assert bilinear_sample(QUAD, x, y) == want

    def test_center_is_corner_average(self):
        assert bilinear_sample(QUAD, 0.5, 0.5) == pytest.approx(1.5 / 3)

    def test_quarter_point(self):
        assert bilinear_sample(QUAD, 0.25, 0.0) == pytest.approx(0.25 / 3)

    def test_out_of_bounds_is_none(self):
        assert bilinear_sample(QUAD, -0.01, 0.0) is None
        assert bilinear_sample(QUAD, 0.0, 1.01) is None
        assert bilinear_sample(QUAD, 1.0 + 1e-9, 0.5) is None

    @given(st.floats(0, 3), st.floats(0, 2))
    @settings(max_examples=100)
    def test_inside_domain_never_none(self, x, y):
        img = gray_image(np.linspace(0, 1, 12).reshape(3, 4))
        v = bilinear_sample(img, x, y)
        assert v is not None and 0.0 <= v <= 1.0


class TestWarp:
    def ramp(self, h=4, w=8):
        # I(x) = x / w, constant per column
        return gray_image(np.tile(np.arange(w) / w, (h, 1)))

    def test_zero_disparity_is_identity(self):
        img = self.ramp()
        warped = warp_right_to_left(img, ScalarField(np.zeros((4, 8))))
        assert warped.valid.all()
        np.testing.assert_allclose(warped.image.values, img.values)

    def test_unit_shift(self):
        img = self.ramp()
        warped = warp_right_to_left(img, ScalarField(np.ones((4, 8))))
        assert not warped.valid[:, 0].any()
        assert warped.valid[:, 1:].all()
        np.testing.assert_allclose(warped.image.values[:, 1:, 0],
                                   img.values[:, :-1, 0])
        assert (warped.image.values[:, 0] == 0.0).all()

    def test_all_out_of_bounds(self):
        img = self.ramp()
        d = np.arange(8, dtype=float)[None, :].repeat(4, axis=0) + 1.0
        warped = warp_right_to_left(img, ScalarField(d))
        assert not warped.valid.any()
        assert (warped.image.values == 0.0).all()

    def test_invalid_disparity_masks_output(self):
        img = self.ramp()
        valid = np.ones((4, 8), bool)
        valid[2, 3] = False
        warped = warp_right_to_left(img, ScalarField(np.zeros((4, 8)), valid))
        assert not warped.valid[2, 3]
        assert warped.image.values[2, 3, 0] == 0.0

    def test_dimension_mismatch_is_fault(self):
        with pytest.raises(ValueError):
            warp_right_to_left(self.ramp(), ScalarField(np.zeros((4, 9))))

    def test_border_validity_monotone_in_disparity(self):
        # growing d near the left border can only keep or invalidate a pixel
        img = self.ramp()
        for x in range(8):
            prev = True
            for d in np.linspace(0, 9, 19):
                w = warp_right_to_left(img, ScalarField(np.full((4, 8), d)))
                cur = bool(w.valid[0, x])
                assert prev or not cur
                prev = cur


class TestShading:
    def test_constant_depth_is_flat(self):
        z = ScalarField(np.full((5, 6), 3.0))
        img = shading_image(z, eps=0.01)
        # zero gradient everywhere: single pre-rescale value, mapped to 1
        np.testing.assert_allclose(img.values, 1.0)

    def test_planar_ramp_pre_rescale_half(self):
        # |grad Z| = 1 with eps = 1 gives 1 / (1 + 1) = 0.5 before rescale;
        # the rescale then flattens it to a constant image
        z = ScalarField(np.tile(np.arange(6, dtype=float), (5, 1)))
        gy, gx = np.gradient(z.values)
        raw = 1.0 / (np.hypot(gx, gy) + 1.0)
        np.testing.assert_allclose(raw, 0.5)
        img = shading_image(z, eps=1.0)
        np.testing.assert_allclose(img.values, 1.0)

    def test_step_edge_gives_dark_band(self):
        vals = np.ones((6, 10))
        vals[:, 5:] = 9.0
        img = shading_image(ScalarField(vals), eps=0.01).values[:, :, 0]
        edge = img[:, 4:6].mean()
        flat = img[:, :3].mean()
        assert edge < 0.2 and flat > 0.8

    def test_invalid_pixels_output_zero(self):
        valid = np.ones((4, 4), bool)
        valid[0, 0] = False
        img = shading_image(ScalarField(np.ones((4, 4)), valid), eps=0.5)
        assert img.values[0, 0, 0] == 0.0

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            shading_image(ScalarField(np.ones((3, 3))), eps=0.0)
