"""Image primitive and resampling kernel tests."""

import numpy as np
import pytest

from invrise import imaging
from invrise.imaging import BinaryMask, Image, LowResGrid, Mask

from . import oracles


def random_image(rng, side=8, channels=1):
    return Image(rng.random((side, side, channels)))


class TestTypes:
    def test_image_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            Image(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            Image(np.zeros((4, 5, 1)))
        with pytest.raises(ValueError):
            Image(np.zeros((4, 4, 2)))

    def test_image_rejects_out_of_range(self):
        bad = np.zeros((4, 4, 1))
        bad[0, 0, 0] = 1.5
        with pytest.raises(ValueError):
            Image(bad)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Image(bad)

    def test_image_is_immutable(self):
        img = Image(np.zeros((4, 4, 1)))
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1.0

    def test_binary_mask_rejects_other_values(self):
        with pytest.raises(ValueError):
            BinaryMask(np.full((3, 3), 2))

    def test_grid_accepts_only_binary(self):
        LowResGrid(np.ones((2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            LowResGrid(np.full((2, 2), 0.5))

    def test_bounding_box(self):
        v = np.zeros((6, 6), dtype=np.uint8)
        v[2, 1] = 1
        v[4, 3] = 1
        assert BinaryMask(v).bounding_box() == (1, 2, 3, 3)
        with pytest.raises(ValueError):
            BinaryMask(np.zeros((3, 3), dtype=np.uint8)).bounding_box()


class TestUpsample:
    def test_column_ramp_frozen_values(self):
        # 2x2 grid [[0,1],[0,1]] at side 4: centers sit at coords 0 and 1,
        # output samples at -0.25, 0.25, 0.75, 1.25 clamp to the ramp below.
        grid = LowResGrid(np.array([[0, 1], [0, 1]]))
        mask = imaging.upsample_bilinear(grid, 4)
        expected_row = np.array([0.0, 0.25, 0.75, 1.0])
        for row in mask.values:
            np.testing.assert_allclose(row, expected_row, atol=1e-15)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        for l, side in [(2, 4), (2, 7), (3, 8), (8, 64), (5, 13)]:
            cells = rng.integers(0, 2, size=(l, l))
            got = imaging.upsample_bilinear(LowResGrid(cells), side).values
            want = oracles.bilinear_upsample_oracle(cells, side)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_constant_grids_stay_constant(self):
        for value in (0, 1):
            grid = LowResGrid(np.full((4, 4), value, dtype=np.uint8))
            mask = imaging.upsample_bilinear(grid, 32)
            np.testing.assert_array_equal(mask.values, float(value))

    def test_values_stay_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            cells = rng.integers(0, 2, size=(8, 8))
            v = imaging.upsample_bilinear(LowResGrid(cells), 64).values
            assert v.min() >= 0.0 and v.max() <= 1.0


class TestResize:
    def test_identity_when_side_matches(self):
        rng = np.random.default_rng(0)
        img = random_image(rng, 6)
        assert imaging.resize(img, 6) is img

    def test_matches_point_oracle(self):
        rng = np.random.default_rng(1)
        img = random_image(rng, 5)
        out = imaging.resize(img, 9)
        for py in (0, 4, 8):
            for px in (0, 3, 7):
                sy = (py + 0.5) * 5 / 9 - 0.5
                sx = (px + 0.5) * 5 / 9 - 0.5
                want = oracles.resample_point_oracle(img.pixels[:, :, 0], sy, sx)
                assert out.pixels[py, px, 0] == pytest.approx(want, abs=1e-12)

    def test_constant_image_survives_round_trip(self):
        img = Image(np.full((16, 16, 1), 0.375))
        out = imaging.resize(imaging.resize(img, 5), 16)
        np.testing.assert_allclose(out.pixels, 0.375, atol=1e-12)


class TestZoomRegion:
    def test_scale_one_is_identity(self):
        rng = np.random.default_rng(2)
        img = random_image(rng, 8)
        out = imaging.zoom_region(img, (2, 3, 4, 2), 1.0)
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_zoom_in_equals_crop_and_resize(self):
        # Full-frame box at scale 2 must reproduce resampling the central
        # half-size window back up to the original side.
        rng = np.random.default_rng(4)
        img = random_image(rng, 4)
        out = imaging.zoom_region(img, (0, 0, 4, 4), 2.0)
        crop = Image(img.pixels[1:3, 1:3])
        want = imaging.resize(crop, 4)
        np.testing.assert_allclose(out.pixels, want.pixels, atol=1e-12)

    def test_zoom_out_replicates_border(self):
        img = Image(np.full((6, 6, 1), 0.25))
        out = imaging.zoom_region(img, (0, 0, 6, 6), 0.5)
        np.testing.assert_allclose(out.pixels, 0.25, atol=1e-15)

    def test_zoom_in_recenters_box_content(self):
        # A bright pixel at the box center lands at the output center.
        v = np.zeros((9, 9, 1))
        v[6, 2, 0] = 1.0
        img = Image(v)
        out = imaging.zoom_region(img, (1, 5, 3, 3), 3.0)
        assert out.pixels[4, 4, 0] == pytest.approx(1.0)
        assert out.pixels[4, 4, 0] == out.pixels.max()

    def test_offcenter_zoom_in_matches_crop_resize(self):
        rng = np.random.default_rng(21)
        img = random_image(rng, 12)
        # box center (3.5, 3.5), scale 3 -> window side 4, rows/cols 2..5
        out = imaging.zoom_region(img, (2, 2, 4, 4), 3.0)
        want = imaging.resize(Image(img.pixels[2:6, 2:6]), 12)
        np.testing.assert_allclose(out.pixels, want.pixels, atol=1e-12)

    def test_zoom_out_contracts_toward_box_center(self):
        # Shrinking by half about the image center: the scene occupies the
        # central half of the frame and margins replicate the border.
        v = np.zeros((8, 8, 1))
        v[0, :, 0] = 1.0
        img = Image(v)
        out = imaging.zoom_region(img, (0, 0, 8, 8), 0.5)
        assert out.pixels[0, 4, 0] == pytest.approx(1.0)
        assert out.pixels[7, 4, 0] == pytest.approx(0.0)

    def test_rejects_bad_boxes_and_scales(self):
        img = Image(np.zeros((8, 8, 1)))
        for box in [(-1, 0, 4, 4), (0, 0, 9, 4), (5, 5, 4, 4), (0, 0, 0, 4)]:
            with pytest.raises(ValueError):
                imaging.zoom_region(img, box, 2.0)
        with pytest.raises(ValueError):
            imaging.zoom_region(img, (0, 0, 4, 4), 0.0)
        with pytest.raises(ValueError):
            imaging.zoom_region(img, (0, 0, 4, 4), -1.0)


class TestAugment:
    def test_flips_are_involutions(self):
        rng = np.random.default_rng(5)
        img = random_image(rng, 7, channels=3)
        for op in ("flip-h", "flip-v", "rot180"):
            twice = imaging.augment(imaging.augment(img, op), op)
            np.testing.assert_array_equal(twice.pixels, img.pixels)

    def test_rot90_has_order_four(self):
        rng = np.random.default_rng(6)
        img = random_image(rng, 5)
        out = img
        for _ in range(4):
            out = imaging.augment(out, "rot90")
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_rot90_rot270_compose_to_identity(self):
        rng = np.random.default_rng(8)
        img = random_image(rng, 6)
        out = imaging.augment(imaging.augment(img, "rot90"), "rot270")
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_is_pure_permutation(self):
        rng = np.random.default_rng(9)
        img = random_image(rng, 6)
        for op in imaging.AUGMENT_OPS:
            out = imaging.augment(img, op)
            np.testing.assert_array_equal(
                np.sort(out.pixels, axis=None), np.sort(img.pixels, axis=None)
            )

    def test_unknown_op_raises(self):
        img = Image(np.zeros((4, 4, 1)))
        with pytest.raises(ValueError):
            imaging.augment(img, "transpose")


class TestComposite:
    def test_only_masked_pixels_transfer(self):
        rng = np.random.default_rng(10)
        patch = random_image(rng, 4)
        bg = random_image(rng, 10)
        mv = np.zeros((4, 4), dtype=np.uint8)
        mv[1:3, 1:3] = 1
        out, out_mask = imaging.composite(patch, BinaryMask(mv), bg, (3, 5))
        sel = mv.astype(bool)
        np.testing.assert_array_equal(out.pixels[5:9, 3:7][sel], patch.pixels[sel])
        np.testing.assert_array_equal(out.pixels[5:9, 3:7][~sel], bg.pixels[5:9, 3:7][~sel])
        untouched = out.pixels.copy()
        untouched[5:9, 3:7] = bg.pixels[5:9, 3:7]
        np.testing.assert_array_equal(untouched, bg.pixels)
        assert out_mask.count() == 4
        assert out_mask.bounding_box() == (4, 6, 2, 2)

    def test_out_of_bounds_offset_raises(self):
        patch = Image(np.zeros((4, 4, 1)))
        bg = Image(np.zeros((6, 6, 1)))
        mask = BinaryMask(np.ones((4, 4), dtype=np.uint8))
        with pytest.raises(ValueError):
            imaging.composite(patch, mask, bg, (3, 0))


class TestApplyMask:
    def test_extremes(self):
        rng = np.random.default_rng(11)
        img = random_image(rng, 6)
        black = imaging.apply_mask(img, Mask(np.zeros((6, 6))))
        np.testing.assert_array_equal(black.pixels, 0.0)
        same = imaging.apply_mask(img, Mask(np.ones((6, 6))))
        np.testing.assert_array_equal(same.pixels, img.pixels)

    def test_mismatched_side_raises(self):
        img = Image(np.zeros((6, 6, 1)))
        with pytest.raises(ValueError):
            imaging.apply_mask(img, Mask(np.zeros((4, 4))))


class TestPngRoundTrip:
    def test_quantized_image_round_trips_exactly(self):
        rng = np.random.default_rng(12)
        for channels in (1, 3):
            raw = rng.integers(0, 256, size=(16, 16, channels))
            img = Image(raw / 255.0)
            back = imaging.decode_png(imaging.encode_png(img))
            np.testing.assert_array_equal(back.pixels, img.pixels)

    def test_binary_mask_round_trips(self):
        rng = np.random.default_rng(13)
        mask = BinaryMask(rng.integers(0, 2, size=(16, 16)))
        back = imaging.decode_mask_png(imaging.encode_mask_png(mask))
        np.testing.assert_array_equal(back.values, mask.values)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        img = Image(rng.integers(0, 256, size=(8, 8, 1)) / 255.0)
        p = tmp_path / "img.png"
        imaging.save_image(img, p)
        np.testing.assert_array_equal(imaging.load_image(p).pixels, img.pixels)


class TestMaskToBinary:
    def test_threshold(self):
        m = Mask(np.array([[0.0, 0.5], [0.49, 1.0]]))
        b = imaging.mask_to_binary(m)
        np.testing.assert_array_equal(b.values, [[0, 1], [0, 1]])
