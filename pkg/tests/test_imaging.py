import numpy as np
import pytest

from facegaze import imaging as im


def ramp(h, w, ax=1.0, ay=0.0, c=0.0):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return ax * xs + ay * ys + c


class TestWarpPerspective:
    def test_identity_exact_copy(self):
        rng = np.random.default_rng(0)
        img = rng.random((12, 16))
        out = im.warp_perspective(img, np.eye(3), (16, 12))
        assert np.array_equal(out, img)

    def test_constant_invariance_under_scale(self):
        img = np.full((20, 20), 0.375)
        h = np.diag([2.0, 2.0, 1.0])  # source -> output upsampling by 2
        out = im.warp_perspective(img, h, (20, 20))
        # interior samples all read the constant
        assert np.allclose(out[1:, 1:], 0.375)

    def test_translation_bilinear_by_hand(self):
        img = ramp(8, 16, ax=1.0 / 15.0)
        h = np.array([[1.0, 0.0, 5.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        out = im.warp_perspective(img, h, (16, 8))
        # output (4, 10) samples source x = 4.5: average of columns 4 and 5
        expected = 0.5 * (4.0 / 15.0 + 5.0 / 15.0)
        assert out[4, 10] == pytest.approx(expected, abs=1e-12)
        assert out[4, 10] == pytest.approx(0.3, abs=1e-12)

    def test_out_of_bounds_zero(self):
        img = np.ones((4, 4))
        h = np.array([[1.0, 0.0, 10.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        out = im.warp_perspective(img, h, (4, 4))
        assert np.all(out[:, :4] == 0.0)

    def test_singular_homography_rejected(self):
        with pytest.raises(ValueError):
            im.warp_perspective(np.ones((4, 4)), np.zeros((3, 3)), (4, 4))

    def test_composition_on_ramp_exact_interior(self):
        img = ramp(32, 32, ax=0.01, ay=0.02, c=0.1)
        h1 = np.array([[1.0, 0.0, 2.5], [0.0, 1.0, -1.5], [0.0, 0.0, 1.0]])
        h2 = np.array([[1.0, 0.0, -3.0], [0.0, 1.0, 2.0], [0.0, 0.0, 1.0]])
        two_step = im.warp_perspective(im.warp_perspective(img, h1, (32, 32)), h2, (32, 32))
        one_step = im.warp_perspective(img, h2 @ h1, (32, 32))
        interior = (slice(8, 24), slice(8, 24))
        assert np.abs(two_step[interior] - one_step[interior]).max() < 1e-12

    def test_rgb_channels(self):
        rng = np.random.default_rng(1)
        img = rng.random((6, 6, 3))
        out = im.warp_perspective(img, np.eye(3), (6, 6))
        assert np.array_equal(out, img)


class TestAffine:
    def test_identity(self):
        a = im.affine_from_3pts([(0, 0), (1, 0), (0, 1)], [(0, 0), (1, 0), (0, 1)])
        assert np.allclose(a, [[1, 0, 0], [0, 1, 0]], atol=1e-12)

    def test_translation(self):
        src = [(0, 0), (1, 0), (0, 1)]
        dst = [(10, 0), (11, 0), (10, 1)]
        a = im.affine_from_3pts(src, dst)
        assert np.allclose(a, [[1, 0, 10], [0, 1, 0]], atol=1e-12)

    def test_scale_two_maps_corner(self):
        a = im.affine_from_3pts([(0, 0), (1, 0), (0, 1)], [(0, 0), (2, 0), (0, 2)])
        mapped = a @ np.array([1.0, 1.0, 1.0])
        assert np.allclose(mapped, [2.0, 2.0], atol=1e-12)

    def test_collinear_rejected(self):
        with pytest.raises(ValueError):
            im.affine_from_3pts([(0, 0), (1, 1), (2, 2)], [(0, 0), (1, 0), (0, 1)])

    def test_warp_affine_matches_perspective(self):
        rng = np.random.default_rng(2)
        img = rng.random((10, 10))
        a = np.array([[1.1, 0.1, -0.5], [0.0, 0.9, 1.0]])
        h = np.vstack([a, [0, 0, 1.0]])
        assert np.array_equal(im.warp_affine(img, a, (10, 10)),
                              im.warp_perspective(img, h, (10, 10)))


class TestCropFace:
    def landmarks(self):
        # max pairwise distance 100 (the two mouth corners), centroid (200, 150)
        return np.array([
            [180.0, 140.0], [190.0, 140.0], [210.0, 140.0], [220.0, 140.0],
            [150.0, 160.0], [250.0, 160.0],
        ])

    def test_rectangle_arithmetic_on_ramp(self):
        lm = self.landmarks()
        img = ramp(400, 500)  # value = x
        out = im.crop_face(img, lm, scale=1.5, out_size=(150, 150))
        # side 150 centered at x = 200: output u samples x = 125 + (u + 0.5)
        u = np.arange(150)
        assert np.abs(out[75] - (125.0 + u + 0.5)).max() < 1e-9

    def test_output_size_contract(self):
        img = np.zeros((400, 500))
        out = im.crop_face(img, self.landmarks())
        assert out.shape == (448, 448)

    def test_zero_padding_near_border(self):
        lm = self.landmarks() - [170.0, 130.0]  # centroid near (30, 20)
        img = np.ones((100, 100))
        out = im.crop_face(img, lm, out_size=(64, 64))
        assert out[0, 0] == 0.0
        assert out[40, 40] > 0.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        img = rng.random((120, 120))
        lm = np.array([[40.0, 40], [48, 40], [60, 40], [68, 40], [45, 60], [63, 60]])
        out1 = im.crop_face(img, lm, out_size=(32, 32))
        shifted = np.zeros((130, 130))
        shifted[7:127, 5:125] = img
        out2 = im.crop_face(shifted, lm + [5.0, 7.0], out_size=(32, 32))
        assert np.abs(out1 - out2).max() < 1e-12

    def test_coincident_landmarks_rejected(self):
        with pytest.raises(ValueError):
            im.crop_face(np.ones((10, 10)), np.tile([5.0, 5.0], (6, 1)))


class TestCropEye:
    def test_standard_eye_patch_geometry(self):
        img = ramp(200, 300)  # value = x
        out = im.crop_eye(img, (140.0, 100.0), (100.0, 100.0), 1.5, (60, 36))
        assert out.shape == (36, 60)
        # width 60 centered at x=120: output u samples x = 90 + (u + 0.5)
        u = np.arange(60)
        assert np.abs(out[18] - (90.0 + u + 0.5)).max() < 1e-9
        # height 36 centered at y=100: rows sample y = 82 + (v + 0.5)
        imgy = ramp(200, 300, ax=0.0, ay=1.0)
        outy = im.crop_eye(imgy, (140.0, 100.0), (100.0, 100.0), 1.5, (60, 36))
        v = np.arange(36)
        assert np.abs(outy[:, 30] - (82.0 + v + 0.5)).max() < 1e-9

    def test_itracker_square_crop(self):
        img = ramp(300, 300)
        out = im.crop_eye(img, (140.0, 150.0), (100.0, 150.0), 1.7, (224, 224))
        assert out.shape == (224, 224)
        # square side 68 centered at x=120: first sample x = 86 + step/2
        step = 68.0 / 224.0
        assert out[112, 0] == pytest.approx(86.0 + step / 2.0, abs=1e-9)
        assert out[112, -1] == pytest.approx(154.0 - step / 2.0, abs=1e-9)

    def test_coincident_corners_rejected(self):
        with pytest.raises(ValueError):
            im.crop_eye(np.ones((10, 10)), (5.0, 5.0), (5.0, 5.0), 1.5, (60, 36))


class TestFaceGrid:
    def test_full_frame_all_ones(self):
        g = im.face_grid((100, 100), (0, 0, 100, 100))
        assert g.shape == (25, 25)
        assert np.all(g == 1)

    def test_outside_all_zeros(self):
        g = im.face_grid((100, 100), (200, 200, 300, 300))
        assert np.all(g == 0)

    def test_left_half(self):
        g = im.face_grid((100, 100), (0, 0, 50, 100))
        assert np.all(g[:, :12] == 1)
        # column 12 center sits exactly on the boundary; containment is inclusive
        assert np.all(g[:, 12] == 1)
        assert np.all(g[:, 13:] == 0)

    def test_brute_force_cross_check(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            w, h = rng.integers(20, 200, size=2)
            x0, y0 = rng.uniform(-20, w), rng.uniform(-20, h)
            x1, y1 = x0 + rng.uniform(0, w), y0 + rng.uniform(0, h)
            g = im.face_grid((int(w), int(h)), (x0, y0, x1, y1))
            count = 0
            for i in range(25):
                for j in range(25):
                    cx = (j + 0.5) * w / 25
                    cy = (i + 0.5) * h / 25
                    inside = (x0 <= cx <= x1) and (y0 <= cy <= y1)
                    assert g[i, j] == int(inside)
                    count += inside
            assert g.sum() == count


class TestBlockEyes:
    def landmarks(self):
        return np.array([
            [100.0, 100.0], [140.0, 100.0], [200.0, 100.0], [240.0, 100.0],
            [150.0, 180.0], [190.0, 180.0],
        ])

    def test_blocked_value_and_extent(self):
        img = np.ones((300, 400))
        out = im.block_eyes(img, self.landmarks(), gray=0.5)
        # left eye: corners (100,100)-(140,100) -> rect 60x36 centered (120,100)
        assert np.all(out[82:118, 90:150] == 0.5)
        assert out[82 - 1, 120] == 1.0 and out[118, 120] == 1.0
        assert out[100, 89] == 1.0 and out[100, 150] == 1.0
        block = out == 0.5
        assert block[82:118, 90:150].sum() == 36 * 60

    def test_far_pixels_unchanged(self):
        rng = np.random.default_rng(5)
        img = rng.random((300, 400))
        out = im.block_eyes(img, self.landmarks())
        assert out[280, 20] == img[280, 20]
        assert np.array_equal(out[200:, :], img[200:, :])


class TestBoxFilter:
    def test_radius_zero_identity(self):
        rng = np.random.default_rng(6)
        m = rng.random((7, 9))
        assert np.array_equal(im.box_filter(m, 0), m)

    def test_constant_preserved(self):
        m = np.full((5, 5), 2.5)
        assert np.allclose(im.box_filter(m, 2), 2.5)

    def test_hand_window_means(self):
        m = np.zeros((3, 3))
        m[1, 1] = 9.0
        out = im.box_filter(m, 1)
        expected = np.array([
            [2.25, 1.5, 2.25],
            [1.5, 1.0, 1.5],
            [2.25, 1.5, 2.25],
        ])
        assert np.allclose(out, expected, atol=1e-12)

    def test_bounds_property(self):
        rng = np.random.default_rng(7)
        m = rng.random((20, 30))
        for r in (1, 3, 7):
            out = im.box_filter(m, r)
            assert out.min() >= m.min() - 1e-12
            assert out.max() <= m.max() + 1e-12

    def test_rejects_negative_radius(self):
        with pytest.raises(ValueError):
            im.box_filter(np.zeros((3, 3)), -1)


class TestHalfIntensity:
    def test_symmetric_zero(self):
        rng = np.random.default_rng(8)
        half = rng.random((10, 7))
        img = np.hstack([half, half[:, ::-1]])
        assert im.half_intensity_diff(img) == pytest.approx(0.0, abs=1e-12)

    def test_binary_halves(self):
        img = np.hstack([np.zeros((5, 8)), np.ones((5, 8))])
        assert im.half_intensity_diff(img) == pytest.approx(1.0)

    def test_four_pixel_row(self):
        img = np.array([[0.2, 0.4, 0.6, 0.8]])
        assert im.half_intensity_diff(img) == pytest.approx(0.4)

    def test_odd_width_excludes_center(self):
        img = np.array([[0.0, 123.0, 1.0]])
        assert im.half_intensity_diff(img) == pytest.approx(1.0)

    def test_rgb_uses_channel_mean(self):
        img = np.zeros((2, 4, 3))
        img[:, 2:, :] = 1.0
        assert im.half_intensity_diff(img) == pytest.approx(1.0)


class TestIO:
    def test_png_roundtrip_gray(self, tmp_path):
        rng = np.random.default_rng(9)
        img = np.rint(rng.random((12, 9)) * 255) / 255.0
        path = tmp_path / "g.png"
        im.write_png(path, img)
        back = im.read_png(path)
        assert np.array_equal(back, img)

    def test_png_roundtrip_rgb(self, tmp_path):
        rng = np.random.default_rng(10)
        img = np.rint(rng.random((5, 6, 3)) * 255) / 255.0
        path = tmp_path / "c.png"
        im.write_png(path, img)
        assert np.array_equal(im.read_png(path), img)

    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        m = np.rint(rng.random((8, 13)) * 255) / 255.0
        path = tmp_path / "m.pgm"
        im.write_pgm(path, m)
        assert np.array_equal(im.read_pgm(path), m)

    def test_png_write_deterministic(self, tmp_path):
        rng = np.random.default_rng(12)
        img = rng.random((16, 16))
        im.write_png(tmp_path / "a.png", img)
        im.write_png(tmp_path / "b.png", img)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
