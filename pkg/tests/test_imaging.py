import numpy as np
import pytest

from salf.imaging import (mean_l1, median_range_error, psnr, quantize, read_ply,
                          read_ppm, ssim, write_image, write_ply, write_ppm)


class TestPPM:
    def test_black_two_by_two_payload(self, tmp_path):
        path = tmp_path / "img.ppm"
        write_ppm(path, np.zeros((2, 2, 3)))
        data = path.read_bytes()
        assert data.startswith(b"P6\n2 2\n255\n")
        assert data[len(b"P6\n2 2\n255\n"):] == b"\x00" * 12

    def test_half_rounds_to_128(self):
        assert quantize(np.array([[[0.5, 0.5, 0.5]]]))[0, 0, 0] == 128

    def test_round_half_up(self):
        # 1/255 * 127.5 boundary: floor(x*255 + 0.5)
        assert quantize(np.array([[[0.498, 0.002, 0.9999]]])).tolist() == [[[127, 1, 255]]]

    def test_round_trip(self, tmp_path, rng):
        img = rng.uniform(0, 1, size=(5, 7, 3))
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == (5, 7, 3)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9

    def test_deterministic_bytes(self, tmp_path, rng):
        img = rng.uniform(0, 1, size=(8, 8, 3))
        write_ppm(tmp_path / "a.ppm", img)
        write_ppm(tmp_path / "b.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_png_via_extension(self, tmp_path, rng):
        img = rng.uniform(0, 1, size=(4, 4, 3))
        write_image(tmp_path / "img.png", img)
        from salf.imaging import read_image
        back = read_image(tmp_path / "img.png")
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9


class TestPLY:
    def test_vertex_count_matches(self, tmp_path, rng):
        pts = rng.normal(size=(17, 3))
        write_ply(tmp_path / "p.ply", pts)
        text = (tmp_path / "p.ply").read_text()
        assert "element vertex 17" in text
        back = read_ply(tmp_path / "p.ply")
        assert back.shape == (17, 3)
        assert np.max(np.abs(back - pts)) < 1e-5

    def test_empty_cloud(self, tmp_path):
        write_ply(tmp_path / "p.ply", np.zeros((0, 3)))
        assert read_ply(tmp_path / "p.ply").shape == (0, 3)


class TestMetrics:
    def test_psnr_identical_inf(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        assert psnr(img, img) == float("inf")

    def test_psnr_known_mse(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)  # MSE = 0.01
        assert psnr(a, b) == pytest.approx(20.0)

    def test_ssim_identical_one(self, rng):
        img = rng.uniform(0, 1, (32, 32, 3))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_ssim_decreases_with_noise(self, rng):
        img = rng.uniform(0, 1, (32, 32, 3))
        noisy = np.clip(img + rng.normal(0, 0.2, img.shape), 0, 1)
        assert ssim(img, noisy) < 0.95

    def test_median_range_error_shift(self, rng):
        r = rng.uniform(1, 10, 100)
        assert median_range_error(r + 0.3, r) == pytest.approx(0.3)

    def test_median_ignores_invalid(self, rng):
        r = rng.uniform(1, 10, 100)
        pred = r + 0.2
        pred[::3] = np.nan
        gt = r.copy()
        gt[1::3] = np.nan
        assert median_range_error(pred, gt) == pytest.approx(0.2)

    def test_shape_mismatch_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))
        with pytest.raises(ValueError):
            mean_l1(np.zeros(3), np.zeros(4))
