import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipeshift import imaging
from pipeshift.errors import ContractError, DataIntegrityError


def _img(arr):
    return np.asarray(arr, dtype=np.float32)[:, :, None]


class TestClip01:
    def test_clamps_upper(self):
        x = np.full((8, 8, 1), 1.3, dtype=np.float32)
        assert imaging.clip01(x).max() == 1.0

    def test_clamps_lower(self):
        x = np.full((8, 8, 1), -0.2, dtype=np.float32)
        assert imaging.clip01(x).min() == 0.0

    def test_identity_inside_range(self):
        x = np.full((8, 8, 1), 0.5, dtype=np.float32)
        assert np.array_equal(imaging.clip01(x), x)

    def test_rejects_nan_and_inf(self):
        bad = np.full((8, 8, 1), np.nan)
        with pytest.raises(DataIntegrityError):
            imaging.clip01(bad)
        bad[:] = np.inf
        with pytest.raises(DataIntegrityError):
            imaging.clip01(bad)

    @given(st.lists(st.floats(-5, 5, width=32), min_size=64, max_size=64))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, values):
        x = np.array(values, dtype=np.float32).reshape(8, 8, 1)
        once = imaging.clip01(x)
        assert np.array_equal(imaging.clip01(once), once)


class TestGrayscale:
    def test_equal_channels_preserved(self):
        x = np.full((8, 8, 3), 0.4, dtype=np.float32)
        g = imaging.grayscale_proxy(x)
        assert np.allclose(g, 0.4, atol=1e-6)

    def test_pure_red_weight(self):
        x = np.zeros((8, 8, 3), dtype=np.float32)
        x[:, :, 0] = 1.0
        assert np.allclose(imaging.grayscale_proxy(x), 0.299, atol=1e-6)

    def test_single_channel_copy(self):
        x = _img(np.linspace(0, 1, 64).reshape(8, 8))
        g = imaging.grayscale_proxy(x)
        assert np.array_equal(g, x[:, :, 0])
        g[0, 0] = 0.123  # a copy, not a view
        assert x[0, 0, 0] != np.float32(0.123)


class TestRobustQuantiles:
    def test_constant_image(self):
        g = np.full((16, 16), 0.5)
        assert imaging.robust_quantiles(g, 0.01, 0.99) == (0.5, 0.5)

    def test_extremes(self):
        g = np.tile(np.array([0.0, 0.5, 1.0]), 100)
        lo, hi = imaging.robust_quantiles(g.reshape(30, 10), 0.0, 1.0)
        assert (lo, hi) == (0.0, 1.0)

    def test_ramp_matches_sort_and_interpolate_oracle(self):
        g = (np.arange(100) / 100.0).reshape(10, 10)
        lo, hi = imaging.robust_quantiles(g, 0.10, 0.90)
        flat = np.sort(g.ravel())

        def oracle(q):
            h = q * (len(flat) - 1)
            i = int(np.floor(h))
            return flat[i] * (1 - (h - i)) + flat[min(i + 1, len(flat) - 1)] * (h - i)

        assert lo == pytest.approx(oracle(0.10), abs=1e-12)
        assert hi == pytest.approx(oracle(0.90), abs=1e-12)
        assert lo == pytest.approx(0.099, abs=1e-9)
        assert hi == pytest.approx(0.891, abs=1e-9)

    def test_agrees_with_numpy_on_random_arrays(self, rng):
        for _ in range(20):
            g = rng.random((12, 17))
            lo, hi = imaging.robust_quantiles(g, 0.01, 0.99)
            expect = np.quantile(g, [0.01, 0.99], method="linear")
            assert lo == pytest.approx(expect[0], abs=1e-12)
            assert hi == pytest.approx(expect[1], abs=1e-12)

    def test_monotone_in_q(self, rng):
        g = rng.random((16, 16))
        lo1, _ = imaging.robust_quantiles(g, 0.10, 0.90)
        lo2, _ = imaging.robust_quantiles(g, 0.05, 0.90)
        assert lo2 <= lo1

    def test_rejects_bad_order(self):
        with pytest.raises(ContractError):
            imaging.robust_quantiles(np.zeros((8, 8)), 0.9, 0.1)


class TestRoiMask:
    def test_bimodal_picks_bright_half(self):
        g = np.full((16, 16), 0.1, dtype=np.float32)
        g[:, 8:] = 0.9
        mask = imaging.roi_mask(g[:, :, None])
        assert mask[:, 8:].all()
        assert not mask[:, :8].any()

    def test_otsu_matches_enumeration_oracle(self, rng):
        g = np.clip(0.3 + 0.2 * rng.standard_normal((32, 32)), 0, 1)
        t = imaging.otsu_threshold(g)
        counts, edges = np.histogram(g, bins=256, range=(0.0, 1.0))
        centers = (edges[:-1] + edges[1:]) / 2
        best_k, best_v = 0, -1.0
        total = counts.sum()
        for k in range(256):
            w0 = counts[: k + 1].sum() / total
            w1 = 1 - w0
            if w0 == 0 or w1 == 0:
                continue
            mu0 = (counts[: k + 1] * centers[: k + 1]).sum() / counts[: k + 1].sum()
            mu1 = (counts[k + 1 :] * centers[k + 1 :]).sum() / counts[k + 1 :].sum()
            v = w0 * w1 * (mu0 - mu1) ** 2
            if v > best_v:
                best_k, best_v = k, v
        assert t == pytest.approx(edges[best_k + 1], abs=1e-12)

    def test_constant_image_falls_back_to_all_ones(self):
        mask = imaging.roi_mask(np.full((16, 16, 1), 0.7, dtype=np.float32))
        assert mask.all()

    def test_bright_disk_dominates_foreground(self):
        side = 64
        yy, xx = np.mgrid[:side, :side]
        disk = ((yy - 32) ** 2 + (xx - 32) ** 2) <= 15**2
        img = np.where(disk, 0.85, 0.15).astype(np.float32)[:, :, None]
        mask = imaging.roi_mask(img)
        overlap = (mask & disk).sum() / mask.sum()
        assert overlap >= 0.95

    def test_deterministic(self, phantoms_small):
        img = phantoms_small[1].image
        m1 = imaging.roi_mask(img)
        m2 = imaging.roi_mask(img.copy())
        assert np.array_equal(m1, m2)


class TestPng:
    def test_16bit_round_trip_gray(self, tmp_path, rng):
        img = rng.random((16, 16, 1)).astype(np.float32)
        imaging.write_png16(tmp_path / "g.png", img)
        back = imaging.read_png(tmp_path / "g.png")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-7

    def test_16bit_round_trip_color(self, tmp_path, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        imaging.write_png16(tmp_path / "c.png", img)
        back = imaging.read_png(tmp_path / "c.png")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-7

    def test_8bit_read(self, tmp_path):
        import cv2

        u8 = np.arange(64, dtype=np.uint8).reshape(8, 8) * 4
        cv2.imwrite(str(tmp_path / "e.png"), u8)
        img = imaging.read_png(tmp_path / "e.png")
        assert img.shape == (8, 8, 1)
        assert np.abs(img[:, :, 0] - u8 / 255.0).max() < 1e-7

    def test_rejects_garbage(self):
        with pytest.raises(DataIntegrityError):
            imaging.decode_png(b"not a png")


class TestEnsureImage:
    def test_rejects_small(self):
        with pytest.raises(ContractError):
            imaging.ensure_image(np.zeros((4, 4, 1)))

    def test_rejects_bad_channels(self):
        with pytest.raises(ContractError):
            imaging.ensure_image(np.zeros((8, 8, 2)))

    def test_rejects_out_of_range(self):
        with pytest.raises(DataIntegrityError):
            imaging.ensure_image(np.full((8, 8, 1), 1.5))
