import numpy as np
import pytest

from pipeshift import imaging, similarity, stages
from pipeshift.errors import ContractError


def reference_ssim_map(a, b):
    """Independent oracle: full 2-D window extraction, no separability.

    Symmetric padding, explicit 11x11 Gaussian kernel, direct windowed sums
    via stride tricks; shares no code path with the production filter.
    """
    k = 11
    off = np.arange(k) - 5.0
    g1 = np.exp(-(off**2) / (2 * 1.5**2))
    kernel = np.outer(g1, g1)
    kernel /= kernel.sum()

    def filt(plane):
        padded = np.pad(plane, k // 2, mode="symmetric")
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
        return np.einsum("ijkl,kl->ij", windows, kernel)

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b = filt(a), filt(b)
    va = filt(a * a) - mu_a**2
    vb = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = 0.01**2, 0.03**2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    )


class TestSsimMap:
    def test_self_similarity_exactly_one(self, phantoms_small):
        g = imaging.grayscale_proxy(phantoms_small[0].image)
        assert (similarity.ssim_map(g, g) == 1.0).all()

    def test_independent_noise_low(self, rng):
        a = rng.random((64, 64))
        b = rng.random((64, 64))
        assert similarity.ssim_map(a, b).mean() < 0.2

    def test_range_bound(self, rng):
        a = rng.random((32, 32))
        b = 1.0 - a
        m = similarity.ssim_map(a, b)
        assert m.min() >= -1.0 - 1e-9 and m.max() <= 1.0 + 1e-9

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ContractError):
            similarity.ssim_map(np.zeros((16, 16)), np.zeros((16, 17)))

    def test_small_planes_rejected(self):
        with pytest.raises(ContractError):
            similarity.ssim_map(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_matches_direct_convolution_oracle(self, rng):
        for _ in range(5):
            a = rng.random((32, 48))
            b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
            mine = similarity.ssim_map(a, b)
            ref = reference_ssim_map(a, b)
            assert np.abs(mine - ref).max() < 1e-9


class TestSsimGlobalRoi:
    def test_self_is_one(self, phantoms_small):
        x = phantoms_small[0].image
        assert similarity.ssim_global(x, x) == 1.0

    def test_symmetric(self, phantoms_small):
        a = phantoms_small[0].image
        b = phantoms_small[2].image
        assert similarity.ssim_global(a, b) == pytest.approx(
            similarity.ssim_global(b, a), abs=1e-12
        )

    def test_inversion_negative(self):
        rng = np.random.default_rng(5)
        base = np.clip(0.5 + 0.08 * rng.standard_normal((64, 64)), 0, 1)
        x = base.astype(np.float32)[:, :, None]
        assert similarity.ssim_global(x, 1.0 - x) < 0.0

    def test_full_mask_reduces_to_global(self, phantoms_small):
        a, b = phantoms_small[0].image, phantoms_small[1].image
        mask = np.ones(a.shape[:2], dtype=bool)
        assert similarity.ssim_roi(a, b, mask) == pytest.approx(
            similarity.ssim_global(a, b), abs=1e-12
        )

    def test_background_degradation_spares_roi(self, rng):
        clean = np.full((48, 48), 0.5, dtype=np.float32)
        noisy = clean + (0.2 * rng.standard_normal((48, 48))).astype(np.float32)
        mask = np.zeros((48, 48), dtype=bool)
        mask[:, :24] = True  # left half untouched
        candidate = np.where(mask, clean, np.clip(noisy, 0, 1)).astype(np.float32)
        a = clean[:, :, None]
        b = candidate[:, :, None]
        inner = mask.copy()
        inner[:, 24 - 11 : 24] = False  # stay clear of the window bleed
        assert similarity.ssim_map(clean.astype(np.float64),
                                   candidate.astype(np.float64))[inner].mean() > 0.999
        assert similarity.ssim_global(a, b) < 0.9

    def test_roi_self_one_any_mask(self, phantoms_small):
        x = phantoms_small[0].image
        mask = imaging.roi_mask(x)
        assert similarity.ssim_roi(x, x, mask) == 1.0

    def test_empty_mask_rejected(self, phantoms_small):
        x = phantoms_small[0].image
        with pytest.raises(ContractError):
            similarity.ssim_roi(x, x, np.zeros(x.shape[:2], dtype=bool))


def grid_alpha_oracle(clean, shifted, tau, mask, n=1001):
    """Independent projection oracle: scan a dense alpha grid with
    from-scratch SSIM and return the largest prefix-feasible alpha."""
    alphas = np.linspace(0.0, 1.0, n)
    feasible = []
    for a in alphas:
        mixed = ((1 - a) * clean + a * shifted).astype(np.float32)
        sg = similarity.ssim_global(clean, mixed)
        sr = similarity.ssim_roi(clean, mixed, mask)
        feasible.append(sg >= tau and sr >= tau)
    best = 0.0
    for a, ok in zip(alphas, feasible):
        if not ok:
            break
        best = a
    prefix_monotone = True
    seen_false = False
    for ok in feasible:
        if not ok:
            seen_false = True
        elif seen_false:
            prefix_monotone = False
            break
    return best, prefix_monotone


class TestAlphaProject:
    def test_noop_shift(self, phantoms_small):
        x = phantoms_small[0].image
        mask = imaging.roi_mask(x)
        adv, verdict = similarity.alpha_project(x, x, 0.9, mask)
        assert verdict.alpha_star == 1.0
        assert verdict.feasible_at_one
        assert verdict.ssim_global == 1.0 and verdict.ssim_roi == 1.0
        assert np.array_equal(adv, x)

    def test_feasibility_soundness(self, phantoms_small, rng):
        for p, tau in [(phantoms_small[0], 0.9), (phantoms_small[1], 0.8)]:
            x = p.image
            mask = imaging.roi_mask(x)
            theta = stages.ThetaR(window_offset=float(rng.uniform(-0.25, 0.25)),
                                  width_scale=float(rng.uniform(0.5, 1.5)),
                                  bit_depth=4)
            shifted = stages.stage_r(x, theta)
            adv, verdict = similarity.alpha_project(x, shifted, tau, mask)
            assert similarity.ssim_global(x, adv) >= tau - 1e-9
            assert similarity.ssim_roi(x, adv, mask) >= tau - 1e-9
            assert 0.0 <= verdict.alpha_star <= 1.0

    def test_alpha_zero_is_exact_identity(self, phantoms_small):
        x = phantoms_small[0].image
        mask = imaging.roi_mask(x)
        projector = similarity.AlphaProjector(x, mask, 0.999999)
        # An extreme candidate that cannot be feasible even barely mixed.
        shifted = (1.0 - x).astype(np.float32)
        adv, verdict = projector.project(shifted)
        if verdict.alpha_star == 0.0:
            assert verdict.ssim_global == 1.0
            assert np.array_equal(adv, x)

    def test_grid_oracle_agreement(self, phantoms_small):
        rng = np.random.default_rng(31337)
        checked = 0
        for p in phantoms_small[:4]:
            x = p.image
            mask = imaging.roi_mask(x)
            theta = stages.ThetaR(window_offset=float(rng.uniform(-0.25, 0.25)),
                                  width_scale=float(rng.uniform(0.5, 1.5)),
                                  gamma=float(rng.uniform(0.5, 2.0)),
                                  bit_depth=int(rng.integers(3, 9)))
            shifted = stages.stage_r(x, theta)
            for tau in (0.9, 0.8):
                adv, verdict = similarity.alpha_project(x, shifted, tau, mask)
                best, prefix_ok = grid_alpha_oracle(x, shifted, tau, mask, n=201)
                if verdict.feasible_at_one:
                    assert best == 1.0
                elif prefix_ok:
                    # Grid spacing is 1/200 here; allow one step plus tol.
                    assert abs(verdict.alpha_star - best) <= 1 / 200 + 2e-3
                checked += 1
        assert checked == 8

    def test_tau_validation(self, phantoms_small):
        x = phantoms_small[0].image
        with pytest.raises(ContractError):
            similarity.AlphaProjector(x, imaging.roi_mask(x), 0.0)
