"""Windowed structural similarity and the feasibility projection.

SSIM uses the reference configuration: 11x11 Gaussian window with sigma 1.5,
K1=0.01/K2=0.03 at unit dynamic range, local statistics via symmetric-padded
separable convolution, computed on the luminance proxy.

``alpha_project`` finds the strongest feasible blend of a clean image and a
shifted candidate. For speed it exploits that the blend is linear in alpha:
the windowed moments of ``(1-a)*x + a*s`` are exact polynomials in ``a`` of
the moments of ``x`` and ``s``, so a bisection step costs pointwise algebra
instead of fresh convolutions. The final alpha is always re-verified from
scratch on the returned image, so feasibility never rests on that algebra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .imaging import ensure_image, grayscale_proxy

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
C1 = K1 * K1
C2 = K2 * K2

ALPHA_TOL = 1e-3
ALPHA_MAX_ITERS = 20


def _gaussian_kernel1d(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return k / k.sum()


_KERNEL_1D = _gaussian_kernel1d()


def _smooth(plane: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(plane, _KERNEL_1D, axis=0, mode="reflect")
    return ndimage.correlate1d(out, _KERNEL_1D, axis=1, mode="reflect")


def _check_planes(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("similarity operates on 2-D grayscale planes")
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < WINDOW_SIZE:
        raise ContractError(f"planes must be at least {WINDOW_SIZE}x{WINDOW_SIZE}")
    return a, b


def _ssim_from_moments(mu_a, mu_b, var_a, var_b, cov_ab) -> np.ndarray:
    num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov_ab + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM between two grayscale planes (same-size output)."""
    a, b = _check_planes(a, b)
    mu_a = _smooth(a)
    mu_b = _smooth(b)
    var_a = _smooth(a * a) - mu_a * mu_a
    var_b = _smooth(b * b) - mu_b * mu_b
    cov = _smooth(a * b) - mu_a * mu_b
    return _ssim_from_moments(mu_a, mu_b, var_a, var_b, cov)


def ssim_global(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM-map value over the luminance proxies of two images."""
    ga = grayscale_proxy(ensure_image(a, name="first image"))
    gb = grayscale_proxy(ensure_image(b, name="second image"))
    return float(ssim_map(ga, gb).mean())


def ssim_roi(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean SSIM-map value restricted to mask-1 pixels."""
    ga = grayscale_proxy(ensure_image(a, name="first image"))
    gb = grayscale_proxy(ensure_image(b, name="second image"))
    m = np.asarray(mask, dtype=bool)
    if m.shape != ga.shape:
        raise ContractError(f"mask shape {m.shape} does not match image {ga.shape}")
    if not m.any():
        raise ContractError("empty ROI mask")
    return float(ssim_map(ga, gb)[m].mean())


@dataclass(frozen=True)
class PlausibilityVerdict:
    """Outcome of projecting one shifted candidate onto the feasible set."""

    ssim_global: float
    ssim_roi: float
    alpha_star: float
    feasible_at_one: bool


class AlphaProjector:
    """Feasibility projector bound to one clean image, mask and threshold.

    Precomputes the clean-side windowed moments once; ``project`` then costs
    three convolutions per candidate plus cheap per-alpha algebra. Build one
    per sample when evaluating many candidates.
    """

    def __init__(self, clean: np.ndarray, mask: np.ndarray, tau: float):
        if not (0.0 < tau <= 1.0):
            raise ContractError(f"tau must be in (0, 1], got {tau}")
        self.clean = ensure_image(clean, name="clean image")
        self.tau = float(tau)
        self.mask = np.asarray(mask, dtype=bool)
        ga = grayscale_proxy(self.clean).astype(np.float64)
        if self.mask.shape != ga.shape:
            raise ContractError("mask shape does not match the clean image")
        if not self.mask.any():
            raise ContractError("empty ROI mask")
        self._ga = ga
        self._mu_a = _smooth(ga)
        self._a2 = _smooth(ga * ga)
        self._var_a = self._a2 - self._mu_a * self._mu_a
        # Single-precision copies drive the bisection; the chosen alpha is
        # always re-verified against the double-precision path above.
        self._ga32 = ga.astype(np.float32)
        self._mu_a32 = self._mu_a.astype(np.float32)
        self._a2_32 = self._a2.astype(np.float32)
        self._var_a32 = self._var_a.astype(np.float32)

    def _scores(self, gb: np.ndarray) -> tuple[float, float]:
        mu_b = _smooth(gb)
        var_b = _smooth(gb * gb) - mu_b * mu_b
        cov = _smooth(self._ga * gb) - self._mu_a * mu_b
        smap = _ssim_from_moments(self._mu_a, mu_b, self._var_a, var_b, cov)
        return float(smap.mean()), float(smap[self.mask].mean())

    def scores(self, candidate: np.ndarray) -> tuple[float, float]:
        """(global, roi) SSIM of an arbitrary candidate against the clean image."""
        gb = grayscale_proxy(ensure_image(candidate, name="candidate")).astype(np.float64)
        if gb.shape != self._ga.shape:
            raise ContractError("candidate shape does not match the clean image")
        return self._scores(gb)

    def _feasible(self, scores: tuple[float, float]) -> bool:
        return scores[0] >= self.tau and scores[1] >= self.tau

    def project(self, shifted: np.ndarray) -> tuple[np.ndarray, PlausibilityVerdict]:
        """Largest verified-feasible blend of clean and shifted candidate."""
        cand = ensure_image(shifted, name="shifted candidate")
        if cand.shape != self.clean.shape:
            raise ContractError("shifted candidate shape does not match the clean image")
        gs = grayscale_proxy(cand).astype(np.float32)

        # Moments of the shifted side; blends reuse these without new convs.
        mu_s = _smooth(gs)
        s2 = _smooth(gs * gs)
        cross = _smooth(self._ga32 * gs)

        def blend_scores(alpha: float) -> tuple[float, float]:
            w = np.float32(1.0 - alpha)
            a = np.float32(alpha)
            mu_b = w * self._mu_a32 + a * mu_s
            e_b2 = w * w * self._a2_32 + np.float32(2.0) * w * a * cross + a * a * s2
            e_ab = w * self._a2_32 + a * cross
            var_b = e_b2 - mu_b * mu_b
            cov = e_ab - self._mu_a32 * mu_b
            smap = _ssim_from_moments(self._mu_a32, mu_b, self._var_a32, var_b, cov)
            return float(smap.mean()), float(smap[self.mask].mean())

        if self._feasible(blend_scores(1.0)):
            verified = self._scores(grayscale_proxy(cand).astype(np.float64))
            if self._feasible(verified):
                return cand.copy(), PlausibilityVerdict(verified[0], verified[1], 1.0, True)
            # Single/double precision disagree exactly at the boundary; fall
            # through and let the bisection settle it.

        lo, hi = 0.0, 1.0
        for _ in range(ALPHA_MAX_ITERS):
            if hi - lo < ALPHA_TOL:
                break
            mid = (lo + hi) / 2.0
            if self._feasible(blend_scores(mid)):
                lo = mid
            else:
                hi = mid

        # Re-verify the winning alpha from scratch on the image actually
        # returned; walk down if float noise put it on the wrong side.
        alpha = lo
        while alpha > 0.0:
            mixed = ((1.0 - alpha) * self.clean + alpha * cand).astype(np.float32)
            verified = self._scores(grayscale_proxy(mixed).astype(np.float64))
            if self._feasible(verified):
                return mixed, PlausibilityVerdict(verified[0], verified[1], alpha, False)
            alpha = max(0.0, alpha - ALPHA_TOL)
        # Alpha zero: the clean image itself, SSIM exactly 1.
        return self.clean.copy(), PlausibilityVerdict(1.0, 1.0, 0.0, False)


def alpha_project(
    clean: np.ndarray, shifted: np.ndarray, tau: float, mask: np.ndarray
) -> tuple[np.ndarray, PlausibilityVerdict]:
    """One-shot projection; see AlphaProjector for the amortized form."""
    return AlphaProjector(clean, mask, tau).project(shifted)
