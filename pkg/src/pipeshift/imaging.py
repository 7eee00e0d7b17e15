"""Canonical image representation and shared raster utilities.

Conventions used everywhere in the package:

* an image is a ``float32`` array of shape ``(H, W, C)`` with ``C`` 1 or 3 and
  values in ``[0, 1]``; ``H, W >= 8`` (the similarity window needs room),
* a grayscale plane is ``(H, W)`` float,
* an ROI mask is ``(H, W)`` bool.

All public operations here are pure functions over immutable inputs and are
safe to call from any number of workers.
"""

from __future__ import annotations

import os

import cv2
import numpy as np

from .errors import ContractError, DataIntegrityError

MIN_SIDE = 8

# Fixed luminance weights for the grayscale proxy (broadcast-video convention).
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# ROI extraction falls back to the all-ones mask outside this foreground band.
ROI_MIN_FRACTION = 0.01
ROI_MAX_FRACTION = 0.99


def ensure_image(img: np.ndarray, *, name: str = "image") -> np.ndarray:
    """Validate shape, finiteness and range; return the array as float32.

    Raises ContractError for structural problems and DataIntegrityError for
    non-finite or out-of-range values.
    """
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ContractError(f"{name} must have shape (H, W, 1|3), got {arr.shape}")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise ContractError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataIntegrityError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataIntegrityError(f"{name} has values outside [0, 1]")
    return arr.astype(np.float32, copy=False)


def clip01(img: np.ndarray) -> np.ndarray:
    """Clamp values to [0, 1]. Non-finite input is rejected, never silently clipped."""
    arr = np.asarray(img, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise DataIntegrityError("clip01 received non-finite values")
    return np.clip(arr, 0.0, 1.0)


def grayscale_proxy(img: np.ndarray) -> np.ndarray:
    """Luminance plane of an image; a copy for 1-channel input."""
    arr = ensure_image(img)
    if arr.shape[2] == 1:
        return arr[:, :, 0].copy()
    w = np.asarray(LUMA_WEIGHTS, dtype=arr.dtype)
    return arr @ w


def robust_quantiles(gray: np.ndarray, q_lo: float, q_hi: float) -> tuple[float, float]:
    """Linear-interpolation quantiles of a grayscale plane.

    Equivalent to sorting and interpolating between ranks (the numpy
    "linear" method) but computed with a partial partition, since this sits
    on the per-trial hot path. A constant plane yields lo == hi; callers
    guard the zero-width window with their own epsilon.
    """
    if not (0.0 <= q_lo < q_hi <= 1.0):
        raise ContractError(f"need 0 <= q_lo < q_hi <= 1, got ({q_lo}, {q_hi})")
    g = np.asarray(gray, dtype=np.float64).ravel()
    n = g.size

    def rank(q: float) -> tuple[int, int, float]:
        h = q * (n - 1)
        i0 = int(np.floor(h))
        return i0, min(i0 + 1, n - 1), h - i0

    i0a, i1a, fa = rank(q_lo)
    i0b, i1b, fb = rank(q_hi)
    part = np.partition(g, sorted({i0a, i1a, i0b, i1b}))
    lo = part[i0a] * (1.0 - fa) + part[i1a] * fa
    hi = part[i0b] * (1.0 - fb) + part[i1b] * fb
    return float(lo), float(hi)


def otsu_threshold(gray: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold over a fixed-bin histogram of a [0, 1] plane.

    Returns the upper edge of the selected bin; foreground is "strictly
    above". Ties in the between-class variance pick the lowest bin.
    """
    g = np.asarray(gray, dtype=np.float64).ravel()
    counts, edges = np.histogram(g, bins=bins, range=(0.0, 1.0))
    total = counts.sum()
    if total == 0:
        raise ContractError("empty image")
    p = counts / total
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(bins)
    between[valid] = (mu_total * w0[valid] - mu[valid]) ** 2 / (w0[valid] * w1[valid])
    k = int(np.argmax(between))  # first maximum wins
    return float(edges[k + 1])


def roi_mask(img: np.ndarray) -> np.ndarray:
    """Threshold-based foreground mask derived from the luminance proxy.

    Otsu on a 256-bin histogram; pixels strictly above the threshold are
    foreground. Degenerate splits (< 1% or > 99% foreground) fall back to the
    all-ones mask so downstream masked averages never see an empty mask.
    """
    gray = grayscale_proxy(img)
    t = otsu_threshold(gray)
    mask = gray > t
    frac = foreground_fraction(mask)
    if frac < ROI_MIN_FRACTION or frac > ROI_MAX_FRACTION:
        return np.ones_like(mask, dtype=bool)
    return mask


def foreground_fraction(mask: np.ndarray) -> float:
    return float(np.asarray(mask, dtype=bool).mean())


# --- PNG ingestion/export ---------------------------------------------------
#
# The only codecs this module knows: 8- and 16-bit PNG read, 16-bit PNG write.
# cv2 handles both gray and 3-channel 16-bit; channel order is converted so
# the in-memory layout is always RGB.


def decode_png(data: bytes) -> np.ndarray:
    raw = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataIntegrityError("could not decode PNG data")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataIntegrityError(f"unsupported PNG sample type {raw.dtype}")
    if raw.ndim == 2:
        arr = raw.astype(np.float32)[:, :, None] / scale
    elif raw.ndim == 3 and raw.shape[2] == 3:
        arr = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / scale
    else:
        raise DataIntegrityError(f"unsupported PNG channel layout {raw.shape}")
    return ensure_image(arr, name="decoded PNG")


def encode_png16(img: np.ndarray) -> bytes:
    """Encode an image as 16-bit PNG and return the bytes (stable for hashing)."""
    arr = ensure_image(img)
    u16 = np.rint(arr.astype(np.float64) * 65535.0).astype(np.uint16)
    if u16.shape[2] == 1:
        payload = u16[:, :, 0]
    else:
        payload = cv2.cvtColor(u16, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", payload)
    if not ok:
        raise DataIntegrityError("PNG encoding failed")
    return buf.tobytes()


def read_png(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_png(fh.read())


def write_png16(path: str | os.PathLike, img: np.ndarray) -> bytes:
    """Write a 16-bit PNG; returns the encoded bytes so callers can hash them."""
    data = encode_png16(img)
    with open(path, "wb") as fh:
        fh.write(data)
    return data
