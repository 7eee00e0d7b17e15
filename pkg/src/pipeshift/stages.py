"""The three parameterized shift stages and their seven composition families.

Stage order is always acquisition shading (A), then display remapping (R),
then delivery degradation (D), regardless of which subset a family names.
Every stage maps [0, 1] images to [0, 1] images of the same shape and is
deterministic for fixed inputs within one platform/codec build.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, StageError
from .imaging import clip01, ensure_image, grayscale_proxy, robust_quantiles

# Canonical family order; also the tie-break order for winner selection.
FAMILIES = ("A", "R", "D", "AR", "RD", "AD", "ARD")

# Default admissible parameter boxes. These are configuration: campaigns may
# restrict them, but sampled values must stay inside these outer bounds.
GAIN_RANGE = (-0.4, 0.4)
CENTER_RANGE = (-0.35, 0.35)
ROTATION_RANGE = (-np.pi, np.pi)
ANISOTROPY_RANGE = (0.5, 2.0)
FALLOFF_RANGE = (1.0, 3.0)

WINDOW_OFFSET_RANGE = (-0.25, 0.25)
WIDTH_SCALE_RANGE = (0.5, 1.5)
Y25_RANGE = (0.05, 0.45)
Y50_RANGE = (0.25, 0.75)
Y75_RANGE = (0.55, 0.95)
GAMMA_RANGE = (0.5, 2.0)
BIT_DEPTH_RANGE = (3, 8)

RESIZE_RANGE = (0.3, 1.0)
QUALITY_RANGE = (10, 95)

WINDOW_QUANTILES = (0.01, 0.99)
WINDOW_EPS = 1e-6
GAIN_FLOOR = 0.05


def _check_range(name: str, value: float, box: tuple[float, float]) -> None:
    if not (box[0] <= value <= box[1]):
        raise ContractError(f"{name}={value} outside [{box[0]}, {box[1]}]")


@dataclass(frozen=True)
class ThetaA:
    """Acquisition shading: gain strength plus the gain-field geometry."""

    gain_strength: float
    center_x: float = 0.0
    center_y: float = 0.0
    rotation: float = 0.0
    anisotropy: float = 1.0
    falloff: float = 2.0

    def __post_init__(self):
        _check_range("gain_strength", self.gain_strength, GAIN_RANGE)
        _check_range("center_x", self.center_x, CENTER_RANGE)
        _check_range("center_y", self.center_y, CENTER_RANGE)
        _check_range("rotation", self.rotation, ROTATION_RANGE)
        _check_range("anisotropy", self.anisotropy, ANISOTROPY_RANGE)
        _check_range("falloff", self.falloff, FALLOFF_RANGE)


@dataclass(frozen=True)
class ThetaR:
    """Display remapping: window offset/scale, tone points, gamma, bit depth.

    Tone points may be non-monotone as sampled; ``stage_r`` enforces
    monotonicity before building the curve.
    """

    window_offset: float = 0.0
    width_scale: float = 1.0
    y25: float = 0.25
    y50: float = 0.5
    y75: float = 0.75
    gamma: float = 1.0
    bit_depth: int = 8

    def __post_init__(self):
        _check_range("window_offset", self.window_offset, WINDOW_OFFSET_RANGE)
        _check_range("width_scale", self.width_scale, WIDTH_SCALE_RANGE)
        _check_range("y25", self.y25, Y25_RANGE)
        _check_range("y50", self.y50, Y50_RANGE)
        _check_range("y75", self.y75, Y75_RANGE)
        _check_range("gamma", self.gamma, GAMMA_RANGE)
        if not (BIT_DEPTH_RANGE[0] <= int(self.bit_depth) <= BIT_DEPTH_RANGE[1]):
            raise ContractError(f"bit_depth={self.bit_depth} outside {BIT_DEPTH_RANGE}")


@dataclass(frozen=True)
class ThetaD:
    """Delivery degradation: resize round-trip factor and JPEG quality."""

    resize_factor: float = 1.0
    jpeg_quality: int = 90

    def __post_init__(self):
        _check_range("resize_factor", self.resize_factor, RESIZE_RANGE)
        if not (QUALITY_RANGE[0] <= int(self.jpeg_quality) <= QUALITY_RANGE[1]):
            raise ContractError(f"jpeg_quality={self.jpeg_quality} outside {QUALITY_RANGE}")


@dataclass(frozen=True)
class FamilySpec:
    """A composition family plus exactly the stage bundles it names."""

    family: str
    a: ThetaA | None = None
    r: ThetaR | None = None
    d: ThetaD | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown family {self.family!r}")
        for letter, bundle in (("A", self.a), ("R", self.r), ("D", self.d)):
            if (letter in self.family) != (bundle is not None):
                raise ContractError(
                    f"family {self.family} requires exactly the stages it names; "
                    f"stage {letter} is {'missing' if bundle is None else 'extra'}"
                )


def shading_field(theta: ThetaA, height: int, width: int) -> np.ndarray:
    """Smooth multiplicative gain field on an inclusive [-1, 1]^2 grid.

    Normalized coordinates run from -1 at the first pixel to +1 at the last,
    so corners sit exactly at unit elliptical radius when the field is
    centered and isotropic. The field value is
    ``max(0.05, 1 + g * (1 - r^k))`` with ``r`` clamped to 1.
    """
    if height < 2 or width < 2:
        raise ContractError("shading field needs at least a 2x2 grid")
    v = np.linspace(-1.0, 1.0, height, dtype=np.float64)[:, None]
    u = np.linspace(-1.0, 1.0, width, dtype=np.float64)[None, :]
    du = u - theta.center_x
    dv = v - theta.center_y
    c, s = np.cos(theta.rotation), np.sin(theta.rotation)
    dur = c * du + s * dv
    dvr = -s * du + c * dv
    dur = dur * theta.anisotropy
    dvr = dvr / theta.anisotropy
    r = np.minimum(1.0, np.hypot(dur, dvr) / np.sqrt(2.0))
    field = 1.0 + theta.gain_strength * (1.0 - r**theta.falloff)
    return np.maximum(GAIN_FLOOR, field)


def stage_a(img: np.ndarray, theta: ThetaA) -> np.ndarray:
    """Multiply by the shading field (broadcast over channels), then clamp."""
    arr = ensure_image(img)
    if theta.gain_strength == 0.0:
        return arr.copy()
    field = shading_field(theta, arr.shape[0], arr.shape[1]).astype(np.float32)
    return clip01(arr * field[:, :, None])


def enforce_monotone(y25: float, y50: float, y75: float) -> tuple[float, float, float]:
    """Running maximum over the tone points, clamped to [0, 1]."""
    a = min(max(y25, 0.0), 1.0)
    b = min(max(max(y50, a), 0.0), 1.0)
    c = min(max(max(y75, b), 0.0), 1.0)
    return a, b, c


def tone_curve(t: np.ndarray | float, points: tuple[float, float, float]) -> np.ndarray | float:
    """Piecewise-linear curve through (0,0), (.25,y25), (.5,y50), (.75,y75), (1,1).

    Control points must already be monotone; the curve is then monotone
    non-decreasing with pinned endpoints.
    """
    y25, y50, y75 = points
    if not (0.0 <= y25 <= y50 <= y75 <= 1.0):
        raise ContractError("tone points must be monotone in [0, 1]")
    xs = (0.0, 0.25, 0.5, 0.75, 1.0)
    ys = (0.0, y25, y50, y75, 1.0)
    return np.interp(t, xs, ys)


def quantize_bits(img: np.ndarray, bits: int) -> np.ndarray:
    """Uniform b-bit quantization: v -> rint(v * (2^b - 1)) / (2^b - 1).

    Rounding is round-half-to-even; idempotent at fixed b.
    """
    if not (1 <= int(bits) <= 16):
        raise ContractError(f"bit depth {bits} outside 1..16")
    levels = float(2 ** int(bits) - 1)
    arr = np.asarray(img)
    return (np.rint(arr * levels) / levels).astype(arr.dtype, copy=False)


def stage_r(img: np.ndarray, theta: ThetaR) -> np.ndarray:
    """Window-level normalize, tone-curve, gamma, then quantize.

    The window is computed from robust quantiles of the luminance proxy of
    the stage input, then shifted by ``window_offset`` and scaled by
    ``width_scale``. A small epsilon keeps the constant-image case finite.
    """
    arr = ensure_image(img).astype(np.float64)
    lo, hi = robust_quantiles(grayscale_proxy(img), *WINDOW_QUANTILES)
    center = (lo + hi) / 2.0 + theta.window_offset
    width = (hi - lo) * theta.width_scale
    t = np.clip((arr - center) / (width + WINDOW_EPS) + 0.5, 0.0, 1.0)
    t = tone_curve(t, enforce_monotone(theta.y25, theta.y50, theta.y75))
    t = t**theta.gamma
    return quantize_bits(t, theta.bit_depth).astype(np.float32)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping."""
    arr = np.asarray(img, dtype=np.float32)
    in_h, in_w = arr.shape[0], arr.shape[1]
    if (out_h, out_w) == (in_h, in_w):
        return arr.copy()

    def axis_coords(n_out: int, n_in: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = np.clip(src - i0, 0.0, 1.0).astype(np.float32)
        return i0, i1, frac

    r0, r1, fr = axis_coords(out_h, in_h)
    c0, c1, fc = axis_coords(out_w, in_w)
    rows = arr[r0] * (1.0 - fr)[:, None, None] + arr[r1] * fr[:, None, None]
    out = rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    return out


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG encode/decode on the 8-bit rendering.

    Grayscale images use a grayscale JPEG; 3-channel images use 4:2:0 chroma
    subsampling. Bit-exactness across codec builds is not promised.
    """
    arr = ensure_image(img)
    u8 = np.rint(arr.astype(np.float64) * 255.0).astype(np.uint8)
    try:
        buf = io.BytesIO()
        if u8.shape[2] == 1:
            Image.fromarray(u8[:, :, 0], mode="L").save(buf, format="JPEG", quality=int(quality))
        else:
            Image.fromarray(u8, mode="RGB").save(
                buf, format="JPEG", quality=int(quality), subsampling="4:2:0"
            )
        decoded = np.asarray(Image.open(io.BytesIO(buf.getvalue())))
    except Exception as exc:  # codec failures discard the trial upstream
        raise StageError(f"JPEG round trip failed: {exc}") from exc
    if decoded.ndim == 2:
        decoded = decoded[:, :, None]
    return decoded.astype(np.float32) / 255.0


def stage_d(img: np.ndarray, theta: ThetaD) -> np.ndarray:
    """Downsample-upsample round trip followed by JPEG compression."""
    arr = ensure_image(img)
    h, w = arr.shape[0], arr.shape[1]
    if theta.resize_factor != 1.0:
        h2 = max(8, int(round(theta.resize_factor * h)))
        w2 = max(8, int(round(theta.resize_factor * w)))
        arr = bilinear_resize(bilinear_resize(arr, h2, w2), h, w)
        arr = clip01(arr)
    return jpeg_roundtrip(arr, theta.jpeg_quality)


def apply_family(img: np.ndarray, spec: FamilySpec) -> np.ndarray:
    """Compose exactly the stages the family names, in A, R, D order."""
    out = ensure_image(img)
    if "A" in spec.family:
        out = stage_a(out, spec.a)
    if "R" in spec.family:
        out = stage_r(out, spec.r)
    if "D" in spec.family:
        out = stage_d(out, spec.d)
    return out
