"""Loopback backend: a self-contained statistics scorer.

Protocol tests and offline campaign rehearsals need a model-free backend
whose outputs are reproducible to the last bit. This module freezes the
full recipe: luminance proxy, sixteen standardized global statistics, a
seeded Gaussian projection, and unit normalization. The calibration
constants and seed-derivation scheme below are part of the wire-level
compatibility contract and must not drift.
"""

from __future__ import annotations

import hashlib

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
FEATURE_DIM = 16

FEATURE_CENTER = np.array([
    0.429291, 0.057211, 0.0, 0.000193, 0.182642, 0.714945, 0.098249, 0.002902,
    0.000992, 0.000078, 0.430513, 0.428706, 0.42743, 0.430516, 0.010788, 0.016662,
])
FEATURE_SPREAD = np.array([
    0.012154, 0.008382, 0.0005, 0.000951, 0.069781, 0.081036, 0.05728, 0.003486,
    0.001625, 0.0005, 0.022137, 0.022371, 0.021362, 0.023241, 0.001121, 0.003632,
])

_MASK64 = (1 << 64) - 1


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master: int, *keys) -> int:
    entropy = [int(master) & _MASK64] + [_key_to_int(k) for k in keys]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _grayscale(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3), got {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise ValueError("image too small")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite pixels")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("pixels outside [0, 1]")
    if arr.shape[2] == 1:
        g = arr[:, :, 0]
    else:
        g = arr @ np.asarray(LUMA_WEIGHTS, dtype=np.float32)
    return g.astype(np.float64)


def _block_mean(g: np.ndarray, factor: int) -> np.ndarray:
    h = (g.shape[0] // factor) * factor
    w = (g.shape[1] // factor) * factor
    return g[:h, :w].reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _laplacian_energy(g: np.ndarray, factor: int) -> float:
    d = _block_mean(g, factor)
    p = np.pad(d, 1, mode="symmetric")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * d
    return float(np.abs(lap).mean())


def image_features(img: np.ndarray) -> np.ndarray:
    g = _grayscale(img)
    h2, w2 = g.shape[0] // 2, g.shape[1] // 2
    hist = np.bincount(np.minimum((g * 8.0).astype(np.int64), 7).ravel(), minlength=8)
    feats = np.empty(FEATURE_DIM, dtype=np.float64)
    feats[0] = g.mean()
    feats[1] = g.std()
    feats[2:10] = hist / g.size
    feats[10] = g[:h2, :w2].mean()
    feats[11] = g[:h2, w2:].mean()
    feats[12] = g[h2:, :w2].mean()
    feats[13] = g[h2:, w2:].mean()
    feats[14] = _laplacian_energy(g, 4)
    feats[15] = _laplacian_energy(g, 8)
    return (feats - FEATURE_CENTER) / FEATURE_SPREAD


class LoopbackBackend:
    """Deterministic statistics scorer behind the wire protocol."""

    preprocessing = {"input": "raw [0,1] floats", "resize": "none", "channels": "1 or 3"}

    def __init__(self, seed: int = 11, dim: int = 64):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        self.seed = int(seed)
        self.dim = int(dim)
        self.name = f"synthetic-{seed}-{dim}"
        rng = np.random.default_rng(derive_seed(seed, "projection"))
        self._map = rng.standard_normal((self.dim, FEATURE_DIM)) / np.sqrt(FEATURE_DIM)

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        v = self._map @ image_features(img)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError("zero embedding")
        return v / norm

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            text_seed = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng(derive_seed(self.seed, "text", text_seed))
            v = rng.standard_normal(self.dim)
            out.append(v / np.linalg.norm(v))
        return out
