"""Zero-shot scoring: embeddings, class prototypes, margins, and the
deterministic in-process scorer plus the phantom dataset generator used for
desk-scale verification.

The binary task convention everywhere: label 1 means "lesion present", the
margin is score(class 1) - score(class 0), and the signed correctness is the
margin times +1 for label 1 and -1 for label 0, so a negative value means the
prediction flipped. Ties (margin exactly 0) resolve to class 0.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ContractError
from .imaging import clip01, ensure_image, grayscale_proxy
from .seeding import derive_seed, rng_for

PHANTOM_SIDE = 128
MODALITY_TAGS = ("mri-like", "xray-like", "ct-like")

FEATURE_DIM = 16  # mean, std, 8 histogram bins, 4 quadrant means, 2 Laplacian bands


def normalize_embedding(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ContractError("cannot normalize a zero vector")
    return v / norm


@dataclass(frozen=True)
class ClassPrototypes:
    """Per-class prototype vectors.

    ``t0``/``t1`` are the raw means of unit embeddings and drive all margin
    computations; ``t0_unit``/``t1_unit`` are renormalized copies kept for
    diagnostics only.
    """

    t0: np.ndarray
    t1: np.ndarray
    t0_unit: np.ndarray = field(repr=False, default=None)
    t1_unit: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.t0.shape != self.t1.shape:
            raise ContractError("prototype dimensions differ")
        if self.t0_unit is None:
            object.__setattr__(self, "t0_unit", normalize_embedding(self.t0))
        if self.t1_unit is None:
            object.__setattr__(self, "t1_unit", normalize_embedding(self.t1))


def build_prototypes(
    class0_embeds: list[np.ndarray], class1_embeds: list[np.ndarray]
) -> ClassPrototypes:
    """Average unit embeddings per class into raw-mean prototypes."""
    protos = []
    for name, embeds in (("class 0", class0_embeds), ("class 1", class1_embeds)):
        if len(embeds) == 0:
            raise ContractError(f"{name} has no embeddings")
        stack = np.stack([np.asarray(e, dtype=np.float64) for e in embeds])
        if stack.ndim != 2:
            raise ContractError(f"{name} embeddings must be 1-D vectors")
        mean = stack.mean(axis=0)
        if float(np.linalg.norm(mean)) == 0.0:
            raise ContractError(f"{name} prompt set cancels to a zero prototype")
        protos.append(mean)
    if protos[0].shape != protos[1].shape:
        raise ContractError("class embedding dimensions differ")
    return ClassPrototypes(t0=protos[0], t1=protos[1])


def margin(z: np.ndarray, protos: ClassPrototypes) -> float:
    """Cosine-score margin s1 - s0 against the raw-mean prototypes."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != protos.t0.shape:
        raise ContractError("embedding dimension does not match prototypes")
    return float(z @ (protos.t1 - protos.t0))


def signed_correctness(m: float, y: int) -> float:
    """Margin signed by the label: negative means the prediction flipped."""
    return float(m) if y == 1 else -float(m)


def predict(m: float) -> int:
    """Decision rule for the margin; exact ties resolve to class 0."""
    if m == 0.0:
        logging.getLogger(__name__).info("margin tie at 0; predicting class 0")
    return 1 if m > 0.0 else 0


class ScorerHandle(Protocol):
    """Black-box scorer surface the search layer relies on."""

    name: str
    dim: int

    def embed_image(self, img: np.ndarray) -> np.ndarray: ...

    def prototypes(self) -> ClassPrototypes: ...


# --- phantom dataset ---------------------------------------------------------


@dataclass(frozen=True)
class PhantomSample:
    image: np.ndarray
    label: int
    seed: int
    modality_tag: str


def _smooth_field(rng: np.random.Generator, side: int) -> np.ndarray:
    """Low-frequency field: a 4x4 normal grid bilinearly upsampled."""
    from .stages import bilinear_resize

    coarse = rng.standard_normal((4, 4)).astype(np.float32)
    return bilinear_resize(coarse[:, :, None], side, side)[:, :, 0]


def _modality_structure(tag: str, side: int) -> tuple[float, float, np.ndarray]:
    """(base level, field amplitude, fixed structural term) per modality."""
    v = np.linspace(-1.0, 1.0, side, dtype=np.float32)[:, None]
    u = np.linspace(-1.0, 1.0, side, dtype=np.float32)[None, :]
    r2 = u * u + v * v
    if tag == "mri-like":
        return 0.38, 0.05, 0.12 * np.maximum(0.0, 1.0 - r2)
    if tag == "xray-like":
        return 0.42, 0.05, 0.06 * v * np.ones_like(u)
    if tag == "ct-like":
        return 0.36, 0.05, np.where(r2 <= 0.85, 0.12, 0.0).astype(np.float32)
    raise ContractError(f"unknown modality tag {tag!r}")


def gen_phantoms(n: int, seed: int, modality_tag: str = "mri-like") -> list[PhantomSample]:
    """Balanced synthetic dataset of lesion/no-lesion phantom images.

    Samples come in matched pairs: index 2k is the lesion-free twin and
    index 2k+1 adds a Gaussian lesion blob to the identical background and
    noise, so the pair difference localizes the lesion exactly.
    """
    if n % 2 != 0:
        raise ContractError("phantom count must be even for class balance")
    side = PHANTOM_SIDE
    base, amp, structure = _modality_structure(modality_tag, side)
    samples: list[PhantomSample] = []
    for k in range(n // 2):
        pair_seed = derive_seed(seed, "phantom-pair", k)
        rng = np.random.default_rng(pair_seed)
        background = base + amp * _smooth_field(rng, side) + structure
        noise = rng.normal(0.0, 0.01, size=(side, side)).astype(np.float32)
        contrast = float(rng.uniform(0.25, 0.55))  # >= 0.15 floor guaranteed
        radius = float(rng.uniform(6.0, 14.0))
        cy, cx = rng.uniform(24.0, side - 24.0, size=2)
        yy = np.arange(side, dtype=np.float32)[:, None]
        xx = np.arange(side, dtype=np.float32)[None, :]
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        lesion = contrast * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))

        negative = clip01(background + noise)[:, :, None]
        positive = clip01(background + lesion + noise)[:, :, None]
        samples.append(PhantomSample(negative, 0, pair_seed, modality_tag))
        samples.append(PhantomSample(positive, 1, pair_seed, modality_tag))
    return samples


# --- deterministic in-process scorer -----------------------------------------


def _block_mean(g: np.ndarray, factor: int) -> np.ndarray:
    h = (g.shape[0] // factor) * factor
    w = (g.shape[1] // factor) * factor
    return g[:h, :w].reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _laplacian_energy(g: np.ndarray, factor: int) -> float:
    """Mean |3x3 Laplacian| on a block-mean-downsampled plane."""
    d = _block_mean(g, factor)
    p = np.pad(d, 1, mode="symmetric")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * d
    return float(np.abs(lap).mean())


# Frozen featurizer calibration: per-statistic location/spread constants
# measured once on a 400-phantom calibration draw and fixed forever. The
# standardized statistics keep the downstream linear map scale-balanced.
FEATURE_CENTER = np.array([
    0.429291, 0.057211, 0.0, 0.000193, 0.182642, 0.714945, 0.098249, 0.002902,
    0.000992, 0.000078, 0.430513, 0.428706, 0.42743, 0.430516, 0.010788, 0.016662,
])
FEATURE_SPREAD = np.array([
    0.012154, 0.008382, 0.0005, 0.000951, 0.069781, 0.081036, 0.05728, 0.003486,
    0.001625, 0.0005, 0.022137, 0.022371, 0.021362, 0.023241, 0.001121, 0.003632,
])


def image_features(img: np.ndarray) -> np.ndarray:
    """16-vector of standardized global image statistics.

    Raw layout: [mean, std, 8-bin histogram fractions, 4 quadrant means,
    Laplacian energies at downsample factors 4 and 8], each statistic shifted
    and scaled by the frozen calibration constants above. The image is cast
    to float32 first so in-process and wire-transported inputs featurize
    identically.
    """
    g = grayscale_proxy(ensure_image(img)).astype(np.float32).astype(np.float64)
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


class SyntheticScorer:
    """Deterministic stand-in model: global statistics through a fixed seeded
    linear map, with prototypes averaged from seeded phantom embeddings.

    Deliberately attackable: the histogram and contrast features respond
    directly to display-remapping and delivery degradations.
    """

    def __init__(self, seed: int, dim: int = 64, modality_tag: str = "mri-like"):
        if dim < 8:
            raise ContractError("scorer dim must be >= 8")
        self.name = f"synthetic-{seed}-{dim}"
        self.dim = int(dim)
        self.seed = int(seed)
        self.modality_tag = modality_tag
        rng = rng_for(seed, "projection")
        self._map = rng.standard_normal((self.dim, FEATURE_DIM)) / np.sqrt(FEATURE_DIM)
        self._protos: ClassPrototypes | None = None

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        return normalize_embedding(self._map @ image_features(img))

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        """Deterministic text embeddings (hash-seeded); enough to exercise the
        prompt path of the wire protocol."""
        out = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            text_seed = int.from_bytes(digest[:8], "little")
            rng = rng_for(self.seed, "text", text_seed)
            out.append(normalize_embedding(rng.standard_normal(self.dim)))
        return out

    def prototypes(self) -> ClassPrototypes:
        """Raw-mean prototypes from 16 positive and 16 negative seeded phantoms."""
        if self._protos is None:
            self._protos = prototype_bank(self, self.seed, self.modality_tag)
        return self._protos


def prototype_bank(scorer, seed: int, modality_tag: str = "mri-like") -> ClassPrototypes:
    """Build class prototypes by embedding 16 seeded phantoms per class.

    Works for any embed_image-capable scorer, including wire-protocol
    clients, so both sides of a protocol equivalence check construct their
    prototypes identically.
    """
    bank = gen_phantoms(32, derive_seed(seed, "prototype-bank"), modality_tag)
    class0 = [scorer.embed_image(s.image) for s in bank if s.label == 0]
    class1 = [scorer.embed_image(s.image) for s in bank if s.label == 1]
    return build_prototypes(class0, class1)


def score_sample(scorer, img: np.ndarray, y: int, protos: ClassPrototypes | None = None) -> float:
    """Signed correctness of one image under a scorer."""
    protos = protos if protos is not None else scorer.prototypes()
    return signed_correctness(margin(scorer.embed_image(img), protos), y)
