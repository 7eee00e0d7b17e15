"""Post-hoc token-space repair: frozen toy encoders, a residual linear
adapter, teacher-guided Gram alignment, and archive-based evaluation.

The adapter ``W`` (d x d, zero-initialized) is the only trainable object.
Tokens are ``(1 + N) x d`` with the CLS row first; the adapter applies to
every token. Training minimizes

    task + lambda_cons * (m(aug1) - m(aug2))^2
         + lambda_dist * ||gram(adapted patches) - gram(teacher patches)||_F^2

on clean images only, with plain gradient descent and a halve-on-increase
learning-rate schedule. Gradients are analytic; a finite-difference oracle
in the tests pins them part by part.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataIntegrityError, TrainingError
from .imaging import ensure_image, grayscale_proxy, read_png
from .scoring import (
    ClassPrototypes,
    build_prototypes,
    gen_phantoms,
    margin,
    normalize_embedding,
    predict,
)
from .seeding import derive_seed, rng_for
from .stages import ThetaD, ThetaR, stage_d, stage_r

PATCH = 16
GRID = 8  # 128/16
N_PATCHES = GRID * GRID
STUDENT_DIM = 32
TEACHER_DIM = 48

ADAPTER_MAGIC = b"CODAW1"


@dataclass(frozen=True)
class RepairConfig:
    lambda_cons: float = 0.1
    lambda_dist: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 500
    temperature: float = 100.0
    teacher_projection_seed: int = 303


def _dct_basis(order: int) -> np.ndarray:
    """Rows of the orthonormal 1-D DCT-II basis up to the given order."""
    i = np.arange(PATCH)
    basis = np.stack([np.cos(np.pi * u * (2 * i + 1) / (2 * PATCH)) for u in range(order)])
    basis[0] /= np.sqrt(2.0)
    return basis * np.sqrt(2.0 / PATCH)


_DCT = _dct_basis(3)

# (u, v) DCT coefficient indices; the first two are the shared lowpass
# terms, the rest are the teacher's extra detail terms.
_DCT_TERMS_STUDENT = ((0, 1), (1, 0))
_DCT_TERMS_TEACHER = ((0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (2, 1))


def _patch_features(gray: np.ndarray, dct_terms) -> np.ndarray:
    """Per-patch statistics: mean, std, 4 oriented gradient energies, DCTs.

    The gradient energies and DCT terms are measured relative to the patch
    contrast (divided by the patch std). That leaves mean and std as plain
    intensity statistics while the shape terms are invariant to affine
    intensity remaps, mirroring how trained encoders carry both brittle
    intensity channels and more robust structural ones.
    """
    if gray.shape != (GRID * PATCH, GRID * PATCH):
        raise ContractError(f"expected a {GRID * PATCH}x{GRID * PATCH} plane, got {gray.shape}")
    p = gray.reshape(GRID, PATCH, GRID, PATCH).transpose(0, 2, 1, 3).reshape(-1, PATCH, PATCH)
    mean = p.mean(axis=(1, 2))
    std = p.std(axis=(1, 2))
    contrast = std + 1e-4
    feats = [mean, std]
    feats.append(np.abs(np.diff(p, axis=2)).mean(axis=(1, 2)) / contrast)  # horizontal
    feats.append(np.abs(np.diff(p, axis=1)).mean(axis=(1, 2)) / contrast)  # vertical
    feats.append(np.abs(p[:, 1:, 1:] - p[:, :-1, :-1]).mean(axis=(1, 2)) / contrast)  # diag 45
    feats.append(np.abs(p[:, 1:, :-1] - p[:, :-1, 1:]).mean(axis=(1, 2)) / contrast)  # diag 135
    coeff = np.einsum("npq,up,vq->nuv", p, _DCT, _DCT)
    for u, v in dct_terms:
        feats.append(coeff[:, u, v] / (PATCH * contrast))
    return np.stack(feats, axis=1)


class TokenEncoder:
    """Frozen patch featurizer with a seeded linear map and a frozen
    per-dimension standardization fitted once on calibration phantoms.

    Two frozen calibrations make the toy encoder behave like a trained one:
    patch statistics are standardized before the linear map (so no single
    raw statistic dominates it), and the post-map standardization (the
    layernorm analogue) is fitted on calibration CLS tokens, which centers
    the scoring geometry the CLS embedding lives in.
    """

    def __init__(self, seed: int, dim: int, dct_terms, name: str,
                 calibration_tag: str = "mri-like"):
        self.seed = int(seed)
        self.dim = int(dim)
        self.name = name
        self._dct_terms = tuple(dct_terms)
        n_feats = 6 + len(self._dct_terms)
        rng = rng_for(seed, name, "map")
        self._map = rng.standard_normal((self.dim, n_feats)) / np.sqrt(n_feats)
        self._calibrate(calibration_tag)

    def _features(self, image: np.ndarray) -> np.ndarray:
        gray = grayscale_proxy(ensure_image(image)).astype(np.float32).astype(np.float64)
        return _patch_features(gray, self._dct_terms)

    def _raw_tokens_from_features(self, feats: np.ndarray) -> np.ndarray:
        patch_tokens = ((feats - self._feat_mu) / self._feat_sd) @ self._map.T
        cls = patch_tokens.mean(axis=0, keepdims=True)
        return np.concatenate([cls, patch_tokens], axis=0)

    def _calibrate(self, tag: str) -> None:
        bank = gen_phantoms(32, derive_seed(self.seed, self.name, "calibration"), tag)
        feats = [self._features(s.image) for s in bank]
        stacked = np.concatenate(feats, axis=0)
        self._feat_mu = stacked.mean(axis=0)
        self._feat_sd = np.maximum(stacked.std(axis=0), 1e-8)
        cls_rows = np.stack([self._raw_tokens_from_features(f)[0] for f in feats])
        self._mu = cls_rows.mean(axis=0)
        self._sd = np.maximum(cls_rows.std(axis=0), 1e-8)

    def tokens(self, image: np.ndarray) -> np.ndarray:
        """(1 + N) x d standardized token sequence; row 0 is CLS."""
        raw = self._raw_tokens_from_features(self._features(image))
        return (raw - self._mu) / self._sd


def student_encoder(seed: int, calibration_tag: str = "mri-like") -> TokenEncoder:
    return TokenEncoder(seed, STUDENT_DIM, _DCT_TERMS_STUDENT, "student", calibration_tag)


def teacher_encoder(seed: int, calibration_tag: str = "mri-like") -> TokenEncoder:
    return TokenEncoder(seed, TEACHER_DIM, _DCT_TERMS_TEACHER, "teacher", calibration_tag)


def adapter_apply(tokens: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Residual token-wise linear adapter: every token t becomes t + W t."""
    if tokens.shape[1] != w.shape[0] or w.shape[0] != w.shape[1]:
        raise ContractError(f"adapter shape {w.shape} does not fit tokens {tokens.shape}")
    return tokens + tokens @ w.T


def gram(patch_tokens: np.ndarray) -> np.ndarray:
    """Normalized Gram matrix: row-normalize to unit length, then P P^T."""
    norms = np.linalg.norm(patch_tokens, axis=1)
    if norms.min() < 1e-12:
        raise ContractError("zero-norm patch token row")
    u = patch_tokens / norms[:, None]
    return u @ u.T


class StudentScorer:
    """Zero-shot scorer surface over the student encoder (optionally adapted).

    The embedding is the unit-normalized CLS token; prototypes are built
    from seeded phantoms exactly like the synthetic scorer's, using the
    UNADAPTED encoder, so the adapter must keep working against the frozen
    prototype bank (the text tower stays fixed in the real setting).
    """

    def __init__(self, encoder: TokenEncoder, seed: int, modality_tag: str = "mri-like",
                 w: np.ndarray | None = None):
        self.encoder = encoder
        self.seed = int(seed)
        self.modality_tag = modality_tag
        self.w = w
        self.name = f"student-{encoder.seed}-{seed}"
        self.dim = encoder.dim
        self._protos: ClassPrototypes | None = None

    def with_adapter(self, w: np.ndarray | None) -> "StudentScorer":
        clone = StudentScorer(self.encoder, self.seed, self.modality_tag, w)
        clone._protos = self._protos
        return clone

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        tokens = self.encoder.tokens(img)
        if self.w is not None:
            tokens = adapter_apply(tokens, self.w)
        return normalize_embedding(tokens[0])

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        # Text prompts have no toy text tower; phantom prototypes stand in.
        raise ContractError("student scorer has no text tower")

    def prototypes(self) -> ClassPrototypes:
        if self._protos is None:
            bank = gen_phantoms(32, derive_seed(self.seed, "prototype-bank"), self.modality_tag)
            base = self.with_adapter(None) if self.w is not None else self
            self._protos = build_prototypes(
                [base.embed_image(s.image) for s in bank if s.label == 0],
                [base.embed_image(s.image) for s in bank if s.label == 1],
            )
        return self._protos


# --- loss and gradient --------------------------------------------------------


def consistency_views(image: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two mild workflow-style augmentations (display remap + delivery)."""
    views = []
    for view in (0, 1):
        rng = rng_for(seed, "view", view)
        theta_r = ThetaR(
            window_offset=float(rng.uniform(-0.05, 0.05)),
            width_scale=float(rng.uniform(0.9, 1.1)),
            gamma=float(rng.uniform(0.9, 1.1)),
            bit_depth=8,
        )
        theta_d = ThetaD(
            resize_factor=float(rng.uniform(0.9, 1.0)),
            jpeg_quality=int(rng.integers(85, 96)),
        )
        views.append(stage_d(stage_r(image, theta_r), theta_d))
    return views[0], views[1]


@dataclass
class SampleState:
    """Frozen per-sample tensors so epochs cost only adapter algebra."""

    label: int
    tokens: np.ndarray          # (1+N, d) clean tokens
    view_tokens: tuple[np.ndarray, np.ndarray]
    teacher_gram: np.ndarray | None


@dataclass
class RepairProblem:
    """Bundles the frozen pieces the loss needs: encoder, prototypes,
    teacher projection, and config."""

    student: TokenEncoder
    protos: ClassPrototypes
    cfg: RepairConfig
    teacher: TokenEncoder | None = None
    _projection: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.teacher is not None and self.teacher.dim != self.student.dim:
            # Fixed teacher-to-student projection, fitted once by least
            # squares on a seeded calibration bank and frozen. A fitted map
            # keeps the Gram gap at W=0 down to the genuine geometry
            # difference between the encoders instead of projection noise.
            bank = gen_phantoms(
                32, derive_seed(self.cfg.teacher_projection_seed, "projection-fit")
            )
            t_rows = np.concatenate([self.teacher.tokens(s.image)[1:] for s in bank])
            s_rows = np.concatenate([self.student.tokens(s.image)[1:] for s in bank])
            solution, *_ = np.linalg.lstsq(t_rows, s_rows, rcond=None)
            self._projection = solution.T  # (student_dim, teacher_dim)

    def teacher_patch_tokens(self, image: np.ndarray) -> np.ndarray | None:
        if self.teacher is None:
            return None
        tokens = self.teacher.tokens(image)[1:]
        if self._projection is not None:
            tokens = tokens @ self._projection.T
        return tokens

    def prepare(self, image: np.ndarray, label: int, aug_seed: int) -> SampleState:
        v1, v2 = consistency_views(image, aug_seed)
        teacher_gram = None
        if self.teacher is not None:
            teacher_gram = gram(self.teacher_patch_tokens(image))
        return SampleState(
            label=int(label),
            tokens=self.student.tokens(image),
            view_tokens=(self.student.tokens(v1), self.student.tokens(v2)),
            teacher_gram=teacher_gram,
        )

    # -- forward pieces --

    def _cls_forward(self, tokens: np.ndarray, w: np.ndarray):
        cls = tokens[0]
        adapted = cls + w @ cls
        norm = float(np.linalg.norm(adapted))
        if norm == 0.0:
            raise ContractError("adapter collapsed the CLS token to zero")
        z = adapted / norm
        return cls, z, norm

    def loss_parts(self, state: SampleState, w: np.ndarray) -> tuple[float, float, float]:
        """(task, consistency, distillation) values at W."""
        t0, t1 = self.protos.t0, self.protos.t1
        _, z, _ = self._cls_forward(state.tokens, w)
        logits = self.cfg.temperature * np.array([z @ t0, z @ t1])
        shifted = logits - logits.max()
        logp = shifted - np.log(np.exp(shifted).sum())
        task = float(-logp[state.label])

        diff = t1 - t0
        m = []
        for vt in state.view_tokens:
            _, zv, _ = self._cls_forward(vt, w)
            m.append(float(zv @ diff))
        cons = (m[0] - m[1]) ** 2

        dist = 0.0
        if state.teacher_gram is not None:
            adapted = adapter_apply(state.tokens, w)[1:]
            dist = float(((gram(adapted) - state.teacher_gram) ** 2).sum())
        return task, cons, dist

    def loss(self, state: SampleState, w: np.ndarray) -> float:
        task, cons, dist = self.loss_parts(state, w)
        return task + self.cfg.lambda_cons * cons + self.cfg.lambda_dist * dist

    def grad(self, state: SampleState, w: np.ndarray) -> np.ndarray:
        """Exact gradient of the total loss with respect to W."""
        t0, t1 = self.protos.t0, self.protos.t1
        diff = t1 - t0
        grad_w = np.zeros_like(w)

        # Task: temperature-scaled cross entropy through the adapted CLS.
        cls, z, norm = self._cls_forward(state.tokens, w)
        logits = self.cfg.temperature * np.array([z @ t0, z @ t1])
        shifted = logits - logits.max()
        p = np.exp(shifted) / np.exp(shifted).sum()
        g_logits = p.copy()
        g_logits[state.label] -= 1.0
        g_z = self.cfg.temperature * (g_logits[0] * t0 + g_logits[1] * t1)
        g_cls = (g_z - z * (z @ g_z)) / norm
        grad_w += np.outer(g_cls, cls)

        # Consistency: squared margin difference across the two views.
        margins, g_view = [], []
        for vt in state.view_tokens:
            vcls, vz, vnorm = self._cls_forward(vt, w)
            margins.append(float(vz @ diff))
            g_view.append(np.outer((diff - vz * (vz @ diff)) / vnorm, vcls))
        grad_w += self.cfg.lambda_cons * 2.0 * (margins[0] - margins[1]) * (g_view[0] - g_view[1])

        # Distillation: Frobenius gap between normalized Gram matrices.
        if state.teacher_gram is not None and self.cfg.lambda_dist != 0.0:
            patches = state.tokens[1:]
            adapted = patches + patches @ w.T
            norms = np.linalg.norm(adapted, axis=1)
            u = adapted / norms[:, None]
            delta = u @ u.T - state.teacher_gram
            g_u = 4.0 * delta @ u
            g_p = (g_u - u * (g_u * u).sum(axis=1, keepdims=True)) / norms[:, None]
            grad_w += self.cfg.lambda_dist * (g_p.T @ patches)

        return grad_w


def repair_loss(problem: RepairProblem, image: np.ndarray, label: int,
                w: np.ndarray, aug_seed: int = 0) -> tuple[float, tuple[float, float, float]]:
    """One-shot total loss and its (task, cons, dist) parts."""
    state = problem.prepare(image, label, aug_seed)
    parts = problem.loss_parts(state, w)
    total = parts[0] + problem.cfg.lambda_cons * parts[1] + problem.cfg.lambda_dist * parts[2]
    return total, parts


def repair_grad(problem: RepairProblem, image: np.ndarray, label: int,
                w: np.ndarray, aug_seed: int = 0) -> np.ndarray:
    return problem.grad(problem.prepare(image, label, aug_seed), w)


def train_adapter(clean_set, problem: RepairProblem, seed: int,
                  epochs: int | None = None) -> tuple[np.ndarray, list[float]]:
    """Full-batch gradient descent from W = 0 with halve-on-increase.

    Returns the final adapter and the accepted loss trace, which is
    non-increasing up to 1e-6. Raises TrainingError after 10 halvings fail
    to restore descent.
    """
    if len(clean_set) == 0:
        raise ContractError("empty training set")
    epochs = problem.cfg.epochs if epochs is None else int(epochs)
    states = [
        problem.prepare(s.image, s.label, derive_seed(seed, "augment", i))
        for i, s in enumerate(clean_set)
    ]
    d = problem.student.dim
    w = np.zeros((d, d))
    if epochs == 0:
        return w, []

    def batch_loss(wm):
        return float(np.mean([problem.loss(st, wm) for st in states]))

    def batch_grad(wm):
        g = np.zeros_like(wm)
        for st in states:  # fixed order keeps the reduction bit-stable
            g += problem.grad(st, wm)
        return g / len(states)

    lr = problem.cfg.learning_rate
    halvings = 0
    trace = [batch_loss(w)]
    epoch = 0
    while epoch < epochs:
        candidate = w - lr * batch_grad(w)
        loss_candidate = batch_loss(candidate)
        if loss_candidate > trace[-1] + 1e-6:
            halvings += 1
            if halvings > 10:
                raise TrainingError(
                    f"training diverged after {halvings - 1} halvings; trace={trace}"
                )
            lr /= 2.0
            continue
        w = candidate
        trace.append(loss_candidate)
        epoch += 1
    return w, trace


# --- archive evaluation -------------------------------------------------------


@dataclass
class RepairReport:
    total: int
    skipped: list[str]
    clean_acc_before: float
    clean_acc_after: float
    adv_acc_before: float
    adv_acc_after: float
    per_tag: dict[str, dict[str, float]]

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "skipped": list(self.skipped),
            "clean_acc_before": self.clean_acc_before,
            "clean_acc_after": self.clean_acc_after,
            "adv_acc_before": self.adv_acc_before,
            "adv_acc_after": self.adv_acc_after,
            "per_tag": self.per_tag,
        }


def eval_on_archive(entries, scorer: StudentScorer, w: np.ndarray | None) -> RepairReport:
    """Accuracy on archived clean/adversarial images, before vs after repair.

    ``entries`` is an iterable of dicts with ``sample_id``, ``label``,
    ``modality_tag``, and resolved ``clean_path``/``adv_path``. Entries whose
    images are missing are reported and skipped.
    """
    protos = scorer.prototypes()
    before = scorer.with_adapter(None)
    after = scorer.with_adapter(w)
    skipped: list[str] = []
    rows = []
    for e in entries:
        try:
            clean = read_png(e["clean_path"])
            adv = read_png(e["adv_path"])
        except (OSError, DataIntegrityError):
            skipped.append(str(e.get("sample_id", "?")))
            continue
        y = int(e["label"])
        tag = e.get("modality_tag", "")
        row = {"tag": tag}
        row["clean_before"] = predict(margin(before.embed_image(clean), protos)) == y
        row["clean_after"] = predict(margin(after.embed_image(clean), protos)) == y
        row["adv_before"] = predict(margin(before.embed_image(adv), protos)) == y
        row["adv_after"] = predict(margin(after.embed_image(adv), protos)) == y
        rows.append(row)

    def acc(key, subset=None):
        picked = [r for r in rows if subset is None or r["tag"] == subset]
        if not picked:
            return float("nan")
        return float(np.mean([r[key] for r in picked]))

    tags = sorted({r["tag"] for r in rows})
    per_tag = {
        tag: {
            "clean_before": acc("clean_before", tag),
            "clean_after": acc("clean_after", tag),
            "adv_before": acc("adv_before", tag),
            "adv_after": acc("adv_after", tag),
        }
        for tag in tags
    }
    return RepairReport(
        total=len(rows),
        skipped=skipped,
        clean_acc_before=acc("clean_before"),
        clean_acc_after=acc("clean_after"),
        adv_acc_before=acc("adv_before"),
        adv_acc_after=acc("adv_after"),
        per_tag=per_tag,
    )


# --- persistence --------------------------------------------------------------


def save_adapter(path, w: np.ndarray, config_echo: dict) -> None:
    """Binary adapter file: magic, u32 dim, row-major f64 entries, then a
    length-prefixed UTF-8 JSON config echo."""
    d = w.shape[0]
    if w.shape != (d, d):
        raise ContractError("adapter must be square")
    blob = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(ADAPTER_MAGIC)
    buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_adapter(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(ADAPTER_MAGIC)] != ADAPTER_MAGIC:
        raise DataIntegrityError("bad adapter magic")
    off = len(ADAPTER_MAGIC)
    (d,) = struct.unpack_from("<I", data, off)
    off += 4
    w = np.frombuffer(data, dtype="<f8", count=d * d, offset=off).reshape(d, d).copy()
    off += d * d * 8
    (blob_len,) = struct.unpack_from("<I", data, off)
    off += 4
    echo = json.loads(data[off : off + blob_len].decode("utf-8"))
    return w, echo
