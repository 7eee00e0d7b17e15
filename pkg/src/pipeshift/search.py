"""Constrained black-box attack search: per-family optimization, winner
selection across the seven composition families, and success accounting.

Flat parameter names (``a_gain``, ``r_offset``, ``d_quality``, ...) tie the
sampler, the archived records, and the stage bundles together. Per-family
search seeds derive from (sample seed, family name) only, so a restricted
campaign (say Only-R) reproduces exactly the trials the full campaign ran
for that family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tpe
from .errors import ConfigError, StageError
from .imaging import roi_mask
from .scoring import ClassPrototypes, margin, signed_correctness
from .seeding import rng_for
from .similarity import AlphaProjector
from .stages import FAMILIES, FamilySpec, ThetaA, ThetaD, ThetaR, apply_family

# Default search boxes per flat parameter name. Deliberately narrower than
# the hard stage bounds: single-stage shifts at these widths stay visually
# plausible and flip only part of the samples, leaving the compounding of
# chained families something to measure. Campaign config may override any
# entry within the hard stage bounds.
DEFAULT_DOMAINS: dict[str, tuple] = {
    "a_gain": ("float", -0.12, 0.12),
    "a_cx": ("float", -0.35, 0.35),
    "a_cy": ("float", -0.35, 0.35),
    "a_rot": ("float", -math.pi, math.pi),
    "a_aniso": ("float", 0.5, 2.0),
    "a_falloff": ("float", 1.0, 3.0),
    "r_offset": ("float", -0.05, 0.05),
    "r_width": ("float", 0.85, 1.15),
    "r_y25": ("float", 0.19, 0.31),
    "r_y50": ("float", 0.44, 0.56),
    "r_y75": ("float", 0.69, 0.81),
    "r_gamma": ("float", 0.85, 1.2),
    "r_bits": ("int", 5, 8),
    "d_rho": ("float", 0.3, 1.0),
    "d_quality": ("int", 10, 95),
}

_STAGE_PARAMS = {
    "A": ("a_gain", "a_cx", "a_cy", "a_rot", "a_aniso", "a_falloff"),
    "R": ("r_offset", "r_width", "r_y25", "r_y50", "r_y75", "r_gamma", "r_bits"),
    "D": ("d_rho", "d_quality"),
}

# Hard outer bounds (the stage dataclasses re-validate these).
_HARD_BOUNDS = {
    "a_gain": (-0.4, 0.4), "a_cx": (-0.35, 0.35), "a_cy": (-0.35, 0.35),
    "a_rot": (-math.pi, math.pi), "a_aniso": (0.5, 2.0), "a_falloff": (1.0, 3.0),
    "r_offset": (-0.25, 0.25), "r_width": (0.5, 1.5), "r_y25": (0.05, 0.45),
    "r_y50": (0.25, 0.75), "r_y75": (0.55, 0.95), "r_gamma": (0.5, 2.0),
    "r_bits": (3, 8), "d_rho": (0.3, 1.0), "d_quality": (10, 95),
}


def build_domain(family: str, overrides: dict | None = None) -> tpe.ParamDomain:
    """Sampling domain for one family, with optional per-parameter overrides.

    Overrides are ``{name: [lo, hi]}`` (or a scalar to pin a value) and must
    stay inside the hard stage bounds.
    """
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}")
    overrides = overrides or {}
    unknown = set(overrides) - set(DEFAULT_DOMAINS)
    if unknown:
        raise ConfigError(f"unknown domain overrides: {sorted(unknown)}")
    params: list[tpe.Param] = []
    for letter in "ARD":
        if letter not in family:
            continue
        for name in _STAGE_PARAMS[letter]:
            kind, lo, hi = DEFAULT_DOMAINS[name]
            if name in overrides:
                ov = overrides[name]
                lo, hi = (ov, ov) if np.isscalar(ov) else (ov[0], ov[1])
            hb = _HARD_BOUNDS[name]
            if lo < hb[0] or hi > hb[1] or lo > hi:
                raise ConfigError(f"override for {name} outside hard bounds {hb}: [{lo}, {hi}]")
            if kind == "int":
                params.append(tpe.IntParam(name, int(lo), int(hi)))
            else:
                params.append(tpe.FloatParam(name, float(lo), float(hi)))
    return tpe.ParamDomain(params)


def spec_from_params(family: str, params: dict) -> FamilySpec:
    """Materialize sampled flat parameters into stage bundles."""
    theta_a = theta_r = theta_d = None
    if "A" in family:
        theta_a = ThetaA(
            gain_strength=params["a_gain"], center_x=params["a_cx"], center_y=params["a_cy"],
            rotation=params["a_rot"], anisotropy=params["a_aniso"], falloff=params["a_falloff"],
        )
    if "R" in family:
        theta_r = ThetaR(
            window_offset=params["r_offset"], width_scale=params["r_width"],
            y25=params["r_y25"], y50=params["r_y50"], y75=params["r_y75"],
            gamma=params["r_gamma"], bit_depth=params["r_bits"],
        )
    if "D" in family:
        theta_d = ThetaD(resize_factor=params["d_rho"], jpeg_quality=params["d_quality"])
    return FamilySpec(family, a=theta_a, r=theta_r, d=theta_d)


@dataclass(frozen=True)
class Trial:
    """One evaluated candidate; ``status`` is ok unless a stage failed."""

    family: str
    params: dict
    objective: float
    alpha_star: float = math.nan
    ssim_global: float = math.nan
    ssim_roi: float = math.nan
    status: str = "ok"
    index: int = -1


@dataclass
class SearchResult:
    best: Trial | None
    trials: list[Trial]

    @property
    def objectives(self) -> list[float]:
        return [t.objective for t in self.trials]


class AttackContext:
    """Everything fixed for one (sample, tau) pair during a search.

    Holds the clean image, the clean-derived ROI mask, the amortized
    similarity projector, and the scorer handle. Evaluations are pure given
    the context, so contexts may be used from one thread at a time each.
    """

    def __init__(self, image: np.ndarray, label: int, tau: float, scorer,
                 protos: ClassPrototypes | None = None):
        self.image = image
        self.label = int(label)
        self.tau = float(tau)
        self.scorer = scorer
        self.protos = protos if protos is not None else scorer.prototypes()
        self.mask = roi_mask(image)
        self.projector = AlphaProjector(image, self.mask, tau)
        self.j_clean = signed_correctness(
            margin(scorer.embed_image(image), self.protos), self.label
        )

    def evaluate(self, family: str, params: dict, index: int = -1) -> Trial:
        """Apply the family, project to feasibility, score the result."""
        try:
            shifted = apply_family(self.image, spec_from_params(family, params))
        except StageError:
            return Trial(family, dict(params), math.inf, status="discarded", index=index)
        adv, verdict = self.projector.project(shifted)
        j_adv = signed_correctness(margin(self.scorer.embed_image(adv), self.protos), self.label)
        return Trial(
            family, dict(params), j_adv,
            alpha_star=verdict.alpha_star,
            ssim_global=verdict.ssim_global,
            ssim_roi=verdict.ssim_roi,
            index=index,
        )

    def rebuild(self, trial: Trial) -> np.ndarray:
        """Reconstruct the adversarial image for an ok trial."""
        shifted = apply_family(self.image, spec_from_params(trial.family, trial.params))
        adv, _ = self.projector.project(shifted)
        return adv


def _run_sampler(ctx: AttackContext, family: str, budget: int, seed: int,
                 domain: tpe.ParamDomain, use_tpe: bool) -> SearchResult:
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    history: list[tuple[dict, float]] = []
    trials: list[Trial] = []
    best: Trial | None = None
    for i in range(budget):
        params = tpe.suggest(domain, history, rng) if use_tpe else domain.sample(rng)
        trial = ctx.evaluate(family, params, index=i)
        trials.append(trial)
        history.append((params, trial.objective))
        if trial.status == "ok" and (best is None or trial.objective < best.objective):
            best = trial  # strict < keeps the earliest minimum
    return SearchResult(best=best, trials=trials)


def random_search(ctx: AttackContext, family: str, budget: int, seed: int,
                  domain: tpe.ParamDomain | None = None) -> SearchResult:
    """Independent uniform draws; best ok trial wins, earliest on ties."""
    domain = domain if domain is not None else build_domain(family)
    return _run_sampler(ctx, family, budget, seed, domain, use_tpe=False)


def tpe_optimize(ctx: AttackContext, family: str, budget: int, seed: int,
                 domain: tpe.ParamDomain | None = None) -> SearchResult:
    """TPE-guided search; identical to random_search for the startup trials."""
    domain = domain if domain is not None else build_domain(family)
    return _run_sampler(ctx, family, budget, seed, domain, use_tpe=True)


OPTIMIZERS = {"random": random_search, "tpe": tpe_optimize}


@dataclass
class FamilyOutcome:
    """Best result of one family's within-family optimization."""

    family: str
    objective: float
    params: dict | None
    alpha_star: float
    ssim_global: float
    ssim_roi: float
    status: str  # "ok" or "no-candidate"


@dataclass
class AttackRecord:
    """Archived outcome of one sample's full attack."""

    sample_id: str
    label: int
    modality_tag: str
    tau: float
    optimizer: str
    seed: int
    trials_per_family: int
    j_clean: float
    clean_correct: bool
    winner_family: str
    winner_params: dict | None
    alpha_star: float
    ssim_global: float
    ssim_roi: float
    j_adv: float
    success: bool
    per_family: dict[str, FamilyOutcome] = field(default_factory=dict)
    traces: dict[str, list[float]] | None = None


def attack_sample(
    image: np.ndarray,
    label: int,
    sample_id: str,
    *,
    tau: float,
    optimizer: str,
    budget: int,
    seed: int,
    scorer,
    protos: ClassPrototypes | None = None,
    families: tuple[str, ...] = FAMILIES,
    domain_overrides: dict | None = None,
    modality_tag: str = "",
    keep_traces: bool = False,
) -> tuple[AttackRecord, np.ndarray]:
    """Optimize every family, pick the winner, and return record + image.

    The per-family seed depends only on (seed, family), so family-restricted
    campaigns reproduce the full campaign's trials for shared families. The
    returned image is the winner's adversarial output (the clean image when
    nothing beat it).
    """
    if optimizer not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    bad = [f for f in families if f not in FAMILIES]
    if bad or not families:
        raise ConfigError(f"invalid family subset {families!r}")
    run = OPTIMIZERS[optimizer]

    ctx = AttackContext(image, label, tau, scorer, protos)
    outcomes: dict[str, FamilyOutcome] = {}
    traces: dict[str, list[float]] = {}
    results: dict[str, SearchResult] = {}
    for family in FAMILIES:  # canonical order regardless of subset order
        if family not in families:
            continue
        domain = build_domain(family, domain_overrides)
        family_seed = int(rng_for(seed, "family", family).integers(2**63))
        res = run(ctx, family, budget, family_seed, domain)
        results[family] = res
        if keep_traces:
            traces[family] = [t.objective for t in res.trials]
        if res.best is None:
            outcomes[family] = FamilyOutcome(
                family, ctx.j_clean, None, math.nan, math.nan, math.nan, "no-candidate"
            )
        else:
            b = res.best
            outcomes[family] = FamilyOutcome(
                family, b.objective, b.params, b.alpha_star, b.ssim_global, b.ssim_roi, "ok"
            )

    winner = min(outcomes.values(), key=lambda o: o.objective)
    for family in FAMILIES:  # argmin with Eq-order tie-break
        if family in outcomes and outcomes[family].objective == winner.objective:
            winner = outcomes[family]
            break

    if winner.status == "ok" and winner.objective < ctx.j_clean:
        adv = ctx.rebuild(results[winner.family].best)
        j_adv = winner.objective
        alpha, sg, sr = winner.alpha_star, winner.ssim_global, winner.ssim_roi
        win_params = winner.params
    else:
        # Nothing beat the clean image: archive the clean-equivalent result.
        adv = ctx.image.copy()
        j_adv = ctx.j_clean
        alpha, sg, sr = 0.0, 1.0, 1.0
        win_params = winner.params if winner.status == "ok" else None

    record = AttackRecord(
        sample_id=sample_id,
        label=int(label),
        modality_tag=modality_tag,
        tau=tau,
        optimizer=optimizer,
        seed=int(seed),
        trials_per_family=int(budget),
        j_clean=ctx.j_clean,
        clean_correct=ctx.j_clean > 0,
        winner_family=winner.family,
        winner_params=win_params,
        alpha_star=alpha,
        ssim_global=sg,
        ssim_roi=sr,
        j_adv=j_adv,
        success=ctx.j_clean > 0 and j_adv < 0,
        per_family=outcomes,
        traces=traces if keep_traces else None,
    )
    return record, adv


def success_rate(records: list[AttackRecord], family: str | None = None) -> float | None:
    """Percent of clean-correct samples flipped; None when undefined.

    With a family filter, a record counts as flipped when that family's own
    best objective went negative (per-family success after within-family
    optimization), regardless of which family won overall.
    """
    eligible = [r for r in records if r.clean_correct]
    if not eligible:
        return None
    if family is None:
        flips = sum(1 for r in eligible if r.j_adv < 0)
    else:
        flips = sum(
            1
            for r in eligible
            if family in r.per_family and r.per_family[family].objective < 0
        )
    return 100.0 * flips / len(eligible)
