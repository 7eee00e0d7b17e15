"""Native samplers for black-box parameter search: uniform random and a
tree-structured Parzen estimator.

The TPE here is deliberately small and fully deterministic given a seeded
generator: after ``N_STARTUP`` uniform trials, observed trials are split at
the ``GAMMA`` quantile of the objective into good/bad sets; each continuous
parameter is modeled per set as a uniform mixture of truncated Gaussians
centered at the observed values with bandwidth
``(domain width) * max(1/sqrt(set size), 0.1)``. Integers are treated as
continuous and rounded on materialization; categoricals use add-one-smoothed
frequencies. Each suggestion draws ``N_CANDIDATES`` samples from the good
model and keeps the one maximizing good/bad density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError

N_STARTUP = 10
GAMMA = 0.25
N_CANDIDATES = 24
MIN_BANDWIDTH_FRACTION = 0.1

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FloatParam:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigError(f"{self.name}: bad interval [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class IntParam:
    name: str
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigError(f"{self.name}: bad range [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class CatParam:
    name: str
    choices: tuple

    def __post_init__(self):
        if len(self.choices) == 0:
            raise ConfigError(f"{self.name}: empty categorical")


Param = FloatParam | IntParam | CatParam


class ParamDomain:
    """Ordered set of named parameters; iteration order is sampling order."""

    def __init__(self, params: list[Param]):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")
        self.params: tuple[Param, ...] = tuple(params)

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def sample(self, rng: np.random.Generator) -> dict:
        """One uniform draw; the sequence defines the random-search stream."""
        out = {}
        for p in self.params:
            if isinstance(p, FloatParam):
                out[p.name] = p.lo if p.lo == p.hi else float(rng.uniform(p.lo, p.hi))
            elif isinstance(p, IntParam):
                out[p.name] = int(rng.integers(p.lo, p.hi + 1))
            else:
                out[p.name] = p.choices[int(rng.integers(len(p.choices)))]
        return out

    def contains(self, values: dict) -> bool:
        for p in self.params:
            v = values[p.name]
            if isinstance(p, (FloatParam, IntParam)) and not (p.lo <= v <= p.hi):
                return False
            if isinstance(p, CatParam) and v not in p.choices:
                return False
        return True


class _Parzen1D:
    """Uniform mixture of truncated Gaussians over one interval."""

    def __init__(self, centers: np.ndarray, lo: float, hi: float):
        self.lo, self.hi = float(lo), float(hi)
        self.centers = np.asarray(centers, dtype=np.float64)
        width = max(self.hi - self.lo, 1e-12)
        self.sigma = width * max(1.0 / math.sqrt(len(self.centers)), MIN_BANDWIDTH_FRACTION)
        # Per-component truncation mass for the normalized pdf.
        self._mass = ndtr((self.hi - self.centers) / self.sigma) - ndtr(
            (self.lo - self.centers) / self.sigma
        )

    def sample_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n independent draws (component choice + inverse-CDF truncation)."""
        idx = rng.integers(len(self.centers), size=n)
        u = rng.random(n)
        if self.lo == self.hi:
            return np.full(n, self.lo)
        mu = self.centers[idx]
        a = ndtr((self.lo - mu) / self.sigma)
        b = ndtr((self.hi - mu) / self.sigma)
        q = np.clip(a + u * (b - a), 1e-12, 1.0 - 1e-12)
        return np.clip(mu + self.sigma * ndtri(q), self.lo, self.hi)

    def logpdf_many(self, x: np.ndarray) -> np.ndarray:
        """Mixture log-density at each x (vectorized over x and components)."""
        if self.lo == self.hi:
            return np.zeros(len(x))
        z = (x[:, None] - self.centers[None, :]) / self.sigma
        comp = -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI
        comp = comp - np.log(np.maximum(self._mass[None, :], 1e-300))
        m = comp.max(axis=1, keepdims=True)
        return (m[:, 0] + np.log(np.exp(comp - m).mean(axis=1)))


class _Categorical:
    """Add-one-smoothed frequency distribution over fixed choices."""

    def __init__(self, observed: list, choices: tuple):
        self.choices = choices
        counts = np.array([1.0 + sum(1 for o in observed if o == c) for c in choices])
        self.probs = counts / counts.sum()

    def sample_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(len(self.choices), size=n, p=self.probs)

    def logpdf_many(self, idx: np.ndarray) -> np.ndarray:
        return np.log(self.probs[idx])


def _build_models(domain: ParamDomain, observations: list[dict]):
    models = {}
    for p in domain:
        if isinstance(p, CatParam):
            models[p.name] = _Categorical([o[p.name] for o in observations], p.choices)
        else:
            centers = np.array([float(o[p.name]) for o in observations])
            models[p.name] = _Parzen1D(centers, float(p.lo), float(p.hi))
    return models


def suggest(
    domain: ParamDomain,
    history: list[tuple[dict, float]],
    rng: np.random.Generator,
) -> dict:
    """Next trial parameters given (params, objective) history.

    History entries with non-finite objectives are ignored. Below the
    startup count the draw is exactly ``domain.sample(rng)``, so a TPE run
    shares its prefix with a random-search run on the same stream.
    """
    observed = [(p, o) for p, o in history if math.isfinite(o)]
    if len(observed) < N_STARTUP:
        return domain.sample(rng)

    order = sorted(range(len(observed)), key=lambda i: (observed[i][1], i))
    n_good = max(1, math.ceil(GAMMA * len(observed)))
    good = [observed[i][0] for i in order[:n_good]]
    bad = [observed[i][0] for i in order[n_good:]]
    if not bad:
        return domain.sample(rng)

    good_models = _build_models(domain, good)
    bad_models = _build_models(domain, bad)

    # Candidates drawn parameter-by-parameter from the good model; the
    # good/bad log-density ratio accumulates across parameters.
    score = np.zeros(N_CANDIDATES)
    columns = {}
    for p in domain:
        g, b = good_models[p.name], bad_models[p.name]
        draws = g.sample_many(rng, N_CANDIDATES)
        columns[p.name] = draws
        score += g.logpdf_many(draws) - b.logpdf_many(draws)
    best = int(np.argmax(score))  # first maximum wins

    values = {}
    for p in domain:
        v = columns[p.name][best]
        if isinstance(p, CatParam):
            values[p.name] = p.choices[int(v)]
        elif isinstance(p, IntParam):
            values[p.name] = int(min(max(round(float(v)), p.lo), p.hi))
        else:
            values[p.name] = float(v)
    return values
