"""Random pairs from the BPC distribution.

``sample_exact`` draws Y from its marginal by inverse CDF and then
X | Y=y ~ Poisson(lambda1 * lambda3**y), which reproduces the joint pmf
exactly up to series truncation.  ``sample_gibbs`` alternates the two
Poisson conditionals and is kept as an independent cross-check.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from bpc.series import LambdaParams, SeriesControl, SeriesError, marginal_log_pmf_y

# the inverse-CDF support stops where the marginal CDF passes 1 - CDF_CAP_TAIL
CDF_CAP_TAIL = 1e-12


class Method(str, enum.Enum):
    EXACT = "exact"
    GIBBS = "gibbs"


@dataclass(frozen=True)
class SampleConfig:
    n: int
    seed: int = 0
    method: Method = Method.EXACT
    burn_in: int = 1000
    thin: int = 5

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class CountPairSample:
    """An (n, 2) integer array of (x, y) pairs."""

    pairs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pairs)
        if arr.size == 0:
            arr = arr.reshape(0, 2)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("pairs must have shape (n, 2)")
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("pairs must be integers")
        arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise ValueError("pairs must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "pairs", arr)

    def __len__(self):
        return self.pairs.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.pairs[:, 1]


def make_rng(seed: int, *stream) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional stream index path.

    ``make_rng(master, r)`` gives replication ``r`` its own stream that does
    not depend on how many other replications ran before it.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), *map(int, stream)))))


def marginal_cdf_table(params: LambdaParams, ctrl: Optional[SeriesControl] = None) -> np.ndarray:
    """Cumulative marginal probabilities of Y up to the 1 - 1e-12 cap."""
    size = int(params.lambda2 + 10.0 * np.sqrt(params.lambda2) + 30)
    max_terms = (ctrl.max_terms if ctrl is not None else 10_000)
    while True:
        cdf = np.cumsum(np.exp(marginal_log_pmf_y(params, np.arange(size), ctrl)))
        hit = np.flatnonzero(cdf > 1.0 - CDF_CAP_TAIL)
        if hit.size:
            return cdf[: hit[0] + 1]
        if size >= max_terms:
            raise SeriesError("marginal CDF of Y did not reach its cap")
        size = min(2 * size, max_terms)


def sample_exact(params: LambdaParams, cfg: SampleConfig, ctrl: Optional[SeriesControl] = None,
                 rng: Optional[np.random.Generator] = None) -> CountPairSample:
    rng = make_rng(cfg.seed) if rng is None else rng
    cdf = marginal_cdf_table(params, ctrl)
    u = rng.random(cfg.n)
    y = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    x = rng.poisson(params.lambda1 * params.lambda3 ** y)
    return CountPairSample(np.column_stack([x, y]))


def sample_gibbs(params: LambdaParams, cfg: SampleConfig,
                 rng: Optional[np.random.Generator] = None) -> CountPairSample:
    rng = make_rng(cfg.seed) if rng is None else rng
    a, b, c = params.lambda1, params.lambda2, params.lambda3
    total = cfg.burn_in + cfg.n * cfg.thin
    out = np.empty((cfg.n, 2), dtype=np.int64)
    x = y = 0
    kept = 0
    for step in range(1, total + 1):
        x = rng.poisson(a * c ** y)
        y = rng.poisson(b * c ** x)
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thin == 0:
            out[kept] = x, y
            kept += 1
    return CountPairSample(out)


def sample(params: LambdaParams, cfg: SampleConfig, ctrl: Optional[SeriesControl] = None,
           rng: Optional[np.random.Generator] = None) -> CountPairSample:
    if cfg.method is Method.GIBBS:
        return sample_gibbs(params, cfg, rng)
    return sample_exact(params, cfg, ctrl, rng)
