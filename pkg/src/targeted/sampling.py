"""Similarity-weighted sampling of training rows.

Two interchangeable mechanisms realize the same categorical distribution
``P(row i) = s_i / sum_m s_m``:

* weighted mini-batches, drawn with replacement straight from an alias
  table inside the training loop, and
* a resampled dataset of ``floor(t * n)`` i.i.d. rows that an unmodified
  uniform-batching pipeline can consume.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .similarity import SimilarityScores

log = logging.getLogger(__name__)

WEIGHTED_BATCH = "weighted-batch"
RESAMPLE = "resample"


class ZeroMassError(ValueError):
    """Every similarity score is zero and the plan may not fall back."""


@dataclass(frozen=True)
class SamplingPlan:
    probabilities: np.ndarray
    scheme: str = WEIGHTED_BATCH
    t: Optional[float] = None
    fallback: str = "uniform"
    used_fallback: bool = False

    @property
    def n(self) -> int:
        return len(self.probabilities)


@dataclass(frozen=True)
class AliasTable:
    probability_row: np.ndarray
    alias_row: np.ndarray

    @property
    def n(self) -> int:
        return len(self.probability_row)

    def reconstruct(self) -> np.ndarray:
        """Probability of each index implied by the table."""
        n = self.n
        out = self.probability_row / n
        out = out + np.bincount(self.alias_row, weights=(1.0 - self.probability_row) / n, minlength=n)
        return out

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        cols = rng.integers(0, self.n, size=size)
        keep = rng.random(size) < self.probability_row[cols]
        return np.where(keep, cols, self.alias_row[cols])


def build_plan(scores, scheme: str = WEIGHTED_BATCH, fallback: str = "uniform",
               t: Optional[float] = None) -> SamplingPlan:
    """Normalize similarity scores into drawing probabilities.

    With zero total mass, ``fallback="uniform"`` logs a warning and returns
    the uniform plan; ``fallback="error"`` raises :class:`ZeroMassError`.
    """
    if scheme not in (WEIGHTED_BATCH, RESAMPLE):
        raise ValueError(f"unknown scheme {scheme!r}")
    if fallback not in ("uniform", "error"):
        raise ValueError(f"unknown fallback {fallback!r}")
    if scheme == RESAMPLE and (t is None or not t > 0):
        raise ValueError("resample scheme needs t > 0")
    s = np.asarray(scores.scores if isinstance(scores, SimilarityScores) else scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 1:
        raise ValueError("need at least one score")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite and nonnegative")
    total = float(np.cumsum(s)[-1])
    used_fallback = False
    if total <= 0:
        if fallback == "error":
            raise ZeroMassError("all similarity scores are zero")
        log.warning("all %d similarity scores are zero; falling back to uniform sampling", len(s))
        probs = np.full(len(s), 1.0 / len(s))
        used_fallback = True
    else:
        probs = s / total
    probs.setflags(write=False)
    return SamplingPlan(probs, scheme, t, fallback, used_fallback)


def build_alias_table(plan) -> AliasTable:
    """Vose's alias method, O(n) construction."""
    p = np.asarray(plan.probabilities if isinstance(plan, SamplingPlan) else plan, dtype=np.float64)
    n = len(p)
    scaled = p * (n / p.sum())
    prob = np.zeros(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    work = scaled.tolist()
    while small and large:
        lo = small.pop()
        hi = large.pop()
        prob[lo] = work[lo]
        alias[lo] = hi
        work[hi] = (work[hi] + work[lo]) - 1.0
        if work[hi] < 1.0:
            small.append(hi)
        else:
            large.append(hi)
    # leftovers are off from 1 only by rounding; zero-weight rows must
    # stay unreachable, so they point at the heaviest row instead
    heaviest = int(np.argmax(p))
    for i in large + small:
        if p[i] > 0:
            prob[i] = 1.0
            alias[i] = i
        else:
            prob[i] = 0.0
            alias[i] = heaviest
    return AliasTable(prob, alias)


def draw_indices(table: AliasTable, b: int, rng: np.random.Generator) -> np.ndarray:
    if b < 1:
        raise ValueError("batch size must be at least 1")
    return table.sample(b, rng)


def draw_batch(table: AliasTable, data: Dataset, b: int, rng: np.random.Generator):
    """``b`` rows drawn independently, with replacement, from the table."""
    if table.n != data.n:
        raise ValueError(f"table covers {table.n} rows, dataset has {data.n}")
    idx = draw_indices(table, b, rng)
    return data.features[idx], data.labels[idx]


def resample_size(n: int, t: float) -> int:
    return int(math.floor(t * n))


def resample_dataset(plan: SamplingPlan, data: Dataset, t: float, rng: np.random.Generator,
                     table: Optional[AliasTable] = None) -> Dataset:
    """New dataset of ``floor(t * n)`` rows drawn i.i.d. from the plan."""
    if not t > 0:
        raise ValueError("t must be positive")
    if plan.n != data.n:
        raise ValueError(f"plan covers {plan.n} rows, dataset has {data.n}")
    m = resample_size(data.n, t)
    if m < 1:
        raise ValueError(f"floor(t * n) = floor({t} * {data.n}) is zero")
    table = table or build_alias_table(plan)
    return data.subset(table.sample(m, rng))
