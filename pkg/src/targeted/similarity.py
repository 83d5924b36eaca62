"""Similarity between training inputs and a set of target inputs.

The default measure is the thresholded maximum cosine

    s(x; w_1..w_g) = max(0, cos(x, w_1), ..., cos(x, w_g)),

which lies in [0, 1], equals 1 exactly when ``x`` points the same way as
some target and 0 exactly when ``x`` makes an angle of at least 90 degrees
with every target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, TargetSet

NORM_EPSILON = 1e-8

COSINE_MAX = "cosine-max"
UNIFORM = "uniform"
MEASURES = (COSINE_MAX, UNIFORM)


@dataclass(frozen=True)
class SimilarityMeasure:
    """``kind`` selects the measure.

    ``"uniform"`` scores every sample 1; it turns targeted training back
    into ordinary SGD and is used as a control.
    """

    kind: str = COSINE_MAX
    epsilon: float = NORM_EPSILON

    def __post_init__(self):
        if self.kind not in MEASURES:
            raise ValueError(f"unknown similarity measure {self.kind!r}; choose from {MEASURES}")


@dataclass(frozen=True)
class SimilarityScores:
    scores: np.ndarray
    total_mass: float

    def __len__(self):
        return len(self.scores)


def _as_target_matrix(targets) -> np.ndarray:
    w = targets.targets if isinstance(targets, TargetSet) else np.asarray(targets, dtype=np.float64)
    w = np.atleast_2d(w)
    if w.shape[0] == 0:
        raise ValueError("empty target set")
    return w


def cosine(x, w, epsilon: float = NORM_EPSILON) -> float:
    """Cosine of the angle between ``x`` and ``w``; 0 if either is (near) zero."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != w.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {w.shape}")
    nx, nw = np.linalg.norm(x), np.linalg.norm(w)
    if nx < epsilon or nw < epsilon:
        return 0.0
    c = float(np.dot(x, w) / (nx * nw))
    return min(1.0, max(-1.0, c))


def _unit_rows(m: np.ndarray, epsilon: float) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    out = np.zeros_like(m)
    ok = norms[:, 0] >= epsilon
    out[ok] = m[ok] / norms[ok]
    return out


def cosine_matrix(x: np.ndarray, w: np.ndarray, epsilon: float = NORM_EPSILON) -> np.ndarray:
    """All pairwise cosines, shape ``(len(x), len(w))``."""
    return np.clip(_unit_rows(x, epsilon) @ _unit_rows(w, epsilon).T, -1.0, 1.0)


def _cosine_max_rows(x: np.ndarray, w: np.ndarray, epsilon: float) -> np.ndarray:
    nx = np.linalg.norm(x, axis=1)
    nw = np.linalg.norm(w, axis=1)
    live = nx >= epsilon
    tol = 4 * (x.shape[1] + 1) * np.finfo(float).eps
    best = np.zeros(len(x))
    # one matrix-vector product per target so each cosine is rounded the
    # same way whatever else is in the target set
    for j in range(len(w)):
        if nw[j] < epsilon:
            continue
        cross = x @ w[j]
        scale = nx * nw[j]
        col = np.zeros(len(x))
        np.divide(cross, scale, out=col, where=live)
        # rounding can leave cos(c*w, w) a few ulps below 1; detect exact
        # same-direction pairs from the Cauchy-Schwarz gap instead
        col[live & (cross > 0) & (np.abs(scale - cross) <= tol * scale)] = 1.0
        np.minimum(col, 1.0, out=col)
        np.maximum(best, col, out=best)
    return best


def similarity_to_targets(x, targets, measure: SimilarityMeasure = SimilarityMeasure()) -> float:
    w = _as_target_matrix(targets)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (w.shape[1],):
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, targets have p={w.shape[1]}")
    if measure.kind == UNIFORM:
        return 1.0
    return float(_cosine_max_rows(x[None, :], w, measure.epsilon)[0])


def score_dataset(data, targets, measure: SimilarityMeasure = SimilarityMeasure()) -> SimilarityScores:
    """Similarity of every training row to the target set."""
    x = data.features if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=np.float64))
    w = _as_target_matrix(targets)
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"dimension mismatch: data p={x.shape[1]}, targets p={w.shape[1]}")
    if measure.kind == UNIFORM:
        scores = np.ones(x.shape[0])
    else:
        scores = _cosine_max_rows(x, w, measure.epsilon)
    # cumsum accumulates strictly in index order, unlike pairwise np.sum
    total = float(np.cumsum(scores)[-1]) if len(scores) else 0.0
    return SimilarityScores(scores, total)
