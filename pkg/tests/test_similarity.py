import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from targeted.data import Dataset, Task, TargetSet
from targeted.similarity import (
    SimilarityMeasure,
    cosine,
    score_dataset,
    similarity_to_targets,
)


def brute_cosine(x, w):
    dot = sum(a * b for a, b in zip(x, w))
    nx = math.sqrt(sum(a * a for a in x))
    nw = math.sqrt(sum(b * b for b in w))
    return dot / (nx * nw)


def test_cosine_examples():
    assert cosine([1, 1, 0], [1, 0, 0]) == pytest.approx(0.7071067812, abs=1e-10)
    assert cosine([3, -2, 5], [3, -2, 5]) == 1.0
    assert cosine([1, 0], [0, 1]) == 0.0


def test_cosine_zero_vector_is_dissimilar():
    assert cosine([0, 0, 0], [1, 2, 3]) == 0.0
    assert cosine([1e-12, 0], [1, 0]) == 0.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        cosine([1, 2], [1, 2, 3])


def test_similarity_examples():
    targets = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    assert similarity_to_targets([1, 1, 0], targets) == pytest.approx(0.7071067812, abs=1e-10)
    assert similarity_to_targets([-2.0, 0, 0], targets[:1]) == 0.0
    assert similarity_to_targets([0, 0, 1.0], targets) == 1.0


def test_similarity_accepts_target_set():
    ts = TargetSet(np.array([[0.0, 2.0]]), np.array([1.0]))
    assert similarity_to_targets([0.0, 5.0], ts) == 1.0


def test_similarity_errors():
    with pytest.raises(ValueError):
        similarity_to_targets([1, 2], np.zeros((0, 2)))
    with pytest.raises(ValueError):
        similarity_to_targets([1, 2, 3], np.ones((1, 2)))


def test_score_dataset_examples():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, math.sqrt(3) / 2]])
    s = score_dataset(x, np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(s.scores, [1.0, 0.0, 0.5], atol=1e-15)
    assert s.total_mass == pytest.approx(1.5, abs=1e-15)


def test_score_dataset_all_orthogonal():
    x = np.array([[0.0, 1.0], [0.0, -3.0], [-1.0, 0.0]])
    s = score_dataset(x, np.array([[1.0, 0.0]]))
    assert s.total_mass == 0.0


def test_score_dataset_matches_double_loop(rng):
    x = rng.standard_normal((50, 8))
    w = rng.standard_normal((3, 8))
    s = score_dataset(Dataset(x, np.zeros(50), Task.regression()), w)
    for i in range(50):
        expected = max([0.0] + [brute_cosine(x[i], w[j]) for j in range(3)])
        assert abs(s.scores[i] - expected) < 1e-12
    assert abs(s.total_mass - sum(s.scores)) < 1e-12


def test_uniform_measure():
    s = score_dataset(np.array([[1.0, 0], [-1.0, 0]]), np.array([[1.0, 0]]), SimilarityMeasure("uniform"))
    np.testing.assert_array_equal(s.scores, [1.0, 1.0])


def test_unknown_measure():
    with pytest.raises(ValueError):
        SimilarityMeasure("euclid")


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def problems(draw):
    p = draw(st.integers(1, 12))
    g = draw(st.integers(1, 5))
    x = draw(arrays(np.float64, p, elements=finite))
    w = draw(arrays(np.float64, (g, p), elements=finite))
    return x, w


@settings(max_examples=300, deadline=None)
@given(problems())
def test_score_in_unit_interval(problem):
    x, w = problem
    s = similarity_to_targets(x, w)
    assert 0.0 <= s <= 1.0


@settings(max_examples=300, deadline=None)
@given(problems(), st.floats(1e-3, 1e3))
def test_scale_invariance(problem, c):
    x, w = problem
    if np.linalg.norm(x) < 1e-4 or np.any(np.linalg.norm(w, axis=1) < 1e-4):
        return  # scaling could cross the zero-norm guard
    base = similarity_to_targets(x, w)
    assert abs(similarity_to_targets(c * x, w) - base) <= 1e-12
    w2 = w.copy()
    w2[0] *= c
    assert abs(similarity_to_targets(x, w2) - base) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(problems(), arrays(np.float64, 12, elements=finite))
def test_adding_a_target_never_lowers_score(problem, extra):
    x, w = problem
    more = np.vstack([w, extra[: w.shape[1]]])
    assert similarity_to_targets(x, more) >= similarity_to_targets(x, w)


@settings(max_examples=200, deadline=None)
@given(problems(), st.floats(1e-3, 1e3), st.data())
def test_positive_multiple_of_target_scores_one(problem, c, data):
    _, w = problem
    j = data.draw(st.integers(0, w.shape[0] - 1))
    if np.linalg.norm(w[j]) < 1e-4:
        return
    assert similarity_to_targets(c * w[j], w) == 1.0
