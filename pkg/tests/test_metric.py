"""Cosine distance, normalization, and modality softmax contracts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgloc.metric import (
    Embedding,
    ModalityWeights,
    ZeroNormError,
    cosine_distance,
    l2_normalize,
    modality_softmax,
)


def vec_strategy(dim=4):
    elems = st.floats(-100.0, 100.0, allow_nan=False, allow_infinity=False)
    return st.lists(elems, min_size=dim, max_size=dim).map(np.array).filter(
        lambda v: np.linalg.norm(v) > 1e-3
    )


class TestEmbedding:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Embedding(np.array([1.0, np.nan]))

    def test_normalized_flag_checked(self):
        with pytest.raises(ValueError):
            Embedding(np.array([3.0, 4.0]), normalized=True)
        Embedding(np.array([0.6, 0.8]), normalized=True)

    def test_dim(self):
        assert Embedding(np.zeros(7) + 1).dim == 7


class TestCosineDistance:
    def test_identical_is_zero(self):
        e = np.array([0.3, -1.2, 2.0])
        assert cosine_distance(e, e) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_is_one(self):
        e = np.array([0.3, -1.2, 2.0])
        assert cosine_distance(e, -e) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_is_half(self):
        assert cosine_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            cosine_distance(np.ones(2), np.ones(3))

    def test_zero_norm_rejected(self):
        with pytest.raises(ZeroNormError):
            cosine_distance(np.zeros(3), np.ones(3))

    def test_accepts_embedding_objects(self):
        a = Embedding(np.array([1.0, 0.0]))
        b = Embedding(np.array([0.0, 2.0]))
        assert cosine_distance(a, b) == 0.5

    @settings(max_examples=200, deadline=None)
    @given(vec_strategy(), vec_strategy(), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, a, b, c):
        assert cosine_distance(a, c * b) == pytest.approx(cosine_distance(a, b), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(vec_strategy(), vec_strategy())
    def test_symmetry_and_range(self, a, b):
        d = cosine_distance(a, b)
        assert d == cosine_distance(b, a)
        assert 0.0 <= d <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(vec_strategy(dim=6))
    def test_euclidean_monotone_relation(self, a):
        # for unit vectors, |a-b|^2 = 4 * delta(a, b)
        rng = np.random.default_rng(abs(hash(a.tobytes())) % 2**32)
        a = a / np.linalg.norm(a)
        b = rng.standard_normal(6)
        b /= np.linalg.norm(b)
        assert np.dot(a - b, a - b) == pytest.approx(4 * cosine_distance(a, b), abs=1e-9)

    def test_argmin_matches_euclidean_argmin(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal(8)
        q /= np.linalg.norm(q)
        cands = rng.standard_normal((50, 8))
        cands /= np.linalg.norm(cands, axis=1, keepdims=True)
        by_delta = min(range(50), key=lambda i: cosine_distance(q, cands[i]))
        by_euclid = min(range(50), key=lambda i: float(np.sum((q - cands[i]) ** 2)))
        assert by_delta == by_euclid


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(np.array([3.0, 4.0]))
        assert np.allclose(out.values, [0.6, 0.8])
        assert out.normalized

    def test_idempotent_on_unit(self):
        u = np.array([0.6, 0.8])
        assert np.allclose(l2_normalize(u).values, u, atol=1e-15)

    def test_zero_rejected(self):
        with pytest.raises(ZeroNormError):
            l2_normalize(np.zeros(2))


class TestModalitySoftmax:
    def test_uniform(self):
        w = modality_softmax(np.zeros(5))
        assert np.allclose(w, 0.2)

    def test_hand_computed_two_logits(self):
        # logits (0, ln 3): weights exp(0)/(1+3), exp(ln3)/(1+3)
        w = modality_softmax(np.array([0.0, math.log(3.0)]))
        assert np.allclose(w, [0.25, 0.75], atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            modality_softmax(np.array([0.0, np.inf]))

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-30, 30, allow_nan=False), min_size=2, max_size=5),
        st.floats(-10, 10, allow_nan=False),
    )
    def test_shift_invariance(self, logits, c):
        z = np.array(logits)
        assert np.allclose(modality_softmax(z), modality_softmax(z + c), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=1, max_size=5))
    def test_simplex(self, logits):
        w = modality_softmax(np.array(logits))
        assert np.all(w > 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_weights_property(self):
        mw = ModalityWeights(np.array([1.0, 1.0, 1.0]))
        assert np.allclose(mw.weights, 1 / 3)
