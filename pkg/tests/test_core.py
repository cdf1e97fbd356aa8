import math

import numpy as np
import pytest

from memento.core import (
    QuantizedEmbedding,
    cosine_similarity,
    dequantize,
    quantize_batch,
    quantize_norm_int8,
    quantized_cosine,
)
from memento.errors import DimensionMismatch, NonFinite


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine_similarity([1, 0], [1, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_hand_dot_product(self):
        # <a,b> = 8, norms 3 * 3
        assert cosine_similarity([1, 2, 2], [2, 1, 2]) == pytest.approx(8 / 9, abs=1e-12)

    def test_zero_vector_returns_zero(self):
        assert cosine_similarity([0, 0], [1, 2]) == 0.0
        assert cosine_similarity([1, 2], [0, 0]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_similarity([1, 0], [1, 0, 0])

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            cosine_similarity([np.nan, 0], [1, 0])
        with pytest.raises(NonFinite):
            cosine_similarity([1, 0], [np.inf, 0])

    def test_symmetry_exact(self, rng):
        for _ in range(200):
            a = rng.normal(size=8)
            b = rng.normal(size=8)
            assert cosine_similarity(a, b) == cosine_similarity(b, a)

    def test_scale_invariance(self, rng):
        for lam in (0.5, 3.0, 1e-3, 1e4):
            a = rng.normal(size=16)
            b = rng.normal(size=16)
            assert cosine_similarity(lam * a, b) == pytest.approx(
                cosine_similarity(a, b), abs=1e-6
            )


class TestQuantize:
    def test_three_four(self):
        q = quantize_norm_int8([3.0, 4.0])
        assert q.norm == pytest.approx(5.0)
        # 0.6*127 = 76.2 -> 76, 0.8*127 = 101.6 -> 102 (half away from zero)
        assert list(q.codes) == [76, 102]

    def test_zero_vector(self):
        q = quantize_norm_int8([0.0, 0.0, 0.0])
        assert q.norm == 0.0
        assert list(q.codes) == [0, 0, 0]
        assert np.array_equal(dequantize(q), np.zeros(3, dtype=np.float32))

    def test_unit_axis(self):
        q = quantize_norm_int8([1.0])
        assert q.norm == pytest.approx(1.0)
        assert list(q.codes) == [127]
        assert dequantize(q)[0] == pytest.approx(1.0)

    def test_rounding_half_away_from_zero(self):
        # components engineered to land exactly on .5 steps of 127*u
        q = quantize_norm_int8([76.5, math.sqrt(127.0**2 - 76.5**2)])
        assert q.codes[0] == 77

    def test_negation_closed(self, rng):
        v = rng.normal(size=32)
        q_pos = quantize_norm_int8(v)
        q_neg = quantize_norm_int8(-v)
        assert np.array_equal(q_neg.codes, -q_pos.codes)
        assert int(q_pos.codes.min()) >= -127

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            quantize_norm_int8([1.0, np.nan])


class TestDequantize:
    def test_hand_arithmetic(self):
        q = QuantizedEmbedding(norm=5.0, codes=np.array([76, 102], dtype=np.int8))
        out = dequantize(q)
        assert out[0] == pytest.approx(5 * 76 / 127, rel=1e-6)
        assert out[1] == pytest.approx(5 * 102 / 127, rel=1e-6)

    def test_zero(self):
        q = QuantizedEmbedding(norm=0.0, codes=np.zeros(2, dtype=np.int8))
        assert np.array_equal(dequantize(q), np.zeros(2, dtype=np.float32))

    def test_round_trip_per_component_bound(self, rng):
        # The round-trip error budget is one quantization step of the norm:
        # |deq_i - v_i| <= (0.5/127) * ||v|| for every component of any v.
        for d in (8, 64, 256):
            v = rng.normal(size=(2000, d))
            norms, codes = quantize_batch(v)
            back = norms[:, None].astype(np.float64) * codes.astype(np.float64) / 127.0
            rel = np.abs(back - v).max(axis=1) / np.linalg.norm(v, axis=1)
            assert rel.max() <= 1 / 127 + 1e-6


class TestQuantizedCosine:
    def test_self_similarity(self):
        q = quantize_norm_int8([1.0, 0.0])
        assert quantized_cosine(q, q) == 1.0

    def test_orthogonal(self):
        assert quantized_cosine(quantize_norm_int8([1, 0]), quantize_norm_int8([0, 1])) == 0.0

    def test_exact_space_oracle(self):
        got = quantized_cosine(quantize_norm_int8([3, 4]), quantize_norm_int8([4, 3]))
        assert got == pytest.approx(24 / 25, abs=1e-2)

    def test_matches_dequantized_cosine(self, rng):
        for d in (8, 64, 256):
            for _ in range(50):
                a = quantize_norm_int8(rng.normal(size=d))
                b = quantize_norm_int8(rng.normal(size=d))
                direct = quantized_cosine(a, b)
                via_floats = cosine_similarity(dequantize(a), dequantize(b))
                assert direct == pytest.approx(via_floats, abs=1e-6)

    def test_cosine_preservation(self, rng):
        for d in (8, 64, 256):
            a = rng.normal(size=(2000, d))
            b = rng.normal(size=(2000, d))
            na, ca = quantize_batch(a)
            nb, cb = quantize_batch(b)
            ca64, cb64 = ca.astype(np.float64), cb.astype(np.float64)
            qcos = np.einsum("ij,ij->i", ca64, cb64) / (
                np.linalg.norm(ca64, axis=1) * np.linalg.norm(cb64, axis=1)
            )
            exact = np.einsum("ij,ij->i", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            assert np.abs(qcos - exact).max() <= 2 / 127 + 1e-6

    def test_zero_norm_convention(self):
        z = quantize_norm_int8([0.0, 0.0])
        q = quantize_norm_int8([1.0, 0.0])
        assert quantized_cosine(z, q) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            quantized_cosine(quantize_norm_int8([1, 0]), quantize_norm_int8([1, 0, 0]))


class TestImmutability:
    def test_codes_read_only(self):
        q = quantize_norm_int8([3.0, 4.0])
        with pytest.raises(ValueError):
            q.codes[0] = 0
