import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pivotalign.numerics import Rng, cosine_sim, gaussian, softmax, unit_rows


class TestCosine:
    def test_identity(self):
        assert cosine_sim([1.0, 0.0], [1.0, 0.0]) == 1.0

    def test_orthogonal(self):
        assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_hand_value(self):
        # <(1,1),(1,0)> / (sqrt(2) * 1)
        assert cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.7071068, abs=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_zero_norm(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_sim([0.0, 0.0], [1.0, 0.0])

    @given(
        arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)),
        arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)),
    )
    def test_symmetric_exactly(self, a, b):
        if np.linalg.norm(a) <= 1e-12 or np.linalg.norm(b) <= 1e-12:
            return
        assert cosine_sim(a, b) == cosine_sim(b, a)

    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)),
           arrays(np.float64, 6, elements=st.floats(-10, 10)))
    def test_unit_distance_identity(self, a, b):
        # |x - y|^2 = 2 (1 - cos(x, y)) for unit vectors
        if np.linalg.norm(a) <= 1e-6 or np.linalg.norm(b) <= 1e-6:
            return
        x = a / np.linalg.norm(a)
        y = b / np.linalg.norm(b)
        lhs = float(np.sum((x - y) ** 2))
        rhs = 2.0 * (1.0 - cosine_sim(x, y))
        assert lhs == pytest.approx(rhs, abs=1e-5)


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_large_spread_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert p[0] == pytest.approx(1.0, abs=1e-30)
        assert p[1] == pytest.approx(0.0, abs=1e-30)
        assert np.all(np.isfinite(p))

    def test_closed_form(self):
        p = softmax(np.log([1.0, 2.0, 3.0]))
        assert np.allclose(p, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            softmax([1.0, np.nan])

    @given(arrays(np.float64, st.integers(1, 32), elements=st.floats(-1e4, 1e4)))
    def test_sums_to_one(self, logits):
        p = softmax(logits)
        assert np.all(p >= 0)
        assert float(p.sum()) == pytest.approx(1.0, abs=1e-6)


class TestGaussian:
    def test_sigma_zero(self):
        assert np.array_equal(gaussian(Rng(1), 4, 0.0), np.zeros(4))

    def test_deterministic(self):
        a = gaussian(Rng(99), 257, 1.3)
        b = gaussian(Rng(99), 257, 1.3)
        assert np.array_equal(a, b)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian(Rng(0), 3, -0.1)

    @settings(deadline=None)
    @given(st.integers(0, 2**64 - 1))
    def test_bitwise_stream(self, seed):
        assert np.array_equal(gaussian(Rng(seed), 32, 2.0), gaussian(Rng(seed), 32, 2.0))

    def test_moments_at_scale(self):
        # Law-of-large-numbers bounds; standard errors are ~1e-3.
        g = gaussian(Rng(7), 1_000_000, 1.0)
        assert abs(g.mean()) < 0.005
        assert abs(g.std() - 1.0) < 0.005


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(5).uniform(100), Rng(5).uniform(100))

    def test_stream_advances(self):
        r = Rng(5)
        assert not np.array_equal(r.uniform(10), r.uniform(10))

    def test_uniform_range(self):
        u = Rng(3).uniform(10_000)
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_spawn_children_distinct_and_deterministic(self):
        r = Rng(11)
        kids = [r.spawn(i).seed for i in range(20)]
        assert len(set(kids)) == 20
        assert kids == [Rng(11).spawn(i).seed for i in range(20)]

    def test_shuffled_is_permutation(self):
        p = Rng(4).shuffled(50)
        assert sorted(p.tolist()) == list(range(50))


class TestUnitRows:
    def test_normalizes(self):
        out = unit_rows(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [[0.6, 0.8]])

    def test_zero_row_named(self):
        with pytest.raises(ValueError, match="zero-norm row 1"):
            unit_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))
