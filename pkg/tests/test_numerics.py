import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corematch import numerics as nx
from corematch.errors import (
    DegenerateDistribution,
    DegenerateMatrix,
    EmptySet,
    InvalidParam,
    ShapeError,
    TooFewPoints,
    ZeroVector,
)

from oracles import knee_bruteforce

fractions = st.floats(min_value=1e-3, max_value=1.0, allow_nan=False)


class TestCeilFraction:
    def test_float_noise_does_not_round_up(self):
        assert 0.28 * 25 > 7
        assert nx.ceil_fraction(0.28, 25) == 7

    @pytest.mark.parametrize("frac,n,want", [(0.2, 5, 1), (0.4, 5, 2), (0.34, 3, 2), (1.0, 7, 7), (0.01, 3, 1)])
    def test_values(self, frac, n, want):
        assert nx.ceil_fraction(frac, n) == want

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5, float("nan")])
    def test_check_fraction_rejects(self, bad):
        with pytest.raises(InvalidParam):
            nx.check_fraction(bad, "rho")


class TestQuantileThreshold:
    @pytest.mark.parametrize("rho,want", [(0.2, 5), (0.4, 4)])
    def test_top_fraction(self, rho, want):
        assert nx.quantile_threshold([1, 2, 3, 4, 5], rho) == want

    def test_duplicate_maximum(self):
        assert nx.quantile_threshold([0.9, 0.9, 0.1], 0.34) == 0.9

    def test_errors(self):
        with pytest.raises(EmptySet):
            nx.quantile_threshold([], 0.5)
        with pytest.raises(InvalidParam):
            nx.quantile_threshold([1.0], 0.0)

    @given(st.lists(st.floats(0.01, 100, allow_nan=False), min_size=1, max_size=60, unique=True), fractions)
    def test_keeps_exactly_ceil(self, values, rho):
        v = nx.quantile_threshold(values, rho)
        assert sum(a >= v for a in values) == nx.ceil_fraction(rho, len(values))

    @given(st.lists(st.floats(0.01, 100, allow_nan=False), min_size=1, max_size=30), fractions, st.randoms())
    def test_permutation_invariant(self, values, rho, rnd):
        shuffled = values[:]
        rnd.shuffle(shuffled)
        assert nx.quantile_threshold(values, rho) == nx.quantile_threshold(shuffled, rho)


class TestKnee:
    def test_hand_computed(self):
        assert nx.knee_threshold([10, 9, 8, 2, 1]) == (8, 2)

    def test_hand_computed_distances(self):
        # distances to the chord (0,10)->(4,1), in raw units
        length = math.hypot(4, 9)
        d = [abs(-9 * i - 4 * (c - 10)) / length for i, c in enumerate([10, 9, 8, 2, 1])]
        np.testing.assert_allclose(d[1:4], [0.508, 1.015, 0.508], atol=1e-3)

    def test_all_equal(self):
        with pytest.raises(DegenerateDistribution):
            nx.knee_threshold([5, 5, 5, 5])

    @pytest.mark.parametrize("counts", [[], [3], [3, 1]])
    def test_too_few(self, counts):
        with pytest.raises(TooFewPoints):
            nx.knee_threshold(counts)

    def test_rejects_negative_and_fractional(self):
        with pytest.raises(InvalidParam):
            nx.knee_threshold([3, -1, 2])
        with pytest.raises(InvalidParam):
            nx.knee_threshold([3.5, 1, 2])

    def test_two_level_cliff(self):
        rng = np.random.default_rng(0)
        counts = rng.permutation([100] * 9 + [10] * 9)
        thr, idx = nx.knee_threshold(counts)
        assert thr == 100
        assert sum(c >= thr for c in counts) == 9

    def test_tie_goes_to_smaller_index(self):
        # symmetric curve: indices 1 and 3 are equally far, 2 is on the chord
        assert nx.knee_threshold([4, 4, 2, 0, 0])[1] == 1

    @given(st.lists(st.integers(0, 60), min_size=3, max_size=40))
    def test_matches_bruteforce(self, counts):
        if len(set(counts)) == 1:
            return
        assert nx.knee_threshold(counts) == knee_bruteforce(counts)

    @given(st.lists(st.integers(0, 60), min_size=3, max_size=30), st.randoms(), st.integers(1, 9))
    def test_permutation_and_scale(self, counts, rnd, k):
        if len(set(counts)) == 1:
            return
        base = nx.knee_threshold(counts)
        shuffled = counts[:]
        rnd.shuffle(shuffled)
        assert nx.knee_threshold(shuffled) == base
        thr, idx = nx.knee_threshold([k * c for c in counts])
        assert idx == base[1] and thr == k * base[0]


class TestVectors:
    @pytest.mark.parametrize("u,v,want", [((1, 0), (0, 1), 0.0), ((2, 0), (5, 0), 1.0), ((3, 4), (1, 0), 0.6)])
    def test_cosine(self, u, v, want):
        assert nx.cosine(u, v) == pytest.approx(want, abs=1e-15)

    def test_cosine_errors(self):
        with pytest.raises(ZeroVector):
            nx.cosine((0, 0), (1, 0))
        with pytest.raises(ShapeError):
            nx.cosine((1, 0), (1, 0, 0))

    @pytest.mark.parametrize("w,t,want", [((1.5, 2), (1, 0), 1.5), ((0, 1), (1, 0), 0.0), ((1.5, 2.0), (1, 0), 1.5)])
    def test_projection(self, w, t, want):
        assert nx.projection_magnitude(w, t) == pytest.approx(want, abs=1e-15)

    def test_projection_two_factorisations_agree(self):
        w = 0.5 * np.array([3.0, 4.0])
        assert nx.projection_magnitude(w, (1, 0)) == pytest.approx(np.linalg.norm(w) * nx.cosine(w, (1, 0)))

    def test_projection_signed(self):
        assert nx.projection_magnitude((-2, 1), (1, 0)) == -2.0

    def test_projection_zero_target(self):
        with pytest.raises(ZeroVector):
            nx.projection_magnitude((1, 1), (0, 0))

    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_projection_linear(self, seed, alpha):
        rng = np.random.default_rng(seed)
        w, t = rng.standard_normal(6), rng.standard_normal(6)
        assert nx.projection_magnitude(alpha * w, t) == pytest.approx(alpha * nx.projection_magnitude(w, t), rel=1e-12, abs=1e-12)

    @given(st.integers(0, 2**31), st.integers(2, 12))
    def test_cosine_rotation_invariant(self, seed, n):
        rng = np.random.default_rng(seed)
        q = nx.random_orthogonal(rng, n, n)
        u, v = rng.standard_normal(n), rng.standard_normal(n)
        assert abs(nx.cosine(q @ u, q @ v) - nx.cosine(u, v)) <= 1e-12

    def test_cosine_rows_zero_row_is_nan(self):
        out = nx.cosine_rows(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1.0, 0.0]))
        assert out[0] == 1.0 and np.isnan(out[1])


class TestElementwise:
    def test_softmax(self):
        np.testing.assert_array_equal(nx.softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_softmax_sums_to_one(self, row):
        assert abs(nx.softmax(np.array(row)).sum() - 1.0) <= 1e-12

    def test_softmax_masked(self):
        np.testing.assert_allclose(nx.softmax(np.array([0.0, -np.inf])), [1.0, 0.0])

    def test_relu(self):
        np.testing.assert_array_equal(nx.activation(np.array([-1.0, 2.0]), "relu"), [0.0, 2.0])

    def test_silu_sign(self):
        out = nx.activation(np.array([-0.5, 0.5]), "silu")
        assert out[0] < 0 < out[1]
        np.testing.assert_allclose(out, [-0.5 / (1 + math.exp(0.5)), 0.5 / (1 + math.exp(-0.5))], rtol=1e-14)

    def test_silu_extreme_inputs_finite(self):
        out = nx.activation(np.array([-1e4, 1e4]), "silu")
        assert np.all(np.isfinite(out))

    def test_unknown_activation(self):
        with pytest.raises(InvalidParam):
            nx.activation(np.zeros(2), "gelu")

    def test_layer_norm_plain(self):
        x = np.array([[1.0, 2.0, 3.0, 4.0]])
        y = nx.layer_norm(x, eps=0.0)
        np.testing.assert_allclose(y.mean(), 0.0, atol=1e-15)
        np.testing.assert_allclose(y.var(), 1.0, rtol=1e-14)

    def test_layer_norm_shape_checks(self):
        with pytest.raises(ShapeError):
            nx.layer_norm(np.ones((2, 3)), gain=np.ones(4))

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
        np.testing.assert_array_equal(nx.matmul(np.eye(2), np.ones((2, 3))), np.ones((2, 3)))


class TestScaledIdentity:
    def test_exact(self):
        dev, lam = nx.scaled_identity_deviation(9.0 * np.eye(4))
        assert dev == 0.0 and lam == 9.0

    def test_rank_one(self):
        w = np.array([[1.0, 0.0], [1.0, 0.0]])
        dev, lam = nx.scaled_identity_deviation(w @ w.T)
        assert lam == 1.0 and dev == pytest.approx(1.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateMatrix):
            nx.scaled_identity_deviation(np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            nx.scaled_identity_deviation(np.ones((2, 3)))

    @pytest.mark.parametrize("rows,cols", [(5, 5), (8, 3), (3, 8)])
    def test_random_orthogonal(self, rows, cols):
        q = nx.random_orthogonal(np.random.default_rng(1), rows, cols)
        assert q.shape == (rows, cols)
        small = q.T @ q if rows >= cols else q @ q.T
        np.testing.assert_allclose(small, np.eye(min(rows, cols)), atol=1e-13)
