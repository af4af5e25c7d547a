import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from flowmixup import tensor as T
from flowmixup.errors import ConfigError, DimensionError, StateError
from flowmixup.mixing import MixingModule, MixSpec, mix_pair, route_mixed_grad, sample_p


def spec(p, perm, op=True):
    return MixSpec(alpha=1.0, op_forward=op, p=p, permutation=np.asarray(perm))


class TestSampleP:
    def test_uniform_when_alpha_one(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_p(1.0, rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.01
        counts, _ = np.histogram(draws, bins=10, range=(0, 1))
        assert stats.chisquare(counts).pvalue > 0.001

    @pytest.mark.parametrize("alpha", [0.2, 1.0, 3.0, 10.0])
    def test_in_unit_interval(self, alpha):
        rng = np.random.default_rng(1)
        draws = np.array([sample_p(alpha, rng) for _ in range(100_000)])
        assert draws.min() >= 0.0 and draws.max() <= 1.0

    def test_alpha_three_moments(self):
        rng = np.random.default_rng(2)
        draws = np.array([sample_p(3.0, rng) for _ in range(100_000)])
        # Beta(a, a) variance: a*a / ((2a)^2 (2a+1)) = 1 / (4 (2a+1))
        expected_var = 3.0 * 3.0 / ((6.0 ** 2) * 7.0)
        assert abs(draws.mean() - 0.5) < 0.01
        assert abs(draws.var() - expected_var) < 0.1 * expected_var

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ConfigError):
            sample_p(alpha, np.random.default_rng())


class TestMixPair:
    def test_half_swap(self):
        z, y = mix_pair(np.array([[1.0], [3.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), spec(0.5, [1, 0]))
        np.testing.assert_array_equal(z, [[2.0], [2.0]])
        np.testing.assert_array_equal(y, [[0.5, 0.5], [0.5, 0.5]])

    def test_p_one_is_identity(self):
        z0 = np.random.default_rng(0).normal(size=(4, 3))
        z, _ = mix_pair(z0, np.zeros((4, 2)), spec(1.0, [3, 2, 1, 0]))
        np.testing.assert_array_equal(z, z0)

    def test_label_arithmetic(self):
        _, y = mix_pair(np.zeros((2, 1)), np.array([[1.0, 0, 1], [0, 0, 1]]), spec(0.6, [1, 0]))
        np.testing.assert_allclose(y[0], [0.6, 0.0, 1.0], rtol=0, atol=1e-15)

    def test_permutation_length_mismatch(self):
        with pytest.raises(DimensionError):
            mix_pair(np.zeros((3, 1)), np.zeros((3, 1)), spec(0.5, [1, 0]))

    def test_permutation_must_be_bijection(self):
        with pytest.raises(ConfigError):
            MixSpec(p=0.5, permutation=np.array([0, 0, 1]))


class TestModuleForward:
    def test_op_forward_doubles_flow(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 1, 8))
        m = MixingModule()
        out, labels = m.forward_arrays(z, np.zeros((4, 1, 3)), spec(0.3, rng.permutation(4)))
        assert out.shape == (4, 2, 8) and labels.shape == (4, 2, 3)
        assert out[:, :1].tobytes() == z.tobytes()

    def test_degraded_keeps_flow(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(4, 1, 8))
        s = spec(0.3, rng.permutation(4), op=False)
        out, _ = MixingModule(op_forward=False).forward_arrays(z, np.zeros((4, 1, 3)), s)
        assert out.shape == (4, 1, 8)
        np.testing.assert_array_equal(out, 0.3 * z + 0.7 * z[s.permutation])

    def test_p_one_slot_one_is_permuted_copy(self):
        z = np.random.default_rng(2).normal(size=(4, 1, 5))
        out, _ = MixingModule().forward_arrays(z, np.zeros((4, 1, 2)), spec(1.0, [2, 0, 3, 1]))
        np.testing.assert_array_equal(out[:, 1], z[:, 0])

    def test_non_finite_rejected(self):
        z = np.full((2, 1, 3), np.nan)
        from flowmixup.errors import NumericError
        with pytest.raises(NumericError):
            MixingModule().forward_arrays(z, np.zeros((2, 1, 1)), spec(0.5, [1, 0]))

    def test_sentinel_labels_follow_features(self):
        """Each row carries its index as both feature and one-hot label; the
        mixed feature must decode to the mixed label."""
        B = 6
        z = np.arange(B, dtype=float).reshape(B, 1, 1)
        y = np.eye(B).reshape(B, 1, B)
        s = spec(0.7, np.random.default_rng(3).permutation(B))
        out, labels = MixingModule().forward_arrays(z, y, s)
        decoded = labels[:, 1] @ np.arange(B)
        np.testing.assert_allclose(decoded, out[:, 1, 0], rtol=1e-14)
        np.testing.assert_allclose(labels[:, 1].sum(axis=1), 1.0, rtol=1e-14)


class TestModuleBackward:
    def test_identity_permutation_example(self):
        m = MixingModule()
        z = T.parameter(np.zeros((2, 1, 1)), "z")
        out, _ = m(z, np.zeros((2, 1, 1)), spec(1.0, [0, 1]))
        g = np.array([[[2.0], [4.0]], [[-4.0], [0.0]]])
        np.testing.assert_array_equal(m.backward_arrays(g), [[[3.0]], [[-2.0]]])

    def test_equal_branches_preserve_magnitude(self):
        rng = np.random.default_rng(4)
        m = MixingModule()
        s = spec(0.4, np.arange(5))
        m(T.parameter(rng.normal(size=(5, 1, 3)), "z"), np.zeros((5, 1, 2)), s)
        g = rng.normal(size=(5, 1, 3))
        np.testing.assert_allclose(m.backward_arrays(np.concatenate([g, g], axis=1)), g, rtol=1e-15)

    def test_flow_mismatch_is_state_error(self):
        m = MixingModule()
        m(T.parameter(np.zeros((2, 1, 1)), "z"), np.zeros((2, 1, 1)), spec(0.5, [1, 0]))
        with pytest.raises(StateError):
            m.backward_arrays(np.zeros((2, 3, 1)))

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            MixingModule().backward_arrays(np.zeros((2, 2, 1)))

    @pytest.mark.parametrize("op", [True, False])
    def test_swap_permutation_matches_finite_differences(self, op):
        """Tape gradient equals the finite-difference gradient of the module's
        forward map, times 1/2 when the originals pass through."""
        rng = np.random.default_rng(5)
        z = T.parameter(rng.normal(size=(2, 1, 3)), "z")
        weights = rng.normal(size=(2, 2 if op else 1, 3))
        m = MixingModule(op_forward=op)
        s = spec(0.7, [1, 0], op)

        def loss():
            out, _ = m(z, np.zeros((2, 1, 1)), s)
            return T.sum_all(T.mul(T.square(out), T.Tensor(weights)))

        report = T.finite_diff_check(loss, [z], scales={"z": 0.5 if op else 1.0})
        assert report.max_rel_error < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.booleans())
    def test_backward_is_half_transpose(self, seed, op):
        """<M z, g> = <z, M^T g>; the module returns M^T g / 2 (or M^T g when degraded)."""
        rng = np.random.default_rng(seed)
        B, F = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        s = spec(float(rng.random()), rng.permutation(B), op)
        m = MixingModule(op_forward=op)
        z = rng.normal(size=(B, F, 3))
        out, _ = m.forward_arrays(z, np.zeros((B, F, 1)), s)
        m(T.parameter(z, "z"), np.zeros((B, F, 1)), s)
        g = rng.normal(size=out.shape)
        back = m.backward_arrays(g)
        scale = 0.5 if op else 1.0
        assert np.isclose(np.sum(out * g) * scale, np.sum(z * back), rtol=1e-10, atol=1e-12)


def test_route_mixed_grad_explicit():
    g = np.array([[1.0], [10.0], [100.0]])
    s = spec(0.25, [2, 0, 1])
    # z_mixed[i] = .25 z[i] + .75 z[perm[i]]; z[0] feeds rows 0 and 1
    expected = np.array([[0.25 * 1 + 0.75 * 10], [0.25 * 10 + 0.75 * 100], [0.25 * 100 + 0.75 * 1]])
    np.testing.assert_allclose(route_mixed_grad(g, s), expected, rtol=1e-15)
