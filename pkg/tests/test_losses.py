import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import central_diff, rel_err
from rdimkd.exceptions import LengthMismatch, MaskLengthMismatch, NotNormalized, ShapeMismatch, ValidationError
from rdimkd.linalg import SeededRng, gram_schmidt
from rdimkd.losses import (
    DistillSpec,
    cross_entropy,
    cross_entropy_grad,
    kl_soft_loss,
    kl_soft_loss_grad,
    mask_to_str,
    parse_mask,
    rdimkd_loss,
    rdimkd_loss_grad,
    reduced_dim,
    softmax,
    total_objective,
    total_objective_with_grads,
)
from rdimkd.projection import make_random_orthogonal

seeds = st.integers(0, 2**32)


def instance(seed, n=6, c=4, d=2):
    rng = SeededRng(seed)
    return rng.normal((n, c)), rng.normal((n, c)), gram_schmidt(rng.normal((c, d)))


class TestRdimkdLoss:
    def test_equal_features(self):
        ft, _, k = instance(0)
        assert rdimkd_loss(ft, ft, k, 3.0) == 0.0

    def test_hand_value(self):
        assert rdimkd_loss(np.eye(2), np.zeros((2, 2)), [[1.0], [0.0]], 1.0) == 0.5

    def test_square_orthogonal_is_unprojected(self):
        ft, fs, _ = instance(1)
        q = gram_schmidt(SeededRng(2).normal((4, 4)))
        ref = np.sum((ft - fs) ** 2) / (6 * 4)
        assert abs(rdimkd_loss(ft, fs, q, 1.0) - ref) <= 1e-12 * ref

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            rdimkd_loss(np.ones((2, 3)), np.ones((2, 4)), np.ones((3, 1)), 1.0)
        with pytest.raises(ShapeMismatch):
            rdimkd_loss(np.ones((2, 3)), np.ones((2, 3)), np.ones((4, 1)), 1.0)

    @given(seeds)
    def test_linear_in_alpha(self, seed):
        ft, fs, k = instance(seed)
        assert rdimkd_loss(ft, fs, k, 2.0) == 2 * rdimkd_loss(ft, fs, k, 1.0)

    @given(seeds, st.integers(2, 8), st.data())
    def test_contraction(self, seed, c, data):
        d = data.draw(st.integers(1, c - 1))
        ft, fs, k = instance(seed, 5, c, d)
        assert rdimkd_loss(ft, fs, k, 1.0) <= np.sum((ft - fs) ** 2) / (5 * d) + 1e-12


class TestRdimkdLossGrad:
    def test_zero_when_equal(self):
        ft, _, k = instance(0)
        np.testing.assert_array_equal(rdimkd_loss_grad(ft, ft, k, 1.0), 0.0)

    def test_hand_value(self):
        g = rdimkd_loss_grad(np.eye(2), np.zeros((2, 2)), [[1.0], [0.0]], 1.0)
        np.testing.assert_allclose(g, [[-1.0, 0.0], [0.0, 0.0]])

    def test_finite_differences_6x4(self):
        ft, fs, k = instance(3, 6, 4, 2)
        fd = central_diff(lambda m: rdimkd_loss(ft, m, k, 1.3), fs)
        assert rel_err(rdimkd_loss_grad(ft, fs, k, 1.3), fd) < 1e-6

    @given(seeds, st.integers(1, 8), st.integers(2, 8), st.data())
    def test_finite_differences_property(self, seed, n, c, data):
        d = data.draw(st.integers(1, c))
        ft, fs, k = instance(seed, n, c, d)
        fd = central_diff(lambda m: rdimkd_loss(ft, m, k, 0.7), fs)
        assert rel_err(rdimkd_loss_grad(ft, fs, k, 0.7), fd) < 1e-5


class TestKl:
    def test_beta_zero(self):
        assert kl_soft_loss([0.3, 0.7], [0.9, 0.1], 0.0) == 0.0

    def test_uniform(self):
        assert math.isclose(kl_soft_loss([0.5, 0.5], [0.5, 0.5], 1.0), math.log(2), rel_tol=1e-12)

    def test_one_hot(self):
        np.testing.assert_allclose(kl_soft_loss([1.0, 0.0], [0.9, 0.1], 2.0), 0.210721, atol=1e-6)

    def test_floor(self):
        assert np.isfinite(kl_soft_loss([0.0, 1.0], [1.0, 0.0], 1.0))

    def test_not_normalized(self):
        with pytest.raises(NotNormalized):
            kl_soft_loss([0.6, 0.6], [0.5, 0.5], 1.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            kl_soft_loss([0.5, 0.5], [0.2, 0.3, 0.5], 1.0)
        with pytest.raises(LengthMismatch):
            kl_soft_loss([1.0], [1.0], 1.0)

    def test_batch_mean(self):
        q = np.array([[0.5, 0.5], [1.0, 0.0]])
        p = np.array([[0.5, 0.5], [0.9, 0.1]])
        expect = (math.log(2) - math.log(0.9)) / 2
        assert math.isclose(kl_soft_loss(q, p, 1.0), expect, rel_tol=1e-12)

    @given(seeds, st.integers(2, 6))
    def test_gibbs(self, seed, c):
        rng = SeededRng(seed)
        q = softmax(rng.normal(c))
        at_q = kl_soft_loss(q, q, 1.0)
        for _ in range(50):
            assert at_q <= kl_soft_loss(q, softmax(rng.normal(c) * 2), 1.0) + 1e-12


class TestKlGrad:
    def test_zero_when_equal(self):
        np.testing.assert_array_equal(kl_soft_loss_grad([0.3, 0.7], [0.3, 0.7], 1.0), 0.0)

    def test_hand_value(self):
        np.testing.assert_allclose(kl_soft_loss_grad([1.0, 0.0], [0.5, 0.5], 1.0), [-0.5, 0.5])

    @given(seeds, st.integers(2, 6), st.floats(0.1, 3.0))
    def test_finite_differences_through_softmax(self, seed, c, beta):
        rng = SeededRng(seed)
        q, z = softmax(rng.normal(c)), rng.normal(c)
        g = kl_soft_loss_grad(q, softmax(z), beta)
        assert abs(np.sum(g)) <= 1e-12
        fd = central_diff(lambda v: kl_soft_loss(q, softmax(v), beta), z)
        assert rel_err(g, fd) < 1e-6

    def test_batched_finite_differences(self):
        rng = SeededRng(1)
        q, z = softmax(rng.normal((4, 3))), rng.normal((4, 3))
        fd = central_diff(lambda v: kl_soft_loss(q, softmax(v), 1.5), z)
        assert rel_err(kl_soft_loss_grad(q, softmax(z), 1.5), fd) < 1e-6


class TestCrossEntropy:
    def test_finite_differences(self):
        rng = SeededRng(0)
        z, y = rng.normal((5, 3)), np.array([0, 2, 1, 1, 0])
        assert rel_err(cross_entropy_grad(z, y), central_diff(lambda v: cross_entropy(v, y), z)) < 1e-6

    def test_uniform(self):
        assert math.isclose(cross_entropy(np.zeros((2, 2)), np.array([0, 1])), math.log(2))


class TestDistillSpec:
    def test_defaults(self):
        s = DistillSpec()
        assert (s.r, s.alpha, s.beta) == (4.0, 1.0, 0.0)

    @pytest.mark.parametrize("kw", [{"r": 0}, {"r": 0.5}, {"alpha": -1}, {"beta": -0.1}, {"mask": ""},
                                    {"mask": "012"}, {"method": "nope"}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            DistillSpec(**kw)

    def test_mask_forms(self):
        assert parse_mask("001111") == (False, False, True, True, True, True)
        assert parse_mask([1, 0]) == (True, False)
        assert mask_to_str(parse_mask("0101")) == "0101"

    @pytest.mark.parametrize("c,r,d", [(64, 4, 16), (10, 4, 3), (6, 4, 2), (3, 8, 1), (8, 1, 8)])
    def test_reduced_dim(self, c, r, d):
        assert reduced_dim(c, r) == d

    def test_inert(self):
        assert DistillSpec(alpha=0.0).inert
        assert DistillSpec(mask="00").inert
        assert not DistillSpec(mask="00", beta=1.0).inert
        assert not DistillSpec().inert


class TestTotalObjective:
    def taps(self, seed=0):
        ft, fs, k = instance(seed)
        return [(ft, fs, k), (ft, fs, k)]

    def test_all_masked(self):
        b = total_objective(1.5, self.taps(), DistillSpec(mask="00"), 0, kl_loss=0.25)
        assert b.total == 1.75 and b.kd_per_position == (0.0, 0.0)

    def test_half_mask(self):
        full = total_objective(0.0, self.taps(), DistillSpec(mask="11"), 0)
        half = total_objective(0.0, self.taps(), DistillSpec(mask="01"), 0)
        assert sum(half.kd_per_position) == sum(full.kd_per_position) / 2

    def test_alpha_beta_zero(self):
        b = total_objective(0.9, self.taps(), DistillSpec(alpha=0.0, mask="11"), 0)
        assert b.total == 0.9

    def test_mask_length(self):
        with pytest.raises(MaskLengthMismatch):
            total_objective(0.0, self.taps(), DistillSpec(mask="1"), 0)

    def test_shape_mismatch(self):
        ft, fs, _ = instance(0)
        with pytest.raises(ShapeMismatch):
            total_objective(0.0, [(ft, fs, np.ones((5, 1)))], DistillSpec(mask="1"), 0)

    def test_per_iteration_projector_resolved(self):
        ft, fs, _ = instance(0)
        p = make_random_orthogonal(SeededRng(1), 4, 2, per_iteration=True)
        spec = DistillSpec("rand-each", 2, 1.0, 0.0, "1")
        a = total_objective(0.0, [(ft, fs, p)], spec, 0)
        b = total_objective(0.0, [(ft, fs, p)], spec, 1)
        assert a.total != b.total
        assert a == total_objective(0.0, [(ft, fs, p)], spec, 0)

    @given(seeds, st.floats(0, 10), st.floats(0, 2), st.text("01", min_size=2, max_size=2))
    def test_breakdown_invariant(self, seed, task, kl, mask):
        b, grads = total_objective_with_grads(task, self.taps(seed), DistillSpec(mask=mask), 0, kl_loss=kl)
        expected = b.task + sum(b.kd_per_position) + b.kl
        assert abs(b.total - expected) <= 1e-12 * max(1.0, abs(expected))
        assert all(v >= 0 for v in b.kd_per_position)
        for on, g in zip(mask, grads):
            assert (g is None) == (on == "0")
