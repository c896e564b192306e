"""Sinkhorn-Knopp, centering and ME-MAX behavior."""

import numpy as np
import pytest

from ensdistill import tensor as td
from ensdistill.regularize import CenterState, center_apply, center_update, memax_term, sinkhorn


class TestSinkhorn:
    def test_uniform_fixed_point_bit_exact(self):
        p = np.full((8, 4), 0.25)
        out = sinkhorn(p, iters=1)
        assert np.array_equal(out, p)

    def test_single_row(self):
        out = sinkhorn(np.array([[1.0, 3.0, 4.0]]), iters=1)
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-12)

    def test_marginals_converge(self):
        """50 cycles agree with a 10000-cycle convergence oracle."""
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 3.0, size=(8, 4))
        out = sinkhorn(p, iters=50)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(out.sum(axis=0), 2.0, atol=1e-6)
        oracle = sinkhorn(p, iters=10000)
        np.testing.assert_allclose(out, oracle, atol=1e-6)

    def test_positivity_preserved(self):
        rng = np.random.default_rng(1)
        out = sinkhorn(rng.uniform(0.01, 1.0, size=(6, 5)), iters=7)
        assert np.all(out > 0.0)

    def test_idempotent_at_fixed_point(self):
        rng = np.random.default_rng(2)
        converged = sinkhorn(rng.uniform(0.1, 2.0, size=(8, 4)), iters=10000)
        again = sinkhorn(converged, iters=1)
        assert np.max(np.abs(again - converged)) < 1e-9

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            sinkhorn(np.array([[1.0, 0.0], [1.0, 1.0]]), iters=3)

    def test_rejects_bad_iters(self):
        with pytest.raises(ValueError):
            sinkhorn(np.ones((2, 2)), iters=0)


class TestCentering:
    def test_zero_center_is_identity(self):
        logits = np.random.default_rng(3).normal(size=(4, 6))
        state = CenterState(np.zeros(6))
        np.testing.assert_array_equal(center_apply(logits, state), logits)

    def test_rate_zero_update_copies_batch_mean(self):
        state = CenterState(np.zeros(3), rate=0.0)
        constant = np.tile([[1.0, -2.0, 0.5]], (5, 1))
        center_update(state, constant)
        np.testing.assert_allclose(state.center, [1.0, -2.0, 0.5], atol=1e-15)

    def test_centering_can_flip_argmax(self):
        # column 0 dominates on average; subtracting its mean flips row 0
        logits = np.array([[2.0, 1.9], [2.0, 0.0]])
        state = CenterState(logits.mean(axis=0))
        raw_argmax = np.argmax(logits, axis=1)
        centered_argmax = np.argmax(center_apply(logits, state), axis=1)
        assert raw_argmax[0] == 0 and centered_argmax[0] == 1

    def test_geometric_convergence(self):
        rate = 0.7
        state = CenterState(np.zeros(2), rate=rate)
        target = np.tile([[4.0, -1.0]], (3, 1))
        dist_prev = np.linalg.norm(state.center - target[0])
        for _ in range(10):
            center_update(state, target)
            dist = np.linalg.norm(state.center - target[0])
            assert dist == pytest.approx(rate * dist_prev, rel=1e-12)
            dist_prev = dist

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            CenterState(np.zeros(2), rate=1.0)


class TestMemax:
    def test_uniform_predictions_hit_minimum(self):
        c = 8
        cube = np.full((10, 3, c), np.log(1.0 / c))
        term = memax_term(td.const(cube), lam=2.5)
        assert float(term.data) == pytest.approx(-2.5 * np.log(c), abs=1e-12)

    def test_lambda_zero(self):
        cube = np.random.default_rng(4).normal(size=(4, 2, 5))
        assert float(memax_term(td.const(cube), lam=0.0).data) == 0.0

    def test_default_msn_weight_is_representable(self):
        cube = np.log(np.full((4, 2, 5), 0.2))
        term = memax_term(td.const(cube), lam=4.0)
        assert np.isfinite(float(term.data))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        raw = rng.normal(size=(6, 2, 4))
        logp = raw - np.log(np.exp(raw).sum(axis=-1, keepdims=True))

        def loss(leaves):
            return memax_term(leaves["cube"], lam=1.7)

        report = td.finite_diff_check(loss, {"cube": logp}, h=1e-6)
        assert report["cube"] < 1e-5

    def test_rejects_negative_lambda(self):
        with pytest.raises(ValueError):
            memax_term(td.const(np.zeros((1, 1, 2))), lam=-0.1)
