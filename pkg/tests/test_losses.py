import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decompnet import tensor as T
from decompnet.errors import ShapeError
from decompnet.losses import (LossConfig, category_loss, hungarian_match, instance_loss,
                              smooth_l1, weighted_distance)
from decompnet.tensor import Parameter, Tensor


def brute_force_min(cost):
    n = len(cost)
    return min(sum(cost[t][perm[t]] for t in range(n)) for perm in itertools.permutations(range(n)))


def p64(arr):
    return Parameter(np.asarray(arr, dtype=np.float64), dtype=np.float64)


class TestWeightedDistance:
    def test_equal_maps(self):
        y = np.random.default_rng(0).random((4, 4))
        assert weighted_distance(Tensor(y), y, 0.3).item() == 0.0

    def test_hand_value(self):
        d = weighted_distance(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]), 0.3)
        assert abs(d.item() - math.sqrt(0.4)) < 1e-6

    def test_zero_target_is_scaled_norm(self):
        assert weighted_distance(Tensor(np.array([3.0, 4.0])), np.zeros(2), 1.0).item() == 5.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            weighted_distance(Tensor(np.zeros(3)), np.zeros(4), 1.0)

    def test_gradient_zero_at_target(self):
        y = np.array([1.0, 0.0, 2.0])
        x = p64(y.copy())
        weighted_distance(x, y, 0.5).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 3.0))
    def test_lower_bound(self, seed, p):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=6), rng.random(6) * (rng.random(6) > 0.5)
        d = weighted_distance(Tensor(x), y, p).item()
        bound = math.sqrt(p) * np.linalg.norm(x - y)
        assert d >= bound * (1 - 1e-12)
        if not y.any():
            assert d == pytest.approx(bound, rel=1e-12)
        else:
            assert d > bound


class TestCategoryLoss:
    def test_exact_targets(self):
        t = np.random.default_rng(1).random((2, 3, 5, 5))
        assert category_loss(Tensor(t), t, LossConfig()).item() == 0.0

    def test_single_blob(self):
        target = np.zeros((1, 1, 6, 6))
        target[0, 0, 1:3, 2:5] = 1  # k = 6 pixels
        loss = category_loss(Tensor(np.zeros_like(target)), target, LossConfig(lam=1.0))
        assert loss.item() == pytest.approx(math.sqrt(12))

    def test_gradient_at_minimum(self):
        t = np.random.default_rng(2).random((1, 2, 3, 3))
        f = p64(t.copy())
        category_loss(f, t, LossConfig()).backward()
        np.testing.assert_array_equal(f.grad, 0)

    def test_category_mismatch(self):
        with pytest.raises(ShapeError):
            category_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 2, 4, 4)), LossConfig())

    def test_sum_of_distances(self):
        rng = np.random.default_rng(3)
        f, t = rng.normal(size=(2, 3, 4, 4)), rng.random((2, 3, 4, 4))
        expected = sum(weighted_distance(Tensor(f[i, c]), t[i, c], 0.3).item()
                       for i in range(2) for c in range(3))
        assert category_loss(Tensor(f), t, LossConfig(lam=0.3)).item() == pytest.approx(expected, rel=1e-6)


class TestHungarian:
    def test_zero_diagonal(self):
        m = hungarian_match([[0, 1], [1, 0]])
        assert m.assignment == (0, 1) and m.total_cost == 0

    def test_two_by_two(self):
        m = hungarian_match([[1, 2], [2, 1]])
        assert m.assignment == (0, 1) and m.total_cost == 2

    def test_anti_diagonal(self):
        m = hungarian_match([[5, 1], [1, 5]])
        assert m.assignment == (1, 0) and m.total_cost == 2

    def test_non_square(self):
        with pytest.raises(ValueError):
            hungarian_match(np.zeros((2, 3)))

    def test_tie_prefers_lowest_index(self):
        assert hungarian_match(np.ones((3, 3))).assignment == (0, 1, 2)

    def test_random_6x6_against_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            cost = rng.random((6, 6))
            m = hungarian_match(cost)
            assert sorted(m.assignment) == list(range(6))
            assert m.total_cost == pytest.approx(sum(cost[t, m.assignment[t]] for t in range(6)))
            assert m.total_cost <= brute_force_min(cost) + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 2**31))
    def test_no_enumerated_permutation_is_cheaper(self, n, seed):
        cost = np.random.default_rng(seed).integers(0, 5, size=(n, n)).astype(float)
        assert hungarian_match(cost).total_cost == brute_force_min(cost)


def blob_masks():
    m = np.zeros((3, 8, 8))
    m[0, 1:3, 1:3] = 1
    m[1, 5:7, 4:7] = 1
    m[2, 2:4, 5:8] = 1
    return m


class TestInstanceLoss:
    def test_perfect_prediction(self):
        m = blob_masks()
        assert instance_loss([Tensor(x) for x in m], m, LossConfig()).item() == 0.0

    def test_swapped_order_resolved_by_matching(self):
        m = blob_masks()[:2]
        loss, match = instance_loss([Tensor(m[1]), Tensor(m[0])], m, LossConfig(), return_match=True)
        assert loss.item() == 0.0
        assert match.assignment == (1, 0)

    def test_merged_blob_penalized_by_instance_term_only(self):
        m = blob_masks()[:2]
        preds = [Tensor(m[0] + m[1]), Tensor(np.zeros_like(m[0]))]
        cfg_sum_only = LossConfig(lam=1.0, gamma=1.0, eta=1.0)
        total = instance_loss(preds, m, cfg_sum_only).item()
        stop_term = weighted_distance(preds[0] + preds[1], m.sum(0), 1.0).item()
        assert stop_term == 0.0
        assert total > 0

    def test_count_mismatch(self):
        m = blob_masks()
        with pytest.raises(ValueError):
            instance_loss([Tensor(m[0])], m, LossConfig())

    def test_value_is_sum_of_terms(self):
        rng = np.random.default_rng(5)
        m = blob_masks()
        g = rng.random((3, 8, 8))
        cfg = LossConfig(0.3, 0.7, 1.5)
        loss, match = instance_loss([Tensor(x) for x in g], m, cfg, return_match=True)
        expected = sum(weighted_distance(Tensor(g[t]), m[match.assignment[t]], 0.3).item() for t in range(3))
        expected += 1.5 * weighted_distance(Tensor(g.sum(0)), m.sum(0), 0.7).item()
        assert loss.item() == pytest.approx(expected, rel=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        m = blob_masks()
        gs = [p64(rng.random((8, 8))) for _ in range(3)]
        err = T.grad_check(lambda: instance_loss(gs, m, LossConfig(0.3, 0.3, 1.0)), gs)
        assert err < 1e-4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_invariant_under_joint_permutations(self, seed):
        rng = np.random.default_rng(seed)
        m = (rng.random((4, 6, 6)) > 0.6).astype(float)
        g = rng.random((4, 6, 6))
        cfg = LossConfig(1.0, 1.0, 1.0)
        base = instance_loss([Tensor(x) for x in g], m, cfg).item()
        pg, pm = rng.permutation(4), rng.permutation(4)
        assert instance_loss([Tensor(x) for x in g[pg]], m[pm], cfg).item() == base


class TestSmoothL1:
    def test_equal(self):
        assert smooth_l1(Tensor(np.full(4, 0.3)), np.full(4, 0.3)).item() == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1(Tensor([0.5]), [0.0]).item() == pytest.approx(0.125, abs=1e-6)

    def test_linear_branch(self):
        assert smooth_l1(Tensor([3.0]), [0.0]).item() == pytest.approx(2.5, abs=1e-6)

    def test_gradient_clamped(self):
        x = p64([3.0, -0.25, -4.0, 0.0])
        smooth_l1(x, np.zeros(4)).backward()
        np.testing.assert_allclose(x.grad, [1.0, -0.25, -1.0, 0.0])

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        x = p64(rng.normal(scale=2.0, size=(5, 4)))
        y = rng.random((5, 4))
        assert T.grad_check(lambda: smooth_l1(x, y), [x]) < 1e-4
