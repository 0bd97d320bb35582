import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssc import tensor as T
from ssc.tensor import Tensor


class TestSoftmaxRows:
    def test_single_column_forces_one(self):
        out = T.softmax_rows(Tensor([[5.0]]))
        np.testing.assert_allclose(out.data, [[1.0]], atol=1e-15)

    def test_closed_form_ln3(self):
        out = T.softmax_rows(Tensor([[math.log(3.0), 0.0]]))
        np.testing.assert_allclose(out.data, [[0.75, 0.25]], atol=1e-12)

    def test_matches_exp_sum_oracle(self):
        a = np.random.default_rng(11).normal(size=(4, 3))
        out = T.softmax_rows(Tensor(a)).data
        expected = np.zeros_like(a)
        for i in range(4):
            e = [math.exp(v) for v in a[i]]
            expected[i] = np.array(e) / sum(e)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_rows_sum_to_one(self):
        a = np.random.default_rng(2).normal(size=(7, 5)) * 30
        out = T.softmax_rows(Tensor(a)).data
        np.testing.assert_allclose(out.sum(axis=1), np.ones(7), atol=1e-9)
        assert (out >= 0).all()

    def test_non_finite_logits_rejected(self):
        with pytest.raises(ValueError, match="non-finite logits"):
            T.softmax_rows(Tensor([[1.0, np.inf]]))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
           st.floats(-100, 100))
    def test_invariant_to_per_row_constant(self, row, shift):
        base = T.softmax_rows(Tensor([row])).data
        shifted = T.softmax_rows(Tensor([[v + shift for v in row]])).data
        np.testing.assert_allclose(base, shifted, atol=1e-9)


class TestRowMaxPool:
    def test_direct_max(self):
        pooled, winners = T.row_max_pool(Tensor([[0.2, 0.9], [0.7, 0.1]]))
        np.testing.assert_allclose(pooled.data, [0.7, 0.9])
        np.testing.assert_array_equal(winners, [1, 0])

    def test_single_row_identity(self):
        row = np.array([[3.0, -1.0, 0.5]])
        pooled, winners = T.row_max_pool(Tensor(row))
        np.testing.assert_allclose(pooled.data, row[0])
        np.testing.assert_array_equal(winners, [0, 0, 0])

    def test_backward_routes_only_to_winners(self):
        y = Tensor(np.random.default_rng(5).normal(size=(5, 4)))
        pooled, winners = T.row_max_pool(y)
        T.backward(T.sum_all(pooled))
        assert np.count_nonzero(y.grad) == 4
        for col in range(4):
            expect = y.data[:, col].argmax()
            assert winners[col] == expect
            assert y.grad[expect, col] == 1.0

    def test_tie_breaks_to_lowest_index(self):
        _, winners = T.row_max_pool(Tensor([[1.0], [1.0], [1.0]]))
        assert winners[0] == 0

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            T.row_max_pool(Tensor(np.zeros((0, 3))))


class TestBceLoss:
    def test_half_probability(self):
        loss = T.bce_loss(Tensor([0.5]), np.array([1.0]))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_near_perfect_prediction(self):
        loss = T.bce_loss(Tensor([1.0 - 1e-7]), np.array([1.0]))
        assert loss.item() == pytest.approx(1e-7, rel=1e-3)

    def test_matches_scalar_loop_oracle(self):
        r = np.random.default_rng(8)
        p = r.uniform(0.02, 0.98, size=8)
        t = r.integers(0, 2, size=8).astype(float)
        loss = T.bce_loss(Tensor(p), t).item()
        expected = sum(-(ti * math.log(pi) + (1 - ti) * math.log(1 - pi))
                       for pi, ti in zip(p, t)) / 8
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_non_negative(self):
        r = np.random.default_rng(9)
        loss = T.bce_loss(Tensor(r.uniform(0.01, 0.99, size=12)),
                          r.integers(0, 2, size=12).astype(float))
        assert loss.item() >= 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length mismatch"):
            T.bce_loss(Tensor([0.5, 0.5]), np.array([1.0]))


class TestGraph:
    def test_backward_visits_reverse_creation_order(self):
        a = Tensor(np.ones((2, 2)))
        b = Tensor(np.ones((2, 2)))
        c = T.add(a, b)
        d = T.mul(c, c)
        loss = T.sum_all(d)
        graph = T.backward(loss)
        serials = [n.serial for n in graph.nodes]
        assert serials == sorted(serials)
        assert [n.op for n in graph.nodes] == ["add", "mul", "sum_all"]

    def test_gradient_accumulates_across_branches(self):
        r = np.random.default_rng(3)
        w1, w2 = r.normal(size=(3, 2)), r.normal(size=(3, 2))
        x = Tensor(r.normal(size=(4, 3)))
        loss = T.sum_all(T.concat_cols([T.matmul(x, Tensor(w1)), T.matmul(x, Tensor(w2))]))
        T.backward(loss)
        shared_grad = x.grad.copy()

        x1, x2 = Tensor(x.data.copy()), Tensor(x.data.copy())
        loss2 = T.sum_all(T.concat_cols([T.matmul(x1, Tensor(w1)), T.matmul(x2, Tensor(w2))]))
        T.backward(loss2)
        np.testing.assert_allclose(shared_grad, x1.grad + x2.grad, atol=1e-12)

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            T.backward(Tensor([1.0, 2.0]))

    def test_no_grad_skips_recording(self):
        with T.no_grad():
            out = T.relu(Tensor([[1.0, -1.0]]))
        assert out.node is None

    def test_values_and_grads_finite_after_passes(self, rng):
        x = Tensor(rng.normal(size=(6, 4)))
        w = Tensor(rng.normal(size=(4, 3)))
        out = T.sigmoid(T.matmul(T.relu(x), w))
        loss = T.bce_loss(out, rng.integers(0, 2, size=(6, 3)).astype(float))
        T.backward(loss)
        for t in (x, w, out, loss):
            assert np.isfinite(t.data).all()
            assert np.isfinite(t.grad).all()


class TestElementwiseOps:
    def test_concat_cols_and_backward_split(self, rng):
        a, b = Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 3)))
        out = T.concat_cols([a, b])
        assert out.shape == (2, 5)
        T.backward(T.sum_all(out))
        np.testing.assert_allclose(a.grad, np.ones((2, 2)))
        np.testing.assert_allclose(b.grad, np.ones((2, 3)))

    def test_add_bias_broadcast(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=4))
        out = T.add(x, b)
        np.testing.assert_allclose(out.data, x.data + b.data)
        T.backward(T.sum_all(out))
        np.testing.assert_allclose(b.grad, 3 * np.ones(4))

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_gated_sum_is_weighted_row_sum(self, rng):
        alpha = Tensor(rng.random((3, 4)))
        z = Tensor(rng.normal(size=(4, 5)))
        out = T.gated_sum(alpha, z)
        np.testing.assert_allclose(out.data, alpha.data @ z.data, atol=1e-12)

    def test_masked_mean_matches_loop(self, rng):
        fmap = Tensor(rng.normal(size=(12, 3)))
        mask = rng.random(12) < 0.4
        mask[0] = True
        out = T.masked_mean(fmap, mask)
        expected = fmap.data[mask].mean(axis=0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_masked_mean_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            T.masked_mean(Tensor(np.zeros((4, 2))), np.zeros(4, dtype=bool))


class TestSteTopkMask:
    def test_exact_k_ones_at_largest(self):
        scores = np.zeros(17)
        scores[0], scores[2], scores[3] = 9.0, 8.0, 7.0
        scores[1] = 1.0
        mask = T.ste_topk_mask(Tensor(scores), 3)
        assert set(np.flatnonzero(mask.data)) == {0, 2, 3}

    def test_full_selection_passes_everything(self, rng):
        scores = Tensor(rng.normal(size=17))
        mask = T.ste_topk_mask(scores, 17)
        np.testing.assert_array_equal(mask.data, np.ones(17))
        T.backward(T.sum_all(mask))
        np.testing.assert_array_equal(scores.grad, np.ones(17))

    def test_backward_zero_off_selection(self, rng):
        scores = Tensor(rng.normal(size=17))
        mask = T.ste_topk_mask(scores, 3)
        T.backward(T.sum_all(mask))
        selected = np.flatnonzero(mask.data)
        assert np.count_nonzero(scores.grad) == 3
        np.testing.assert_array_equal(scores.grad[selected], np.ones(3))

    def test_k_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            T.ste_topk_mask(Tensor(np.zeros(17)), 18)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 17), st.integers(0, 2**31 - 1))
    def test_mask_sums_to_k(self, k, seed):
        scores = np.random.default_rng(seed).normal(size=17)
        mask = T.ste_topk_mask(Tensor(scores), k)
        assert mask.data.sum() == k
