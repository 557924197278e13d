import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import kink_free_batch, random_net
from softalign.dataio import Dataset
from softalign.errors import FormatError, InvalidArgumentError, ShapeError
from softalign.network import (BackwardRule, FeedbackParams, ForwardCache, NetworkParams,
                               backward, cross_entropy, decode_checkpoint, encode_checkpoint,
                               evaluate, flatten, forward, load_checkpoint,
                               loss_and_grads, loss_and_output_delta, save_checkpoint,
                               softmax, unflatten)


def fd_gradient(params, x, y, h=1e-6):
    """Central differences of the mean loss over the flat parameter vector."""
    theta = flatten(params)
    dims = params.dims
    g = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        lp = cross_entropy(forward(unflatten(theta + e, dims), x).logits, y).mean()
        lm = cross_entropy(forward(unflatten(theta - e, dims), x).logits, y).mean()
        g[k] = (lp - lm) / (2 * h)
    return g


def transpose_feedback(params):
    return FeedbackParams([None] + [w.T.copy() for w in params.weights[1:]])


class TestForward:
    def test_zero_params_uniform(self):
        cache = forward(NetworkParams.zeros([5, 4, 3]), np.ones((2, 5)))
        np.testing.assert_allclose(cache.probs, 1 / 3)

    def test_single_layer_hand_values(self):
        params = NetworkParams([np.array([[1.0, 2.0], [0.0, -1.0]])], [np.array([0.5, 0.0])])
        cache = forward(params, np.array([[1.0, 1.0]]))
        assert cache.logits.tolist() == [[3.5, -1.0]]

    def test_relu_on_hidden_only(self):
        params = NetworkParams([np.array([[-1.0]]), np.array([[1.0], [-1.0]])],
                               [np.zeros(1), np.zeros(2)])
        cache = forward(params, np.array([[2.0]]))
        assert cache.act[1].tolist() == [[0.0]]
        assert cache.logits.tolist() == [[0.0, 0.0]]

    def test_cache_layout(self):
        params = random_net([6, 5, 4, 3])
        cache = forward(params, np.ones((2, 6)))
        assert len(cache.act) == 3 and cache.pre[0] is None and len(cache.pre) == 4
        assert isinstance(cache, ForwardCache)

    def test_input_mismatch(self):
        with pytest.raises(ShapeError):
            forward(random_net([6, 3]), np.ones((2, 5)))

    def test_softmax_is_stable(self):
        p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])

    def test_param_chaining(self):
        with pytest.raises(ShapeError):
            NetworkParams([np.ones((3, 2)), np.ones((2, 4))], [np.zeros(3), np.zeros(2)])


class TestLoss:
    def test_uniform_ten_classes(self):
        cache = forward(NetworkParams.zeros([3, 10]), np.ones((1, 3)))
        loss, _ = loss_and_output_delta(cache, [4])
        assert abs(loss - math.log(10)) < 1e-12

    def test_two_class_example(self):
        # logits giving p = (0.7, 0.3)
        z = np.array([[math.log(0.7), math.log(0.3)]])
        params = NetworkParams([np.zeros((2, 1))], [z[0]])
        cache = forward(params, np.zeros((1, 1)))
        loss, delta = loss_and_output_delta(cache, [0])
        assert abs(loss + math.log(0.7)) < 1e-12
        np.testing.assert_allclose(delta, [[-0.3, 0.3]], atol=1e-12)

    def test_delta_scaled_by_batch(self):
        params = random_net([4, 3])
        x = np.random.default_rng(0).normal(size=(8, 4))
        _, d8 = loss_and_output_delta(forward(params, x), np.zeros(8, int))
        _, d1 = loss_and_output_delta(forward(params, x[:1]), [0])
        np.testing.assert_allclose(d8[0] * 8, d1[0])

    @pytest.mark.parametrize("bad", [[-1], [3]])
    def test_bad_label(self, bad):
        cache = forward(random_net([4, 3]), np.ones((1, 4)))
        with pytest.raises(InvalidArgumentError):
            loss_and_output_delta(cache, bad)


class TestGradients:
    @pytest.mark.parametrize("dims", [[8, 6, 4], [5, 7, 6, 3]])
    def test_matches_finite_differences(self, dims):
        params = random_net(dims, seed=len(dims))
        x, y = kink_free_batch(params, 6, seed=1)
        _, grads = loss_and_grads(params, x, y)
        analytic = flatten(grads)
        fd = fd_gradient(params, x, y)
        rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-7)
        assert np.all((rel < 1e-5) | (np.abs(analytic - fd) < 1e-9))

    def test_bias_gradient_is_delta_sum(self):
        params = random_net([4, 5, 3])
        x = np.random.default_rng(2).normal(size=(7, 4))
        _, g = loss_and_grads(params, x, np.arange(7) % 3)
        for l in range(params.n_layers):
            np.testing.assert_allclose(g.biases[l], g.deltas[l + 1].sum(axis=0))

    def test_fa_with_transpose_equals_bp(self):
        params = random_net([6, 5, 4, 3], seed=3)
        x = np.random.default_rng(3).normal(size=(9, 6))
        y = np.arange(9) % 3
        _, bp = loss_and_grads(params, x, y)
        _, fa = loss_and_grads(params, x, y, BackwardRule.fixed_feedback(transpose_feedback(params)))
        for a, b in zip(flatten(bp), flatten(fa)):
            assert a == b or abs(a - b) <= 1e-12 * abs(a)

    def test_fa_never_reads_forward_weights(self):
        params = random_net([6, 5, 4, 3], seed=4)
        fb = transpose_feedback(params)
        x = np.random.default_rng(4).normal(size=(5, 6))
        y = np.arange(5) % 3
        cache = forward(params, x)
        _, d = loss_and_output_delta(cache, y)
        ref = backward(BackwardRule.fixed_feedback(fb), params, cache, d)
        poisoned = params.copy()
        for w in poisoned.weights:
            w[:] = np.nan
        out = backward(BackwardRule.fixed_feedback(fb), poisoned, cache, d)
        np.testing.assert_array_equal(flatten(out), flatten(ref))

    def test_last_layer_same_under_fa(self):
        params = random_net([6, 5, 3], seed=5)
        rng = np.random.default_rng(6)
        fb = FeedbackParams([None, rng.normal(size=(5, 3))])
        x = rng.normal(size=(4, 6))
        y = np.arange(4) % 3
        _, bp = loss_and_grads(params, x, y)
        _, fa = loss_and_grads(params, x, y, BackwardRule.fixed_feedback(fb))
        np.testing.assert_array_equal(bp.weights[-1], fa.weights[-1])
        assert not np.allclose(bp.weights[0], fa.weights[0])

    def test_relu_grad_zero_at_kink(self):
        params = NetworkParams([np.array([[1.0]]), np.array([[1.0], [-1.0]])],
                               [np.zeros(1), np.zeros(2)])
        _, g = loss_and_grads(params, np.zeros((1, 1)), [0])
        assert g.deltas[1].tolist() == [[0.0]]

    def test_bad_feedback_shape(self):
        params = random_net([6, 5, 3])
        fb = FeedbackParams([None, np.ones((3, 5))])
        with pytest.raises(ShapeError):
            loss_and_grads(params, np.ones((1, 6)), [0], BackwardRule.fixed_feedback(fb))


class TestEvaluate:
    def _ds(self, n=37):
        rng = np.random.default_rng(0)
        return Dataset(rng.normal(size=(n, 6)), rng.integers(0, 3, n), 3, (1, 1, 6))

    def test_batch_size_invariant(self):
        params, ds = random_net([6, 5, 3]), self._ds()
        acc1, loss1 = evaluate(params, ds, batch_size=1000)
        acc2, loss2 = evaluate(params, ds, batch_size=5)
        assert acc1 == acc2 and abs(loss1 - loss2) < 1e-12

    def test_ties_go_to_lowest_index(self):
        ds = Dataset(np.zeros((4, 2)), np.array([0, 0, 1, 2]), 3, (1, 1, 2))
        acc, loss = evaluate(NetworkParams.zeros([2, 3]), ds)
        assert acc == 0.5 and abs(loss - math.log(3)) < 1e-12


class TestCheckpoint:
    def test_flatten_round_trip(self):
        params = random_net([4, 3, 2])
        back = unflatten(flatten(params), params.dims)
        np.testing.assert_array_equal(flatten(back), flatten(params))

    def test_flatten_order(self):
        params = NetworkParams([np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])],
                               [np.array([5.0]), np.array([6.0, 7.0])])
        assert flatten(params).tolist() == [1, 2, 3, 4, 5, 6, 7]

    def test_file_round_trip(self, tmp_path):
        params = random_net([5, 4, 3])
        save_checkpoint(tmp_path / "c.bin", params)
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.dims == params.dims
        assert encode_checkpoint(back) == encode_checkpoint(params)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"XXXX" + bytes(20))

    def test_truncated(self):
        raw = encode_checkpoint(random_net([3, 2]))
        with pytest.raises(FormatError):
            decode_checkpoint(raw[:-8])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 1000))
    def test_round_trip_property(self, dims, seed):
        vec = np.random.default_rng(seed).normal(size=sum(o * i + o for i, o in zip(dims, dims[1:])))
        raw = encode_checkpoint(unflatten(vec, dims))
        np.testing.assert_array_equal(flatten(decode_checkpoint(raw)), vec)
