"""Gradient checks for the tensor engine against central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import basincast.autodiff as ad
from basincast.errors import InvalidInputError, ShapeError
from gradcheck import check_grads


def rng(seed=0):
    return np.random.default_rng(seed)


class TestElementwise:
    def test_add_broadcast(self):
        r = rng(1)
        check_grads(lambda a, b: ((a + b) * (a + b)).sum(),
                    r.normal(size=(3, 4)), r.normal(size=(4,)))

    def test_sub_and_neg(self):
        r = rng(2)
        check_grads(lambda a, b: ((a - b) * (-a)).sum(),
                    r.normal(size=(2, 3)), r.normal(size=(2, 3)))

    def test_mul_broadcast_scalar(self):
        r = rng(3)
        check_grads(lambda a, b: (a * b * 3.0).sum(),
                    r.normal(size=(2, 1, 4)), r.normal(size=(3, 1)))

    def test_sigmoid_tanh_exp_log(self):
        r = rng(4)
        x = r.uniform(0.5, 2.0, size=(3, 3))
        check_grads(lambda a: ad.log(ad.exp(ad.sigmoid(a)) + ad.tanh(a) + 3.0).sum(), x)

    def test_relu_away_from_kink(self):
        r = rng(5)
        x = r.normal(size=(4, 4))
        x[np.abs(x) < 0.1] += 0.2
        check_grads(lambda a: (ad.relu(a) * a).sum(), x)

    def test_leaky_relu_slope(self):
        x = np.array([-2.0, -1.0, 1.0, 2.0])
        out = ad.leaky_relu(ad.tensor(x), slope=0.2)
        assert np.allclose(out.values, [-0.4, -0.2, 1.0, 2.0])
        check_grads(lambda a: ad.leaky_relu(a, 0.2).sum(), x)


class TestLinearAlgebra:
    def test_matmul_2d(self):
        r = rng(6)
        check_grads(lambda a, b: (a @ b).sum(),
                    r.normal(size=(3, 4)), r.normal(size=(4, 2)))

    def test_matmul_batched(self):
        r = rng(7)
        check_grads(lambda a, b: ((a @ b) * (a @ b)).sum(),
                    r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3)))

    def test_matmul_broadcast_weights(self):
        r = rng(8)
        check_grads(lambda a, b: (a @ b).sum(),
                    r.normal(size=(5, 2, 3)), r.normal(size=(3, 4)))

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.tensor(np.ones(3)), ad.tensor(np.ones((3, 2))))


class TestReductionsAndShape:
    def test_sum_axis_keepdims(self):
        r = rng(9)
        check_grads(lambda a: (a.sum(axis=1, keepdims=True) * a).sum(),
                    r.normal(size=(3, 4)))

    def test_mean_axis(self):
        r = rng(10)
        check_grads(lambda a: (a.mean(axis=0) * a.mean(axis=0)).sum(),
                    r.normal(size=(4, 3)))

    def test_getitem_slice(self):
        r = rng(11)
        check_grads(lambda a: (a[1:, ::2] * a[1:, ::2]).sum(),
                    r.normal(size=(4, 6)))

    def test_take_with_repeats(self):
        r = rng(12)
        idx = np.array([0, 2, 2, 1])
        check_grads(lambda a: (ad.take(a, idx, axis=0) * 2.0).sum(),
                    r.normal(size=(3, 4)))

    def test_take_inner_axis(self):
        r = rng(13)
        idx = np.array([3, 0])
        check_grads(lambda a: (ad.take(a, idx, axis=1)
                               * ad.take(a, idx, axis=1)).sum(),
                    r.normal(size=(2, 4, 3)))

    def test_set_rows(self):
        r = rng(14)
        idx = np.array([0, 2])
        check_grads(lambda b, v: (ad.set_rows(b, v, idx) * ad.set_rows(b, v, idx)).sum(),
                    r.normal(size=(4, 3)), r.normal(size=(2, 3)))

    def test_set_rows_values(self):
        base = ad.tensor(np.zeros((3, 2)))
        vals = ad.tensor(np.ones((1, 2)))
        out = ad.set_rows(base, vals, np.array([1]))
        assert np.array_equal(out.values, [[0, 0], [1, 1], [0, 0]])

    def test_concat(self):
        r = rng(15)
        check_grads(lambda a, b: (ad.concat([a, b], axis=1)
                                  * ad.concat([a, b], axis=1)).sum(),
                    r.normal(size=(2, 3)), r.normal(size=(2, 2)))

    def test_reshape_transpose_broadcast(self):
        r = rng(16)
        check_grads(
            lambda a: (ad.broadcast_to(ad.transpose(a.reshape(2, 6), (1, 0)), (3, 6, 2))
                       * 1.5).sum(),
            r.normal(size=(3, 4)))


class TestAttentionPieces:
    def test_softmax_mask_grads(self):
        r = rng(17)
        mask = np.zeros((3, 4))
        mask[0, 2:] = -np.inf
        mask[1, 0] = -np.inf
        w = r.normal(size=(3, 4))
        check_grads(lambda a: (ad.softmax_with_mask(a, mask) * w).sum(),
                    r.normal(size=(3, 4)))

    def test_softmax_fully_masked_row(self):
        mask = np.full((2, 3), -np.inf)
        mask[0] = 0.0
        out = ad.softmax_with_mask(ad.parameter(np.ones((2, 3))), mask)
        assert np.allclose(out.values[0], 1.0 / 3.0)
        assert np.array_equal(out.values[1], np.zeros(3))

    def test_masked_positions_get_no_mass(self):
        mask = np.array([[0.0, -np.inf, 0.0]])
        out = ad.softmax_with_mask(ad.tensor(np.array([[5.0, 100.0, 5.0]])), mask)
        assert out.values[0, 1] == 0.0
        assert abs(out.values[0].sum() - 1.0) < 1e-12

    def test_layer_norm_grads(self):
        r = rng(18)
        w = r.normal(size=(2, 5))
        check_grads(lambda a: (ad.layer_norm(a) * w).sum(), r.normal(size=(2, 5)))

    def test_layer_norm_moments(self):
        r = rng(19)
        y = ad.layer_norm(ad.tensor(r.normal(size=(4, 8)) * 3 + 2)).values
        assert np.abs(y.mean(axis=-1)).max() < 1e-12
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-4


class TestConvAndDropout:
    def test_conv1d_grads(self):
        r = rng(20)
        check_grads(lambda x, w: (ad.conv1d(x, w, padding=1)
                                  * ad.conv1d(x, w, padding=1)).sum(),
                    r.normal(size=(2, 3, 6)), r.normal(size=(4, 3, 3)))

    def test_conv1d_k1(self):
        r = rng(21)
        check_grads(lambda x, w: ad.conv1d(x, w).sum(),
                    r.normal(size=(3, 5)), r.normal(size=(2, 3, 1)))

    def test_conv1d_matches_direct(self):
        x = np.arange(5.0).reshape(1, 5)
        w = np.array([[[1.0, -1.0, 2.0]]])
        out = ad.conv1d(ad.tensor(x), ad.tensor(w), padding=1).values
        want = [np.dot([0, 0, 1], [1, -1, 2]), np.dot([0, 1, 2], [1, -1, 2]),
                np.dot([1, 2, 3], [1, -1, 2]), np.dot([2, 3, 4], [1, -1, 2]),
                np.dot([3, 4, 0], [1, -1, 2])]
        assert np.allclose(out, [want])

    def test_conv1d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv1d(ad.tensor(np.ones((2, 5))), ad.tensor(np.ones((1, 3, 3))))

    def test_dropout_eval_identity(self):
        x = ad.parameter(np.ones((4, 4)))
        assert ad.dropout(x, 0.5, training=False) is x

    def test_dropout_scaling_preserves_mean(self):
        x = ad.tensor(np.ones(200_000))
        out = ad.dropout(x, 0.3, rng=rng(22), training=True)
        assert abs(out.values.mean() - 1.0) < 0.01

    def test_dropout_grads_with_fixed_mask(self):
        r = rng(23)
        x = r.normal(size=(3, 4))
        check_grads(lambda a: ad.dropout(a, 0.5, rng=rng(99), training=True).sum(), x)


class TestBackward:
    def test_scalar_required(self):
        p = ad.parameter(np.ones(3))
        with pytest.raises(InvalidInputError):
            ad.backward(p + 1.0)

    def test_unreachable_param_gets_zeros(self):
        a = ad.parameter(np.ones(2))
        b = ad.parameter(np.ones(2))
        grads = ad.backward((a * 2.0).sum(), [a, b])
        assert np.array_equal(grads[b], np.zeros(2))
        assert np.array_equal(grads[a], np.full(2, 2.0))

    def test_reused_node_accumulates(self):
        a = ad.parameter(np.array([3.0]))
        y = a * a + a * 2.0
        grads = ad.backward(y.sum(), [a])
        assert np.allclose(grads[a], 2 * 3.0 + 2.0)

    def test_constants_record_nothing(self):
        out = ad.tensor(np.ones(3)) * ad.tensor(np.ones(3))
        assert out._parents == () and not out.requires_grad

    def test_grads_do_not_mutate_params(self):
        a = ad.parameter(np.ones(3))
        before = a.values.copy()
        ad.backward((a * a).sum(), [a])
        assert np.array_equal(a.values, before)

    def test_composite_network(self):
        r = rng(24)
        idx = np.array([0, 3, 1])

        def build(x, w1, w2):
            h = ad.tanh(x @ w1)
            h = ad.layer_norm(h + x @ w1)
            g = ad.take(h, idx, axis=0)
            att = ad.softmax_with_mask(g @ ad.transpose(g, (1, 0)), np.zeros((3, 3)))
            return ad.sigmoid(att @ (g @ w2)).sum()

        check_grads(build, r.normal(size=(5, 4)), r.normal(size=(4, 4)),
                    r.normal(size=(4, 2)), tol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_stochastic(rows, cols, seed):
    logits = np.random.default_rng(seed).normal(size=(rows, cols)) * 5
    out = ad.softmax_with_mask(ad.tensor(logits), np.zeros((rows, cols))).values
    assert np.all(out >= 0)
    assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_unbroadcast_matches_numpy_broadcasting(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(3, 1, 4))
    b = r.normal(size=(2, 1))
    out = ad.add(ad.tensor(a), ad.tensor(b))
    assert out.shape == np.broadcast_shapes(a.shape, b.shape)


class TestAdamW:
    def test_hand_value_no_decay(self):
        p = ad.parameter(np.array([1.0]))
        opt = ad.AdamW({"p": p}, lr=0.01, weight_decay=0.0)
        opt.step({"p": np.array([1.0])})
        assert abs(p.values[0] - 0.99) < 1e-9

    def test_decay_applied_before_step(self):
        p = ad.parameter(np.array([1.0]))
        opt = ad.AdamW({"p": p}, lr=0.01, weight_decay=0.1)
        opt.step({"p": np.array([1.0])})
        # shrink to 0.999 first, then the unit adaptive step of ~0.01
        assert abs(p.values[0] - 0.989) < 1e-9

    def test_bias_correction_second_step(self):
        p = ad.parameter(np.array([0.0]))
        opt = ad.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        opt.step({"p": np.array([1.0])})
        first = p.values[0]
        opt.step({"p": np.array([1.0])})
        # constant gradient keeps the corrected step near lr each time
        assert abs((first - p.values[0]) - 0.1) < 1e-6

    def test_zero_grad_with_decay_still_shrinks(self):
        p = ad.parameter(np.array([2.0]))
        opt = ad.AdamW({"p": p}, lr=0.01, weight_decay=0.5)
        opt.step({"p": np.array([0.0])})
        assert p.values[0] == pytest.approx(2.0 * (1 - 0.01 * 0.5))

    def test_step_count_validated(self):
        with pytest.raises(InvalidInputError):
            ad.adamw_step({}, {}, {}, 0, lr=0.01)
