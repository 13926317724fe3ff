"""Gradient and semantics tests for the tensor engine."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import check_grad
from mixvae.autodiff import (
    Rng, Tensor, add, avgpool2d, clamp_min, conv2d, dense, div, dropout,
    matmul, mul, neg, no_grad, relu, reshape, sigmoid, softmax, sub,
    take_rows, texp, tlog, tmean, tsum, upsample_nearest2d,
)
from mixvae.errors import UsageError


def leaf(nprng, *shape):
    return Tensor(nprng.standard_normal(shape), requires_grad=True)


def positive_leaf(nprng, *shape):
    return Tensor(nprng.uniform(0.5, 2.0, shape), requires_grad=True)


class TestElementwiseGradients:
    """Each primitive against central differences, 20+ random cases apiece."""

    def test_add_sub_mul_div(self):
        nprng = np.random.default_rng(11)
        for _ in range(20):
            a = leaf(nprng, 3, 4)
            b = positive_leaf(nprng, 3, 4)
            check_grad(lambda: tsum(mul(add(a, b), sub(a, b))), [a, b], nprng)
            check_grad(lambda: tsum(div(a, b)), [a, b], nprng)

    def test_broadcasting_grads(self):
        # gradients must be summed back over broadcast axes
        nprng = np.random.default_rng(12)
        for _ in range(20):
            a = leaf(nprng, 4, 5)
            b = leaf(nprng, 5)
            c = leaf(nprng, 4, 1)
            check_grad(lambda: tsum(mul(add(a, b), c)), [a, b, c], nprng)

    def test_unary_ops(self):
        nprng = np.random.default_rng(13)
        for _ in range(20):
            a = leaf(nprng, 6)
            p = positive_leaf(nprng, 6)
            check_grad(lambda: tsum(texp(a)), [a], nprng)
            check_grad(lambda: tsum(tlog(p)), [p], nprng)
            check_grad(lambda: tsum(sigmoid(a)), [a], nprng)
            check_grad(lambda: tsum(neg(a)), [a], nprng)

    def test_relu_and_clamp_away_from_kinks(self):
        nprng = np.random.default_rng(14)
        for _ in range(20):
            # keep magnitudes above the FD step so the kink is never crossed
            raw = nprng.standard_normal(8)
            raw[np.abs(raw) < 0.05] = 0.05
            a = Tensor(raw, requires_grad=True)
            check_grad(lambda: tsum(relu(a)), [a], nprng)
            check_grad(lambda: tsum(clamp_min(a, 0.25)), [a], nprng)

    def test_relu_zero_input_subgradient(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        tsum(relu(a)).backward()
        assert_allclose(a.grad, np.zeros(3))


class TestReductionsAndShapes:
    def test_sum_mean_axes(self):
        nprng = np.random.default_rng(21)
        for _ in range(20):
            a = leaf(nprng, 2, 3, 4)
            check_grad(lambda: tsum(tsum(a, axis=1)), [a], nprng)
            check_grad(lambda: tsum(tmean(a, axis=(1, 2))), [a], nprng)
            check_grad(lambda: tmean(a), [a], nprng)

    def test_sum_keepdims_shape(self):
        a = Tensor(np.ones((2, 3)))
        assert tsum(a, axis=1, keepdims=True).shape == (2, 1)
        assert tmean(a, axis=0).shape == (3,)

    def test_reshape_roundtrip(self):
        nprng = np.random.default_rng(22)
        a = leaf(nprng, 4, 6)
        check_grad(lambda: tsum(mul(reshape(a, (2, 12)), reshape(a, (2, 12)))),
                   [a], nprng, coords_per_leaf=6)

    def test_matmul(self):
        nprng = np.random.default_rng(23)
        for _ in range(20):
            a = leaf(nprng, 3, 4)
            b = leaf(nprng, 4, 5)
            check_grad(lambda: tsum(matmul(a, b)), [a, b], nprng)

    def test_take_rows_scatter(self):
        nprng = np.random.default_rng(24)
        a = leaf(nprng, 5, 3)
        idx = np.array([4, 0, 0, 2, 1])
        check_grad(lambda: tsum(mul(take_rows(a, idx), take_rows(a, idx))),
                   [a], nprng, coords_per_leaf=8)
        # duplicated row 0 must accumulate both contributions
        a.zero_grad()
        tsum(take_rows(a, idx)).backward()
        assert_allclose(a.grad[0], np.full(3, 2.0))
        assert_allclose(a.grad[3], np.zeros(3))


class TestSoftmax:
    def test_rows_sum_to_one(self):
        nprng = np.random.default_rng(31)
        x = Tensor(nprng.standard_normal((10, 4)) * 3)
        out = softmax(x).data
        assert_allclose(out.sum(axis=1), np.ones(10), atol=1e-12)
        assert np.all(out > 0)

    def test_shift_invariance(self):
        nprng = np.random.default_rng(32)
        x = nprng.standard_normal((5, 4))
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 100.0)).data
        assert_allclose(a, b, atol=1e-12)

    def test_gradient(self):
        nprng = np.random.default_rng(33)
        for _ in range(20):
            x = leaf(nprng, 3, 4)
            w = Tensor(nprng.standard_normal((3, 4)))
            check_grad(lambda: tsum(mul(softmax(x), w)), [x], nprng)


class TestLayers:
    def test_dense(self):
        nprng = np.random.default_rng(41)
        for _ in range(10):
            x = leaf(nprng, 2, 5)
            w = leaf(nprng, 5, 4)
            b = leaf(nprng, 4)
            check_grad(lambda: tsum(dense(x, w, b)), [x, w, b], nprng)

    def test_conv2d_values_against_direct_loop(self):
        nprng = np.random.default_rng(42)
        x = nprng.standard_normal((2, 3, 5, 5))
        w = nprng.standard_normal((4, 3, 3, 3))
        b = nprng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expect = np.zeros((2, 4, 5, 5))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(5):
                        patch = xp[n, :, i:i + 3, j:j + 3]
                        expect[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        assert_allclose(out, expect, atol=1e-12)

    def test_conv2d_stride2_shape(self):
        x = Tensor(np.zeros((1, 2, 8, 8)))
        w = Tensor(np.zeros((3, 2, 3, 3)))
        b = Tensor(np.zeros(3))
        assert conv2d(x, w, b, stride=2, padding=1).shape == (1, 3, 4, 4)

    def test_conv2d_gradients(self):
        nprng = np.random.default_rng(43)
        for stride in (1, 2):
            x = leaf(nprng, 2, 2, 6, 6)
            w = leaf(nprng, 3, 2, 3, 3)
            b = leaf(nprng, 3)
            scale = Tensor(nprng.standard_normal(
                conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data),
                       stride=stride, padding=1).shape))
            check_grad(
                lambda: tsum(mul(conv2d(x, w, b, stride=stride, padding=1), scale)),
                [x, w, b], nprng, coords_per_leaf=4)

    def test_avgpool_and_upsample(self):
        nprng = np.random.default_rng(44)
        x = leaf(nprng, 2, 3, 4, 4)
        check_grad(lambda: tsum(mul(avgpool2d(x, 2), avgpool2d(x, 2))), [x], nprng)
        check_grad(lambda: tsum(mul(upsample_nearest2d(x, 2),
                                    upsample_nearest2d(x, 2))), [x], nprng)
        up = upsample_nearest2d(Tensor(np.arange(4.0).reshape(1, 1, 2, 2)), 2).data
        assert_allclose(up[0, 0], np.array([[0, 0, 1, 1], [0, 0, 1, 1],
                                            [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float))


class TestDropout:
    def test_eval_is_identity(self):
        x = Tensor(np.ones((4, 4)))
        assert_allclose(dropout(x, 0.4, "eval").data, x.data)

    def test_p_zero_is_identity(self):
        x = Tensor(np.ones((4, 4)))
        assert_allclose(dropout(x, 0.0, "train", Rng(0)).data, x.data)

    def test_train_mean_preserved(self):
        # inverted dropout: E[output] == input; 1e5 draws, within 0.01
        rng = Rng(7)
        x = Tensor(np.ones(100000))
        out = dropout(x, 0.3, "train", rng).data
        assert abs(out.mean() - 1.0) < 0.01
        kept = out != 0.0
        assert_allclose(out[kept], np.full(kept.sum(), 1.0 / 0.7))

    def test_gradient_matches_mask(self):
        rng = Rng(8)
        x = Tensor(np.ones(50), requires_grad=True)
        out = dropout(x, 0.5, "train", rng)
        tsum(out).backward()
        assert_allclose(x.grad, np.where(out.data != 0.0, 2.0, 0.0))


class TestBackwardSemantics:
    def test_non_scalar_backward_rejected(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            add(t, t).backward()

    def test_repeated_backward_rejected(self):
        t = Tensor(np.ones(1), requires_grad=True)
        loss = tsum(t)
        loss.backward()
        with pytest.raises(UsageError):
            loss.backward()

    def test_grad_accumulates_across_graphs(self):
        t = Tensor(np.ones(2), requires_grad=True)
        tsum(t).backward()
        tsum(mul(t, t)).backward()
        assert_allclose(t.grad, np.full(2, 3.0))

    def test_diamond_graph_accumulation(self):
        t = Tensor(np.array([2.0]), requires_grad=True)
        y = add(mul(t, t), mul(t, t))
        tsum(y).backward()
        assert_allclose(t.grad, np.array([8.0]))

    def test_no_grad_blocks_recording(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = mul(t, t)
        assert out._record is None

    def test_linearity_of_gradients(self):
        # grad(a*f + b*g) == a*grad(f) + b*grad(g)
        nprng = np.random.default_rng(55)
        x = Tensor(nprng.standard_normal(6), requires_grad=True)

        def run(builder):
            x.zero_grad()
            builder().backward()
            return x.grad.copy()

        gf = run(lambda: tsum(mul(x, x)))
        gg = run(lambda: tsum(sigmoid(x)))
        combined = run(lambda: add(mul(Tensor(np.float64(2.0)), tsum(mul(x, x))),
                                   mul(Tensor(np.float64(-3.0)), tsum(sigmoid(x)))))
        assert_allclose(combined, 2.0 * gf - 3.0 * gg, rtol=1e-6, atol=1e-12)


class TestRng:
    def test_same_seed_same_stream(self):
        assert_allclose(Rng(3).random(5), Rng(3).random(5))

    def test_derive_is_order_independent(self):
        root = Rng(3)
        a = root.derive("x")
        root.random(100)  # consuming the parent must not disturb children
        b = root.derive("x")
        assert_allclose(a.random(5), b.random(5))

    def test_sibling_streams_differ(self):
        root = Rng(3)
        assert not np.allclose(root.derive("a").random(5),
                               root.derive("b").random(5))

    def test_state_roundtrip(self):
        rng = Rng(9).derive("child", 4)
        rng.random(7)
        clone = Rng.from_state(rng.state())
        assert_allclose(rng.random(5), clone.random(5))
