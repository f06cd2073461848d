import numpy as np
import pytest

from decompnet import tensor as T
from decompnet.errors import GraphStateError, ShapeError
from decompnet.layers import BatchNorm, Conv2d, Dense
from decompnet.tensor import Parameter, Tensor


def naive_conv2d(x, w, b, stride):
    """Loop reference: cross-correlation with zero padding (K-1)/2."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    win = xp[a, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[a, o, i, j] = (win * w[o]).sum() + b[o]
    return out


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def p64(arr):
    return Parameter(np.asarray(arr, dtype=np.float64), dtype=np.float64)


class TestConv2d:
    def test_scalar_scaling(self):
        x = Tensor([[[[1, 2], [3, 4]]]])
        out = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([0.0]), 1)
        np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 5, 7)))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]), 1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_stride2_window_sums(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), 2)
        np.testing.assert_array_equal(out.data[0, 0], [[4, 6], [6, 9]])

    @pytest.mark.parametrize("stride,k,h,w", [(1, 3, 5, 5), (2, 5, 7, 6), (2, 3, 8, 8), (3, 3, 7, 9), (1, 1, 4, 3)])
    def test_matches_naive_loops(self, stride, k, h, w):
        rng = np.random.default_rng(stride * 10 + k)
        x = rng.normal(size=(2, 3, h, w))
        wt = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride)
        np.testing.assert_allclose(out.data, naive_conv2d(x, wt, b, stride), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None, 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), None, 1)


class TestDeconv2d:
    def test_single_pixel_stamps_kernel(self):
        out = T.deconv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]), 2)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data[0, 0], np.ones((2, 2)))

    def test_identity(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 3, 3))
        w = np.zeros((2, 2, 1, 1))
        w[0, 0] = w[1, 1] = 1
        out = T.deconv2d(Tensor(x), Tensor(w), None, 1)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,k", [(1, 1), (1, 3), (1, 5), (2, 3), (2, 5), (2, 1)])
    def test_adjoint_of_conv(self, stride, k):
        rng = np.random.default_rng(stride + 7 * k)
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(3, 2, k, k))
        y = rng.normal(size=(2, 2, 5 * stride, 4 * stride))
        lhs = (T.deconv2d(Tensor(x), Tensor(w), None, stride).data * y).sum()
        rhs = (x * naive_conv2d(y, w, np.zeros(3), stride)).sum()
        assert abs(lhs - rhs) / abs(rhs) < 1e-5

    def test_output_size_is_stride_multiple(self):
        out = T.deconv2d(Tensor(np.ones((1, 4, 7, 5))), Tensor(np.ones((4, 2, 3, 3))), None, 2)
        assert out.shape == (1, 2, 14, 10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.deconv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))), None, 2)


class TestBatchNorm:
    def _bn(self, c):
        return Parameter(np.ones(c)), Parameter(np.zeros(c)), np.zeros(c), np.ones(c)

    def test_constant_input_gives_beta(self):
        beta = Parameter(np.array([0.7, -0.2]))
        out = T.batch_norm(Tensor(np.full((3, 2, 4, 4), 5.0)), Parameter(np.array([2.0, 3.0])), beta,
                           True, np.zeros(2), np.ones(2))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.data[None, :, None, None], out.shape), atol=1e-3)

    def test_standardizes_two_values(self):
        x = np.array([0.0, 2.0, 0.0, 2.0]).reshape(2, 1, 1, 2)
        g, b, rm, rv = self._bn(1)
        out = T.batch_norm(Tensor(x), g, b, True, rm, rv)
        np.testing.assert_allclose(out.data.ravel(), [-1, 1, -1, 1], atol=1e-5)

    def test_eval_identity_statistics(self):
        x = np.random.default_rng(2).normal(size=(4, 3))
        g, b, rm, rv = self._bn(3)
        out = T.batch_norm(Tensor(x), g, b, False, rm, rv)
        np.testing.assert_allclose(out.data, x, rtol=1e-5)

    def test_running_stats_update(self):
        x = np.random.default_rng(3).normal(loc=2.0, size=(8, 2, 3, 3))
        g, b, rm, rv = self._bn(2)
        T.batch_norm(Tensor(x), g, b, True, rm, rv, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))

    def test_channel_mismatch(self):
        g, b, rm, rv = self._bn(3)
        with pytest.raises(ShapeError):
            T.batch_norm(Tensor(np.ones((2, 2, 3, 3))), g, b, True, rm, rv)


class TestDense:
    def test_identity_weight(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.eye(2)), Tensor([0.0, 0.0])).data, x)

    def test_bias_shift(self):
        out = T.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[4, 5]])

    def test_naive_multiply(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
        ref = np.zeros((3, 4))
        for i in range(3):
            for j in range(4):
                ref[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(5))
        np.testing.assert_allclose(T.dense(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), None)


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_nonnegative_identity(self):
        x = np.abs(np.random.default_rng(5).normal(size=10))
        np.testing.assert_array_equal(T.relu(Tensor(x)).data, x)

    def test_relu_gradient(self, f64):
        x = p64([-1.0, 2.0])
        T.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 1])
        # Central differences agree away from the kink.
        assert T.grad_check(lambda: T.relu(x).sum(), [x]) < 1e-8

    def test_dropout_rate_zero_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.0, True) is x
        assert T.dropout(x, 0.0, False) is x

    def test_dropout_eval_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.7, False) is x

    def test_dropout_statistics(self):
        x = Tensor(np.ones(1_000_000))
        out = T.dropout(x, 0.5, True, np.random.default_rng(6)).data
        assert 0.497 <= (out > 0).mean() <= 0.503
        assert abs(out.mean() - 1.0) < 0.01

    def test_dropout_rate_one_rejected(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, True)


class TestBackward:
    def test_sum_of_product(self, f64):
        x = np.random.default_rng(7).normal(size=5)
        w = p64(np.zeros(5))
        (w * Tensor(x)).sum().backward()
        np.testing.assert_array_equal(w.grad, x)

    def test_squared_norm(self, f64):
        x = p64([1.0, -2.0, 3.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2, -4, 6])

    def test_non_scalar_rejected(self):
        x = Parameter(np.ones(3))
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_second_backward_rejected(self):
        x = Parameter(np.ones(3))
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphStateError):
            loss.backward()

    def test_shared_subexpression(self, f64):
        x = p64([3.0])
        y = x * x
        (y + y * x).sum().backward()
        # d/dx (x^2 + x^3) = 2x + 3x^2
        np.testing.assert_allclose(x.grad, [6 + 27])

    def test_no_grad_records_nothing(self):
        x = Parameter(np.ones(2))
        with T.no_grad():
            y = (x * 3.0).sum()
        with pytest.raises(GraphStateError):
            y.backward()

    def test_nonfinite_is_hard_failure(self):
        with pytest.raises(FloatingPointError):
            Tensor([1e38]) * Tensor([1e38])

    def test_composite_network_gradients(self, f64):
        rng = np.random.default_rng(8)
        conv = Conv2d(2, 3, 3, 2, rng, bias=False)
        bn = BatchNorm(3)
        head = Dense(3 * 3 * 3, 2, rng)
        x = Tensor(rng.normal(size=(4, 2, 5, 5)))
        probe = rng.normal(size=(4, 2))

        def loss():
            h = T.relu(bn(conv(x)))
            return (head(h.reshape(4, -1)) * Tensor(probe)).sum()

        params = conv.parameters() + bn.parameters() + head.parameters()
        assert T.grad_check(loss, params) < 1e-4


class TestSgd:
    def test_single_step(self):
        p = Parameter(np.array([1.0]), dtype=np.float64)
        p.grad = np.array([0.5])
        T.sgd_step([p], 0.1)
        np.testing.assert_allclose(p.data, [0.95])
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_zero_gradient(self):
        p = Parameter(np.array([2.0, 3.0]))
        T.sgd_step([p], 0.5)
        np.testing.assert_array_equal(p.data, [2.0, 3.0])

    def test_linearity(self):
        g1, g2 = np.array([0.3, -1.0]), np.array([0.7, 2.0])
        a = Parameter(np.array([1.0, 1.0]), dtype=np.float64)
        b = Parameter(np.array([1.0, 1.0]), dtype=np.float64)
        a.grad = g1
        T.sgd_step([a], 0.1)
        a.grad = g2
        T.sgd_step([a], 0.1)
        b.grad = g1 + g2
        T.sgd_step([b], 0.1)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-15)

    @pytest.mark.parametrize("lr", [0.0, -1.0])
    def test_nonpositive_lr(self, lr):
        with pytest.raises(ValueError):
            T.sgd_step([Parameter(np.ones(1))], lr)


class TestGradCheck:
    def test_dense(self, f64):
        rng = np.random.default_rng(9)
        layer = Dense(4, 3, rng)
        x = Tensor(rng.normal(size=(5, 4)))
        probe = Tensor(rng.normal(size=(5, 3)))
        assert T.grad_check(lambda: (layer(x) * probe).sum(), layer.parameters()) < 1e-6

    def test_conv_stride2(self, f64):
        rng = np.random.default_rng(10)
        w, b = p64(rng.normal(size=(2, 3, 3, 3))), p64(rng.normal(size=2))
        x = p64(rng.normal(size=(2, 3, 6, 5)))
        probe = Tensor(rng.normal(size=(2, 2, 3, 3)))
        assert T.grad_check(lambda: (T.conv2d(x, w, b, 2) * probe).sum(), [x, w, b]) < 1e-5

    def test_deconv_stride2(self, f64):
        rng = np.random.default_rng(11)
        w, b = p64(rng.normal(size=(3, 2, 3, 3))), p64(rng.normal(size=2))
        x = p64(rng.normal(size=(2, 3, 3, 4)))
        probe = Tensor(rng.normal(size=(2, 2, 6, 8)))
        assert T.grad_check(lambda: (T.deconv2d(x, w, b, 2) * probe).sum(), [x, w, b]) < 1e-5

    def test_requires_float64(self):
        p = Parameter(np.ones(2, dtype=np.float32))
        with pytest.raises(ValueError):
            T.grad_check(lambda: p.sum(), [p])


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(12)
        conv = Conv2d(1, 4, 5, 2, rng)
        x = Tensor(rng.normal(size=(2, 1, 9, 9)).astype(np.float32))
        out = T.relu(conv(x))
        out.sum().backward()
        return out.data.copy(), conv.weight.grad.copy()

    (a1, g1), (a2, g2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and g1.tobytes() == g2.tobytes()
