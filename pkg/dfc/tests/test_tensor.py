import numpy as np
import dfc.tensor as T
import unittest


def finite_difference(f, x, h=1e-6):
    """central differences of a scalar function of an array"""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad


def tape_gradient(f, x):
    t = T.Tensor(x, trainable=True, dtype=np.float64)
    with T.Tape() as tape:
        loss = f(t)
    return T.backward(tape, loss)[t].data


def check_gradient(test, f, x, rtol=1e-5, atol=1e-7):
    numeric = finite_difference(lambda a: f(T.Tensor(a, dtype=np.float64)).item(), x)
    analytic = tape_gradient(f, x)
    test.assertTrue(np.allclose(analytic, numeric, rtol=rtol, atol=atol),
                    f"max abs difference {np.abs(analytic - numeric).max()}")


class Test(unittest.TestCase):
    """Tests of tensors, the tape and every op"""

    def setUp(self):
        self.rng = np.random.default_rng(42)

    def test_default_dtype(self):
        """tensors are float32 unless asked otherwise and float64 inputs stay float64"""
        a = T.Tensor([1, 2, 3])
        self.assertEqual(a.dtype, np.float32)
        b = T.Tensor([1, 2, 3], dtype=np.float64)
        self.assertEqual((b * b).dtype, np.float64)
        self.assertEqual(T.astype(a, np.float64).dtype, np.float64)

    def test_values_without_tape(self):
        """ops give the same values with and without a tape"""
        x = self.rng.normal(size=(3, 4))
        w = self.rng.normal(size=(4, 2))
        plain = T.matmul(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64)).data
        t = T.Tensor(x, trainable=True, dtype=np.float64)
        with T.Tape():
            taped = T.matmul(t, T.Tensor(w, dtype=np.float64)).data
        self.assertTrue(np.array_equal(plain, taped))

    def test_fan_out_accumulates(self):
        """a tensor used twice receives the sum of both gradients"""
        x = np.array([0.5, -1.5, 2.0])
        grad = tape_gradient(lambda t: T.reduce_sum(t * t + t), x)
        self.assertTrue(np.allclose(grad, 2 * x + 1))

    def test_frozen_tensors_get_no_gradient(self):
        """only trainable leaves appear in the gradients"""
        w = T.Tensor(self.rng.normal(size=(3, 3)), dtype=np.float64)
        x = T.Tensor(self.rng.normal(size=(2, 3)), trainable=True, dtype=np.float64)
        with T.Tape() as tape:
            loss = T.reduce_sum(T.matmul(x, w))
        grads = T.backward(tape, loss)
        self.assertIn(x, grads)
        self.assertNotIn(w, grads)

    def test_unused_leaf_gets_zeros(self):
        """a trainable leaf that does not reach the loss has a zero gradient"""
        a = T.Tensor([1.0, 2.0], trainable=True, dtype=np.float64)
        b = T.Tensor([3.0], trainable=True, dtype=np.float64)
        with T.Tape() as tape:
            T.square(b)
            loss = T.reduce_sum(T.square(a))
        grads = T.backward(tape, loss)
        self.assertTrue(np.array_equal(grads[b].data, [0.0]))
        self.assertTrue(np.allclose(grads[a].data, [2.0, 4.0]))

    def test_backward_errors(self):
        """misuse of the tape raises"""
        x = T.Tensor([1.0, 2.0], trainable=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(x)
            vector = x * 2
        with self.assertRaises(ValueError):
            T.backward(tape, vector)
        T.backward(tape, loss)
        with self.assertRaises(RuntimeError):
            T.backward(tape, loss)

        with T.Tape() as other:
            constant = T.reduce_sum(T.Tensor([1.0, 2.0]))
        with self.assertRaises(RuntimeError):
            T.backward(other, constant)

    def test_shape_errors(self):
        """mismatched shapes raise ShapeError, which is a ValueError"""
        with self.assertRaises(T.ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
        with self.assertRaises(T.ShapeError):
            T.Tensor(np.ones((2, 3))) + T.Tensor(np.ones((4,)))
        with self.assertRaises(ValueError):
            T.conv2d(T.Tensor(np.ones((1, 3, 4, 4))), T.Tensor(np.ones((2, 2, 3, 3))))
        with self.assertRaises(ValueError):
            T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_checked_mode(self):
        """checked mode rejects non-finite tensors and is restored afterwards"""
        with T.checked_mode():
            self.assertTrue(T.is_checked())
            with self.assertRaises(ValueError):
                T.Tensor([1.0, np.nan])
        self.assertFalse(T.is_checked())
        T.Tensor([1.0, np.nan])

    def test_conv2d_matches_loops(self):
        """convolution agrees with a direct loop implementation"""
        x = self.rng.normal(size=(2, 3, 6, 5))
        w = self.rng.normal(size=(4, 3, 3, 3))
        out = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64), stride=2, padding=1).data

        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
        expected = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        expected[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
        self.assertTrue(np.allclose(out, expected))

    def test_conv2d_gradients(self):
        """gradients of a strided, padded, rectangular convolution match finite differences"""
        x = self.rng.normal(size=(2, 2, 5, 4))
        w = self.rng.normal(size=(3, 2, 3, 2))
        r = T.Tensor(self.rng.normal(size=(2, 3, 3, 3)), dtype=np.float64)
        wt = T.Tensor(w, dtype=np.float64)
        xt = T.Tensor(x, dtype=np.float64)
        check_gradient(self, lambda t: T.reduce_sum(T.conv2d(t, wt, stride=(2, 1), padding=(1, 0)) * r), x)
        check_gradient(self, lambda t: T.reduce_sum(T.conv2d(xt, t, stride=(2, 1), padding=(1, 0)) * r), w)

    def test_elementwise_gradients(self):
        """tanh, sigmoid, relu, square and broadcasting ops"""
        x = self.rng.normal(size=(3, 4))
        # keep away from the relu kink
        x[np.abs(x) < 0.05] = 0.3
        b = T.Tensor(self.rng.normal(size=(4,)), dtype=np.float64)
        check_gradient(self, lambda t: T.reduce_sum(T.tanh(t) * T.sigmoid(t, mu=3.0, center=0.5)), x)
        check_gradient(self, lambda t: T.reduce_sum(T.square(T.relu(t) - b)), x)
        check_gradient(self, lambda t: T.reduce_mean(T.scale(T.shift(t, 2.0), -0.5) * (t + b)), x)

    def test_reduction_and_layout_gradients(self):
        """sums over axes, transposes, reshapes and row scaling"""
        x = self.rng.normal(size=(4, 3))
        d = T.Tensor(self.rng.normal(size=(2,)), dtype=np.float64)
        r = T.Tensor(self.rng.normal(size=(3,)), dtype=np.float64)
        check_gradient(self, lambda t: T.reduce_sum(T.reduce_sum(t, axis=0) * r), x)
        check_gradient(self, lambda t: T.reduce_sum(T.square(T.reshape(T.transpose(t, (1, 0)), (2, 6)))), x)
        check_gradient(self, lambda t: T.reduce_sum(T.square(T.row_scale(t, d, repeats=2))), x)

        m = self.rng.normal(size=(4, 3))
        mt = T.Tensor(m, dtype=np.float64)
        check_gradient(self, lambda t: T.reduce_sum(T.square(T.row_scale(mt, t, repeats=2))),
                       self.rng.normal(size=(2,)))

    def test_network_op_gradients(self):
        """batchnorm, pooling and the softmax cross-entropy"""
        x = self.rng.normal(size=(2, 3, 4, 4))
        gamma = T.Tensor(self.rng.normal(size=(3,)), dtype=np.float64)
        beta = T.Tensor(self.rng.normal(size=(3,)), dtype=np.float64)
        mean, var = self.rng.normal(size=3), self.rng.uniform(0.5, 2, size=3)
        r = T.Tensor(self.rng.normal(size=(2, 3, 2, 2)), dtype=np.float64)
        def normalised(t):
            return T.mean_pool(T.batchnorm(t, gamma, beta, mean, var), 2)

        check_gradient(self, lambda t: T.reduce_sum(normalised(t) * r), x)
        check_gradient(self, lambda t: T.reduce_sum(T.square(T.mean_pool(t, 0))), x)

        xt = T.Tensor(x, dtype=np.float64)
        full = T.Tensor(self.rng.normal(size=(2, 3, 4, 4)), dtype=np.float64)
        check_gradient(self, lambda t: T.reduce_sum(T.batchnorm(xt, t, beta, mean, var) * full),
                       self.rng.normal(size=(3,)))
        check_gradient(self, lambda t: T.reduce_sum(T.batchnorm(xt, gamma, t, mean, var) * full),
                       self.rng.normal(size=(3,)))

        logits = self.rng.normal(size=(5, 4))
        labels = np.array([0, 3, 1, 1, 2])
        check_gradient(self, lambda t: T.softmax_cross_entropy(t, labels), logits)

    def test_cross_entropy_value(self):
        """uniform logits give log(K)"""
        loss = T.softmax_cross_entropy(T.Tensor(np.zeros((3, 5))), np.array([0, 1, 4]))
        self.assertAlmostEqual(loss.item(), np.log(5), places=6)

    def test_global_pool_shape(self):
        """global pooling returns (N, C)"""
        out = T.mean_pool(T.Tensor(np.ones((2, 3, 4, 4))), 0)
        self.assertEqual(out.shape, (2, 3))
        with self.assertRaises(T.ShapeError):
            T.mean_pool(T.Tensor(np.ones((2, 3, 5, 5))), 2)
