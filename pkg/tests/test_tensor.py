###############################################################################
# Copyright 2024 The kan_mixers Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
###############################################################################
import math
from unittest import TestCase

import numpy as np

from kan_mixers import tensor as T
from kan_mixers.tensor import DimensionError, GradientError, Tensor


class Float64TestCase(TestCase):
    def setUp(self):
        self._previous = T.get_precision()
        T.set_precision('float64')
        T.current_tape().reset()
        self.rng = np.random.default_rng(1234)

    def tearDown(self):
        T.current_tape().reset()
        T.set_precision(self._previous)

    def randn(self, *shape):
        return Tensor(self.rng.standard_normal(shape))

    def assertGradOk(self, f, x, tol=1e-6):
        report = T.grad_check(f, x, h=1e-5, tol=tol)
        self.assertTrue(report.passed, f'max error {report.max_error} at '
                                       f'{report.worst_index}')


class TestPrecision(TestCase):
    def test_switch_and_restore(self):
        with T.precision('float64'):
            self.assertEqual(np.float64, Tensor([1.0]).data.dtype)
            with T.precision('float32'):
                self.assertEqual(np.float32, Tensor([1.0]).data.dtype)
            self.assertEqual('float64', T.get_precision())

    def test_unknown(self):
        with self.assertRaises(ValueError):
            T.set_precision('float16')


class TestMatmul(Float64TestCase):
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(a.data, T.matmul(a, Tensor(np.eye(2))).data)

    def test_hand_arithmetic(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal([[3.0], [7.0]], out.data)

    def test_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn('(2, 3)', str(ctx.exception))
        self.assertEqual(2, str(ctx.exception).count('(2, 3)'))

    def test_batched_broadcast(self):
        a, b = self.randn(4, 2, 3), self.randn(3, 5)
        out = T.matmul(a, b)
        self.assertEqual((4, 2, 5), out.shape)
        np.testing.assert_allclose(a.data @ b.data, out.data)

    def test_grad(self):
        b = self.randn(3, 4)
        self.assertGradOk(lambda a: T.sum_all(T.matmul(a, b)), self.randn(2, 3))
        a = self.randn(5, 2, 3)
        self.assertGradOk(lambda w: T.sum_all(T.matmul(a, w) * T.matmul(a, w)),
                          self.randn(3, 4))

    def test_linear_grad(self):
        w = self.randn(4, 3)
        self.assertGradOk(lambda x: T.sum_all(T.linear(x, w) * T.linear(x, w)),
                          self.randn(2, 5, 3))
        x = self.randn(6, 3)
        self.assertGradOk(lambda v: T.sum_all(T.silu(T.linear(x, v))), w)


class TestElementwise(Float64TestCase):
    def test_broadcast_over_leading_axes_only(self):
        x = self.randn(2, 3)
        np.testing.assert_allclose(x.data + 1.0, T.add(x, Tensor(np.ones(3))).data)
        with self.assertRaises(DimensionError):
            T.add(x, Tensor(np.ones(2)))

    def test_arith_grads(self):
        y = self.randn(3)
        self.assertGradOk(lambda x: T.sum_all((x - y) * (x + y) * -x), self.randn(4, 3))
        x = self.randn(4, 3)
        self.assertGradOk(lambda v: T.sum_all(x * v * v), y)

    def test_reshape(self):
        x = self.randn(2, 6)
        self.assertEqual((3, 4), T.reshape(x, (3, 4)).shape)
        with self.assertRaises(DimensionError):
            T.reshape(x, (5, 2))
        self.assertGradOk(lambda t: T.mean_all(T.reshape(t, (4, 3)) * 2.0), x)

    def test_activation_grads(self):
        for op in (T.silu, T.gelu, T.relu):
            with self.subTest(op=op.__name__):
                x = self.randn(3, 4)
                # keep relu away from its kink
                x.data[np.abs(x.data) < 1e-3] = 0.5
                self.assertGradOk(lambda t, op=op: T.sum_all(op(t) * op(t)), x)


class TestTransposeTokens(Float64TestCase):
    def test_shape(self):
        self.assertEqual((64, 256, 64),
                         T.transpose_tokens(Tensor(np.zeros((64, 64, 256)))).shape)

    def test_involution(self):
        x = self.randn(2, 3, 4)
        np.testing.assert_array_equal(
            x.data, T.transpose_tokens(T.transpose_tokens(x)).data)

    def test_sum_grad_is_ones(self):
        x = Tensor(self.rng.standard_normal((2, 3, 4)), requires_grad=True)
        T.backward(T.sum_all(T.transpose_tokens(x)))
        np.testing.assert_array_equal(np.ones((2, 3, 4)), x.grad)

    def test_rank(self):
        with self.assertRaises(DimensionError):
            T.transpose_tokens(self.randn(3, 4))


class TestLayerNorm(Float64TestCase):
    def setUp(self):
        super().setUp()
        self.gamma, self.beta = Tensor(np.ones(3)), Tensor(np.zeros(3))

    def test_constant_slice(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), self.gamma, self.beta)
        np.testing.assert_array_equal(np.zeros((1, 3)), out.data)

    def test_hand_computation(self):
        out = T.layer_norm(Tensor([1.0, 2.0, 3.0]), self.gamma, self.beta, eps=0.0)
        np.testing.assert_allclose([-1.224744871, 0.0, 1.224744871], out.data,
                                   atol=1e-8)

    def test_standardizes(self):
        gamma, beta = Tensor(np.ones(16)), Tensor(np.zeros(16))
        out = T.layer_norm(self.randn(10, 16) * 3.0 + 2.0, gamma, beta)
        np.testing.assert_allclose(np.zeros(10), out.data.mean(axis=-1), atol=1e-5)
        np.testing.assert_allclose(np.ones(10), out.data.var(axis=-1), atol=1e-5)

    def test_grads(self):
        gamma, beta = self.randn(5), self.randn(5)
        w = self.randn(2, 3, 5)

        def f(x):
            return T.sum_all(T.layer_norm(x, gamma, beta) * w)

        self.assertGradOk(f, self.randn(2, 3, 5))
        x = self.randn(2, 3, 5)
        self.assertGradOk(lambda g: T.sum_all(T.layer_norm(x, g, beta) * w), gamma)
        self.assertGradOk(lambda b: T.sum_all(T.layer_norm(x, gamma, b) * w), beta)

    def test_errors(self):
        with self.assertRaises(DimensionError):
            T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.ones(0)),
                         Tensor(np.zeros(0)))
        with self.assertRaises(DimensionError):
            T.layer_norm(self.randn(2, 4), self.gamma, self.beta)
        with self.assertRaises(ValueError):
            T.layer_norm(self.randn(2, 3), self.gamma, self.beta, eps=-1.0)


class TestSilu(Float64TestCase):
    def test_values(self):
        out = T.silu(Tensor([0.0, 1.0, -20.0])).data
        self.assertEqual(0.0, out[0])
        self.assertAlmostEqual(0.731059, out[1], places=6)
        self.assertAlmostEqual(-20.0 / (1.0 + math.exp(20.0)), out[2], delta=1e-12)
        self.assertTrue(np.all(np.isfinite(T.silu(Tensor([-1000.0, 1000.0])).data)))


class TestDropout(Float64TestCase):
    def test_identity_cases(self):
        x = self.randn(10)
        self.assertIs(x, T.dropout(x, 0.0, True, self.rng))
        self.assertIs(x, T.dropout(x, 0.7, False, self.rng))

    def test_survivor_statistics(self):
        out = T.dropout(Tensor(np.ones(1_000_000)), 0.5, True, self.rng).data
        survivors = out[out != 0]
        self.assertAlmostEqual(0.5, survivors.size / out.size, delta=0.005)
        np.testing.assert_array_equal(2.0, np.unique(survivors))

    def test_rate_range(self):
        for rate in (-0.1, 1.0):
            with self.assertRaises(ValueError):
                T.dropout(self.randn(3), rate, True, self.rng)


class TestGlobalMeanPool(Float64TestCase):
    def test_values(self):
        x = Tensor([[[1.0, 10.0], [3.0, 20.0]]])
        np.testing.assert_array_equal([[2.0, 15.0]], T.global_mean_pool(x).data)
        single = self.randn(2, 1, 4)
        np.testing.assert_array_equal(single.data[:, 0],
                                      T.global_mean_pool(single).data)

    def test_grad(self):
        x = Tensor(self.rng.standard_normal((2, 4, 3)), requires_grad=True)
        T.backward(T.sum_all(T.global_mean_pool(x)))
        np.testing.assert_allclose(np.full((2, 4, 3), 0.25), x.grad)


class TestSoftmaxCrossEntropy(Float64TestCase):
    def test_uniform(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
        self.assertAlmostEqual(math.log(10), loss.item(), places=6)

    def test_saturated(self):
        logits = np.zeros((1, 10))
        logits[0, 3] = 1000.0
        self.assertAlmostEqual(0.0, T.softmax_cross_entropy(Tensor(logits), [3]).item())

    def test_grad(self):
        labels = [1, 0, 3, 3]
        x = Tensor(self.rng.standard_normal((4, 5)), requires_grad=True)
        T.backward(T.softmax_cross_entropy(x, labels))
        p = np.exp(x.data) / np.exp(x.data).sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1.0
        np.testing.assert_allclose(p / 4, x.grad, atol=1e-12)
        self.assertGradOk(lambda t: T.softmax_cross_entropy(t, labels), self.randn(4, 5))

    def test_label_range(self):
        with self.assertRaises(ValueError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward(Float64TestCase):
    def test_sum(self):
        x = Tensor(self.rng.standard_normal(5), requires_grad=True)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(np.ones(5), x.grad)

    def test_square(self):
        x = Tensor(self.rng.standard_normal((2, 3)), requires_grad=True)
        T.backward(T.sum_all(x * x))
        np.testing.assert_allclose(2 * x.data, x.grad)

    def test_tape_reset(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.sum_all(x * x))
        self.assertEqual(0, len(T.current_tape()))

    def test_losses_are_zero_dimensional(self):
        x = Tensor(np.ones(5), requires_grad=True)
        self.assertEqual((), Tensor(2.5).shape)
        self.assertEqual((), T.sum_all(x).shape)
        self.assertEqual((), T.mean_all(x).shape)
        loss = T.softmax_cross_entropy(Tensor(np.zeros((2, 10)), requires_grad=True),
                                       [1, 2])
        self.assertEqual((), loss.shape)
        T.backward(loss)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(np.ones(5), x.grad)

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(GradientError):
            T.backward(x * x)

    def test_disconnected(self):
        with self.assertRaises(GradientError):
            T.backward(T.sum_all(Tensor([1.0, 2.0])))

    def test_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with T.no_grad():
            y = T.sum_all(x * x)
        self.assertFalse(y.requires_grad)
        self.assertEqual(0, len(T.current_tape()))


class TestGradCheck(Float64TestCase):
    def test_linear_function(self):
        w = self.randn(6)
        report = T.grad_check(lambda x: T.sum_all(x * w), self.randn(6))
        self.assertLess(report.max_error, 1e-9)
        self.assertEqual(6, report.checked)

    def test_layer_norm_composite(self):
        gamma, beta = self.randn(4), self.randn(4)
        self.assertGradOk(
            lambda x: T.sum_all(T.silu(T.layer_norm(x, gamma, beta))), self.randn(3, 4))

    def test_sampling(self):
        report = T.grad_check(lambda x: T.sum_all(x * x), self.randn(20, 20),
                              max_elements=7)
        self.assertEqual(7, report.checked)
        self.assertTrue(report.passed)

    def test_small_gradients_scored_relative(self):
        def scaled(x):
            return T.record('scaled', (x,), x.data * 1e-6, lambda g: (g * 1.1e-6,))

        report = T.grad_check(lambda x: T.sum_all(scaled(x)), Tensor([1.0, 2.0, 3.0]))
        self.assertFalse(report.passed)
        self.assertAlmostEqual(1.0 / 11.0, report.max_error, places=4)
        self.assertAlmostEqual(1e-7, report.max_abs_error, places=10)

    def test_rounding_noise_below_floor(self):
        report = T.grad_check(lambda x: T.sum_all(x * 1e-12), self.randn(4))
        self.assertEqual(0.0, report.max_error)
        self.assertTrue(report.passed)

    def test_corrupted_backward_fails(self):
        def broken_square(x):
            return T.record('broken', (x,), x.data * x.data, lambda g: (g * x.data,))

        report = T.grad_check(lambda x: T.sum_all(broken_square(x)),
                              Tensor([1.0, 2.0, 3.0]))
        self.assertFalse(report.passed)

    def test_non_finite(self):
        with self.assertRaises(GradientError):
            T.grad_check(lambda x: T.sum_all(x * np.inf), Tensor([1.0]))
