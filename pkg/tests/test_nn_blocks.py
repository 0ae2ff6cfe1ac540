""" testing network components and the optimizer """

import unittest

import numpy as np

from langskill import autodiff as ad
from langskill.autodiff import Tensor
from langskill.errors import NonFiniteError, ShapeError
from langskill.nn_blocks import (
    Adam,
    AdamState,
    CausalTransformer,
    Linear,
    PositionalEmbedding,
    TransformerConfig,
    WarmupSchedule,
    adam_step,
    block_parameter_count,
    causal_mask,
    transformer_parameter_count,
)


class TransformerTests(unittest.TestCase):
    """causal transformer stack"""

    def setUp(self):
        self.cfg = TransformerConfig(n_layers=2, embed_dim=8, n_heads=2, dropout=0.1, max_seq_len=6)
        self.model = CausalTransformer(self.cfg, np.random.default_rng(0))

    def test_parameter_count_formula(self):
        """two layer norms, qkv, projection and MLP per block plus the final norm"""
        self.assertEqual(block_parameter_count(8), 12 * 64 + 13 * 8)
        self.assertEqual(self.model.parameter_count(), transformer_parameter_count(self.cfg))
        self.assertEqual(self.model.parameter_count(), 2 * block_parameter_count(8) + 16)

    def test_heads_must_divide_width(self):
        with self.assertRaises(ValueError):
            TransformerConfig(embed_dim=10, n_heads=3)

    def test_causal_mask(self):
        mask = causal_mask(3)
        self.assertFalse(mask[2].any())
        self.assertTrue(mask[0, 1] and mask[0, 2] and mask[1, 2])

    def test_future_positions_do_not_leak(self):
        """changing later tokens leaves earlier outputs unchanged"""
        self.model.eval()
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(5, 8))
        altered = tokens.copy()
        altered[3:] = rng.normal(size=(2, 8))
        with ad.no_grad():
            first = self.model(Tensor(tokens), prefix_len=2).values
            second = self.model(Tensor(altered), prefix_len=2).values
        np.testing.assert_allclose(first[:3], second[:3], atol=1e-12)
        self.assertFalse(np.allclose(first[3:], second[3:]))

    def test_eval_mode_is_deterministic(self):
        """dropout is off in eval mode"""
        self.model.eval()
        self.assertFalse(self.model.blocks[1].attn.training)
        tokens = Tensor(np.random.default_rng(2).normal(size=(4, 8)))
        with ad.no_grad():
            first = self.model(tokens, rng=np.random.default_rng(3)).values
            second = self.model(tokens, rng=np.random.default_rng(4)).values
        np.testing.assert_array_equal(first, second)

    def test_overflow_and_prefix_errors(self):
        with self.assertRaises(ShapeError):
            self.model(Tensor(np.zeros((7, 8))))
        with self.assertRaises(ShapeError):
            self.model(Tensor(np.zeros((3, 5))))
        with self.assertRaises(ValueError):
            self.model(Tensor(np.zeros((3, 8))), prefix_len=4)

    def test_gradients_reach_every_parameter(self):
        self.model.train()
        out = self.model(Tensor(np.random.default_rng(5).normal(size=(4, 8))), rng=np.random.default_rng(6))
        ad.backward(ad.sum_(ad.square(out)))
        for name, param in self.model.named_parameters():
            self.assertIsNotNone(param.grad, name)


class LayerTests(unittest.TestCase):
    """linear layers and positions"""

    def test_linear_shape_error(self):
        layer = Linear(3, 2, np.random.default_rng(0))
        self.assertEqual(layer(Tensor(np.ones((4, 3)))).shape, (4, 2))
        with self.assertRaises(ShapeError):
            layer(Tensor(np.ones((4, 2))))

    def test_linear_without_bias(self):
        layer = Linear(3, 2, np.random.default_rng(0), bias=False)
        self.assertEqual([name for name, _ in layer.named_parameters()], ["weight"])

    def test_positional_offset(self):
        """offset rows come from the shared table"""
        table = PositionalEmbedding(6, 4, np.random.default_rng(0))
        np.testing.assert_array_equal(table(2, offset=3).values, table.weight.values[3:5])
        with self.assertRaises(ShapeError):
            table(4, offset=3)


class OptimizerTests(unittest.TestCase):
    """Adam and the warm-up schedule"""

    def test_warmup_schedule(self):
        schedule = WarmupSchedule(warmup_steps=100, base_lr=1e-3)
        self.assertEqual(schedule.lr(0), 0.0)
        self.assertAlmostEqual(schedule.lr(50), 5e-4)
        self.assertEqual(schedule.lr(500), 1e-3)
        self.assertEqual(WarmupSchedule(0, 1e-3).lr(0), 1e-3)
        with self.assertRaises(ValueError):
            WarmupSchedule(10, 0.0)

    def test_first_step_moves_by_learning_rate(self):
        """bias correction makes the first update lr * sign(grad)"""
        param = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        optimizer = Adam({"policy": [("w", param)]}, {"policy": WarmupSchedule(0, 0.01)})
        param.grad = np.array([0.5, -3.0])
        applied = optimizer.step()
        self.assertEqual(applied, {"policy": 0.01})
        np.testing.assert_allclose(param.values, [0.99, -1.99], atol=1e-6)

    def test_step_reads_the_schedule(self):
        """a scalar with constant gradient one moves by the warmed-up rate"""
        param = Tensor(np.array([0.0]), requires_grad=True)
        param.grad = np.ones(1)
        state = AdamState(step=1)
        applied = adam_step(state, [("w", param)], WarmupSchedule(warmup_steps=2, base_lr=0.1))
        self.assertAlmostEqual(applied, 0.05)
        self.assertAlmostEqual(param.values[0], -0.05, places=6)
        state.step = 2
        self.assertAlmostEqual(adam_step(state, [("w", param)], WarmupSchedule(2, 0.1)), 0.1)

    def test_groups_use_their_own_rates(self):
        a = Tensor(np.zeros(1), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        optimizer = Adam(
            {"policy": [("a", a)], "language": [("b", b)]},
            {"policy": WarmupSchedule(0, 0.1), "language": WarmupSchedule(0, 0.01)},
        )
        a.grad = np.ones(1)
        b.grad = np.ones(1)
        optimizer.step()
        self.assertAlmostEqual(a.values[0], -0.1, places=6)
        self.assertAlmostEqual(b.values[0], -0.01, places=6)

    def test_non_finite_gradient_updates_nothing(self):
        param = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        optimizer = Adam({"policy": [("w", param)]}, {"policy": WarmupSchedule(0, 0.1)})
        param.grad = np.array([np.nan, 1.0])
        with self.assertRaises(NonFiniteError):
            optimizer.step()
        np.testing.assert_array_equal(param.values, [1.0, 2.0])
        self.assertEqual(optimizer.state.step, 0)

    def test_missing_schedule(self):
        with self.assertRaises(ValueError):
            Adam({"policy": []}, {})

    def test_minimizes_a_quadratic(self):
        param = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        optimizer = Adam({"policy": [("w", param)]}, {"policy": WarmupSchedule(0, 0.1)})
        initial = float(np.sum(param.values**2))
        for _ in range(100):
            optimizer.zero_grad()
            ad.backward(ad.sum_(ad.square(param)))
            optimizer.step()
        self.assertLess(float(np.sum(param.values**2)), 0.1 * initial)


if __name__ == "__main__":
    unittest.main()
