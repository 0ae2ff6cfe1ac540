""" testing the skill codebook """

import math
import unittest

import numpy as np

from langskill import autodiff as ad
from langskill.autodiff import Tensor
from langskill.codebook import Codebook, ema_update, mi_estimate, perplexity, quantize
from langskill.errors import GatherIndexError, NonFiniteError, ShapeError


def brute_force_nearest(vectors, z):
    best, best_distance = 0, math.inf
    for index, row in enumerate(vectors):
        distance = sum((a - b) ** 2 for a, b in zip(row, z))
        if distance < best_distance:
            best, best_distance = index, distance
    return best


def loop_mi(vectors, embeddings):
    """Mutual information in bits computed entry by entry."""
    rows = []
    for z in embeddings:
        weights = [math.exp(-sum((a - b) ** 2 for a, b in zip(z, code)) / 2.0) for code in vectors]
        total = sum(weights)
        rows.append([w / total for w in weights])
    marginal = [sum(row[k] for row in rows) / len(rows) for k in range(len(vectors))]

    def entropy(probs):
        return -sum(p * math.log2(p) for p in probs if p > 0)

    return entropy(marginal) - sum(entropy(row) for row in rows) / len(rows)


class LookupTests(unittest.TestCase):
    """nearest-code search and straight-through output"""

    def setUp(self):
        self.codebook = Codebook(12, 5, np.random.default_rng(0))

    def test_matches_brute_force(self):
        """random codebooks, some with repeated rows, agree with an exhaustive search"""
        rng = np.random.default_rng(1)
        for case in range(1000):
            codebook = Codebook(int(rng.integers(1, 17)), int(rng.integers(1, 8)), rng)
            if case % 4 == 0 and codebook.num_codes > 1:
                low, high = sorted(rng.choice(codebook.num_codes, size=2, replace=False))
                codebook.vectors[high] = codebook.vectors[low]
            z = rng.normal(size=codebook.code_dim)
            self.assertEqual(codebook.nearest(z), brute_force_nearest(codebook.vectors, z), case)

    def test_repeated_rows_resolve_to_lowest_index(self):
        rng = np.random.default_rng(6)
        codebook = Codebook(6, 4, rng)
        codebook.vectors[4] = codebook.vectors[1]
        codebook.vectors[5] = codebook.vectors[1]
        for _ in range(50):
            z = codebook.vectors[1] + rng.normal(scale=1e-3, size=4)
            self.assertEqual(codebook.nearest(z), 1)

    def test_ties_go_to_lowest_index(self):
        codebook = Codebook(3, 2)
        codebook.vectors = np.array([[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0]])
        self.assertEqual(codebook.nearest(np.zeros(2)), 1)
        codebook.vectors = np.array([[5.0, 5.0], [1.0, 1.0], [1.0, 1.0]])
        self.assertEqual(codebook.nearest(np.array([0.9, 1.1])), 1)

    def test_quantize_output(self):
        """forward is the code, the loss is the squared distance"""
        z = Tensor(np.random.default_rng(2).normal(size=5), requires_grad=True)
        result = quantize(self.codebook, z)
        code = self.codebook.vectors[result.code_index]
        np.testing.assert_array_equal(result.code_vector, code)
        np.testing.assert_array_equal(result.straight_through_output.values, code)
        self.assertAlmostEqual(result.commitment_loss.item(), float(np.sum((z.values - code) ** 2)))
        ad.backward(result.commitment_loss)
        np.testing.assert_allclose(z.grad, 2.0 * (z.values - code))

    def test_straight_through_passes_gradient(self):
        z = Tensor(np.ones(5), requires_grad=True)
        result = self.codebook.quantize(z)
        ad.backward(ad.sum_(ad.scale(result.straight_through_output, 2.0)))
        np.testing.assert_array_equal(z.grad, np.full(5, 2.0))

    def test_quantize_errors(self):
        with self.assertRaises(ShapeError):
            quantize(self.codebook, Tensor(np.ones(4)))
        with self.assertRaises(NonFiniteError):
            quantize(self.codebook, Tensor(np.array([1.0, np.nan, 0.0, 0.0, 0.0])))

    def test_bad_construction(self):
        with self.assertRaises(ValueError):
            Codebook(0, 4)
        with self.assertRaises(ValueError):
            Codebook(4, 4, decay=1.0)


class MovingAverageTests(unittest.TestCase):
    """codebook updates"""

    def test_empty_batch_is_a_no_op(self):
        codebook = Codebook(4, 3, np.random.default_rng(0))
        before = codebook.vectors.copy()
        ema_update(codebook, [])
        np.testing.assert_array_equal(codebook.vectors, before)

    def test_index_out_of_range(self):
        codebook = Codebook(4, 3, np.random.default_rng(0))
        with self.assertRaises(GatherIndexError):
            ema_update(codebook, [(4, np.zeros(3))])

    def test_counts_decay(self):
        codebook = Codebook(2, 3, np.random.default_rng(0), decay=0.9)
        codebook.ema_update([(0, np.ones(3)), (0, np.ones(3))])
        np.testing.assert_allclose(codebook.ema_cluster_size, [0.2, 0.0])
        np.testing.assert_allclose(codebook.ema_sum, [[0.2, 0.2, 0.2], [0.0, 0.0, 0.0]])

    def test_first_update_lands_on_the_point(self):
        codebook = Codebook(2, 3, np.random.default_rng(0), decay=0.99)
        point = np.array([0.7, -1.2, 0.4])
        ema_update(codebook, [(1, point)])
        np.testing.assert_allclose(codebook.vectors[1], point, rtol=2e-3)

    def test_unassigned_code_keeps_its_row(self):
        codebook = Codebook(4, 3, np.random.default_rng(0))
        untouched = codebook.vectors[2:].copy()
        for _ in range(10):
            ema_update(codebook, [(0, np.ones(3)), (1, -np.ones(3))])
        np.testing.assert_array_equal(codebook.vectors[2:], untouched)
        self.assertTrue(np.all(np.isfinite(codebook.vectors)))

    def test_converges_to_assigned_mean(self):
        """a code fed the same points settles on their mean"""
        rng = np.random.default_rng(3)
        codebook = Codebook(2, 3, rng, decay=0.9)
        points = rng.normal(loc=[2.0, -1.0, 0.5], size=(20, 3))
        for _ in range(300):
            ema_update(codebook, [(0, point) for point in points])
        np.testing.assert_allclose(codebook.vectors[0], points.mean(axis=0), rtol=1e-5)

    def test_converges_at_default_decay(self):
        """500 updates at decay 0.99 bring a code within 1e-3 of its target"""
        rng = np.random.default_rng(7)
        codebook = Codebook(20, 4, rng, decay=0.99)
        point = np.array([1.5, -0.5, 2.0, 0.25])
        for _ in range(500):
            ema_update(codebook, [(3, point)])
        self.assertLess(np.max(np.abs(codebook.vectors[3] - point)), 1e-3)

        points = rng.normal(loc=[-1.0, 0.0, 1.0, 3.0], size=(16, 4))
        for _ in range(500):
            ema_update(codebook, [(7, p) for p in points])
        self.assertLess(np.max(np.abs(codebook.vectors[7] - points.mean(axis=0))), 1e-3)


class DiagnosticsTests(unittest.TestCase):
    """perplexity and mutual information"""

    def test_perplexity(self):
        codebook = Codebook(4, 2)
        self.assertAlmostEqual(perplexity(codebook, [0, 1, 2, 3]), 4.0)
        self.assertAlmostEqual(perplexity(codebook, [2, 2, 2]), 1.0)
        self.assertAlmostEqual(perplexity(None, [0, 0, 1, 1]), 2.0)
        self.assertAlmostEqual(perplexity(codebook, [0, 0, 0, 1]), 1.7548, delta=1e-4)
        with self.assertRaises(ValueError):
            perplexity(codebook, [])
        with self.assertRaises(GatherIndexError):
            perplexity(codebook, [0, 4])

    def test_mi_two_distant_codes_is_one_bit(self):
        codebook = Codebook(2, 2)
        codebook.vectors = np.array([[0.0, 0.0], [8.0, 0.0]])
        embeddings = np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 0.0], [8.0, 0.0]])
        self.assertAlmostEqual(mi_estimate(codebook, embeddings), 1.0, delta=1e-6)

    def test_mi_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            codebook = Codebook(6, 3, rng)
            embeddings = rng.normal(size=(10, 3))
            self.assertAlmostEqual(
                mi_estimate(codebook, embeddings), loop_mi(codebook.vectors, embeddings), delta=1e-6
            )

    def test_mi_bounds(self):
        rng = np.random.default_rng(5)
        codebook = Codebook(4, 2, rng)
        value = mi_estimate(codebook, rng.normal(scale=3.0, size=(50, 2)))
        self.assertGreaterEqual(value, 0.0)
        self.assertLessEqual(value, math.log2(4) + 1e-9)

    def test_mi_single_code_is_zero(self):
        codebook = Codebook(1, 3, np.random.default_rng(0))
        self.assertEqual(mi_estimate(codebook, np.random.default_rng(1).normal(size=(8, 3))), 0.0)

    def test_mi_symmetric_inputs_are_zero(self):
        """inputs equidistant from every code carry no information"""
        codebook = Codebook(2, 2)
        codebook.vectors = np.array([[1.0, 0.0], [-1.0, 0.0]])
        self.assertAlmostEqual(mi_estimate(codebook, np.zeros((5, 2))), 0.0)

    def test_mi_separated_codes(self):
        """one input on each of three distant codes gives log2 3"""
        codebook = Codebook(3, 3)
        codebook.vectors = 10.0 * np.eye(3)
        self.assertAlmostEqual(mi_estimate(codebook, 10.0 * np.eye(3)), math.log2(3), places=6)

    def test_mi_shape_error(self):
        with self.assertRaises(ShapeError):
            mi_estimate(Codebook(2, 3), np.zeros((4, 2)))
        with self.assertRaises(ShapeError):
            mi_estimate(Codebook(2, 3), np.zeros((0, 3)))


if __name__ == "__main__":
    unittest.main()
