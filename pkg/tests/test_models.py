""" testing skill models and the flat baseline """

import math
import unittest

import numpy as np

from langskill import autodiff as ad
from langskill.autodiff import Tensor
from langskill.clustering import fit_segment_clusters, state_one_hot
from langskill.errors import ShapeError
from langskill.models import (
    FlatModel,
    ModelConfig,
    SkillModel,
    audit_bottleneck,
    build_model,
    load_state_arrays,
    parameter_digest,
)
from langskill.world.dataset import TrajectoryRecord
from langskill.world.expert import expert_rollout
from langskill.world.tasks import generate_task


def small_config(variant="lisa", **kwargs):
    params = dict(embed_dim=16, n_heads=2, num_skills=4, code_dim=4, horizon=3, dropout=0.0)
    params.update(kwargs)
    return ModelConfig(variant=variant, **params)


def demo_records(count=4):
    records = []
    for seed in range(count):
        state, instruction = generate_task(seed, 2)
        records.append(TrajectoryRecord.from_trajectory(expert_rollout(state, instruction)))
    return records


class SkillModelTests(unittest.TestCase):
    """segment losses and code selection"""

    @classmethod
    def setUpClass(cls):
        cls.records = demo_records(6)

    def setUp(self):
        self.record = max(self.records, key=lambda r: len(r.actions))
        self.states = np.asarray(self.record.states)
        self.assertGreater(len(self.states), 6)

    def test_lisa_loss(self):
        model = build_model(small_config(), np.random.default_rng(0))
        loss = model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        segments = math.ceil(len(self.record.actions) / 3)
        self.assertTrue(math.isfinite(loss.bc_loss.item()))
        self.assertIsNotNone(loss.vq_loss)
        self.assertEqual(len(loss.code_indices), segments)
        self.assertEqual(len(loss.assignments), segments)
        self.assertTrue(all(0 <= i < 4 for i in loss.code_indices))

    def test_gradient_reaches_language_through_codes(self):
        """behaviour cloning alone trains the predictor and language encoder"""
        model = build_model(small_config(), np.random.default_rng(0))
        loss = model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        ad.backward(loss.bc_loss)
        groups = model.parameter_groups()
        for group in ("policy", "skill_predictor", "language"):
            self.assertTrue(any(p.grad is not None and np.any(p.grad) for _, p in groups[group]), group)

    def test_continuous_has_no_codebook(self):
        model = build_model(small_config("continuous"), np.random.default_rng(0))
        loss = model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        self.assertIsNone(loss.vq_loss)
        self.assertEqual(set(loss.code_indices), {-1})
        self.assertFalse(model.uses_ema)

    def test_mlp_predictor(self):
        model = build_model(small_config("mlp-predictor"), np.random.default_rng(0))
        loss = model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        self.assertTrue(math.isfinite(loss.bc_loss.item()))
        self.assertTrue(model.uses_ema)

    def test_kmeans_variant(self):
        model = build_model(small_config("kmeans"), np.random.default_rng(0))
        with self.assertRaises(ValueError):
            model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        clusters = fit_segment_clusters(self.records, 4, 3, model.language_feature)
        model.set_kmeans_centers(clusters.centers)
        np.testing.assert_allclose(model.codebook.vectors, clusters.centers @ model.kmeans_projection)
        loss = model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        self.assertIsNone(loss.vq_loss)
        self.assertEqual(model.parameter_groups()["skill_predictor"], [])
        self.assertEqual(model.parameter_groups()["language"], [])
        self.assertFalse(model.uses_ema)
        with self.assertRaises(ShapeError):
            model.set_kmeans_centers(clusters.centers[:, :5])

    def test_kmeans_code_is_the_projected_center(self):
        model = build_model(small_config("kmeans"), np.random.default_rng(0))
        model.set_kmeans_centers(fit_segment_clusters(self.records, 4, 3, model.language_feature).centers)
        language = model.language_feature(self.record.token_ids)
        tokens = model.lang_encoder(self.record.token_ids).values
        np.testing.assert_allclose(language, tokens.mean(axis=0))
        code, index = model.kmeans_code(language, self.states[3])
        feature = np.concatenate([language, state_one_hot(self.states[3])])
        expected = int(np.argmin(np.sum((model.kmeans_centers - feature) ** 2, axis=1)))
        self.assertEqual(index, expected)
        np.testing.assert_allclose(code.values, model.kmeans_centers[expected] @ model.kmeans_projection)
        predicted, predicted_index, _ = model.predict_code(self.record.token_ids, self.states[:4])
        self.assertEqual(predicted_index, expected)
        np.testing.assert_allclose(predicted, code.values)

    def test_segment_codes_ignore_later_states(self):
        model = build_model(small_config(), np.random.default_rng(1)).eval()
        altered = self.states.copy()
        altered[4:] = self.states[0]
        with ad.no_grad():
            lang = model.lang_encoder(self.record.token_ids)
            first = model.predictor.segment_embeddings(lang, model.obs_encoder(self.states), 3)
            second = model.predictor.segment_embeddings(lang, model.obs_encoder(altered), 3)
        np.testing.assert_allclose(first[0].values, second[0].values, atol=1e-12)
        np.testing.assert_allclose(first[1].values, second[1].values, atol=1e-12)

    def test_inference_matches_training_embeddings(self):
        """predicting from the states seen so far gives the training-time embedding"""
        model = build_model(small_config(), np.random.default_rng(2)).eval()
        with ad.no_grad():
            lang = model.lang_encoder(self.record.token_ids)
            embeddings = model.predictor.segment_embeddings(lang, model.obs_encoder(self.states), 3)
        _, index, z_tilde = model.predict_code(self.record.token_ids, self.states[:4])
        np.testing.assert_allclose(z_tilde, embeddings[1].values, atol=1e-10)
        self.assertEqual(index, model.codebook.nearest(embeddings[1].values))

    def test_act_logits(self):
        model = build_model(small_config(), np.random.default_rng(0)).eval()
        code, _, _ = model.predict_code(self.record.token_ids, self.states[:1])
        self.assertEqual(model.act_logits(code, self.states[:2]).shape, (6,))
        with self.assertRaises(ShapeError):
            model.policy(Tensor(code), model.obs_encoder(self.states[:4]))


class FlatModelTests(unittest.TestCase):
    def test_flat_loss(self):
        record = demo_records(1)[0]
        model = build_model(small_config("flat"), np.random.default_rng(0))
        self.assertIsInstance(model, FlatModel)
        self.assertIsNone(model.codebook)
        loss = model.trajectory_loss(record.token_ids, np.asarray(record.states), record.actions)
        self.assertTrue(math.isfinite(loss.bc_loss.item()))
        self.assertEqual(model.act_logits(record.token_ids, np.asarray(record.states[:3])).shape, (6,))

    def test_unknown_variant(self):
        with self.assertRaises(ValueError):
            build_model(small_config("vae"), np.random.default_rng(0))
        with self.assertRaises(ValueError):
            SkillModel(small_config("flat"), np.random.default_rng(0))


class BottleneckTests(unittest.TestCase):
    """language reaches the policy only through the code lookup"""

    def setUp(self):
        self.record = demo_records(1)[0]

    def audit(self, variant):
        model = build_model(small_config(variant), np.random.default_rng(0))
        return audit_bottleneck(model, self.record.token_ids, np.asarray(self.record.states))

    def test_quantized_variants_pass(self):
        for variant in ("lisa", "mlp-predictor"):
            result = self.audit(variant)
            self.assertTrue(result.passed, variant)
            self.assertFalse(result.skipped)

    def test_continuous_leaks(self):
        result = self.audit("continuous")
        self.assertFalse(result.passed)
        self.assertTrue(result.leaked_parameters)

    def test_flat_is_skipped(self):
        self.assertTrue(self.audit("flat").skipped)


class ObjectiveTests(unittest.TestCase):
    """loss weighting, code conditioning and capacity"""

    def setUp(self):
        self.record = max(demo_records(4), key=lambda r: len(r.actions))
        self.states = np.asarray(self.record.states)

    def grads(self, model, weight):
        model.zero_grad()
        loss = model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        total = loss.bc_loss if weight is None else ad.add(loss.bc_loss, ad.scale(loss.vq_loss, weight))
        ad.backward(total)
        return {name: None if p.grad is None else p.grad.copy() for name, p in model.named_parameters()}

    def test_zero_weight_commitment_adds_no_gradient(self):
        model = build_model(small_config(), np.random.default_rng(0))
        weighted = self.grads(model, 0.0)
        plain = self.grads(model, None)
        for name, grad in plain.items():
            if grad is None:
                self.assertTrue(weighted[name] is None or not np.any(weighted[name]), name)
            else:
                np.testing.assert_allclose(weighted[name], grad, rtol=1e-12, atol=1e-15, err_msg=name)
        model.zero_grad()
        loss = model.trajectory_loss(self.record.token_ids, self.states, self.record.actions)
        self.assertGreater(loss.vq_loss.item(), 0.0)
        ad.backward(ad.scale(loss.vq_loss, 0.0))
        for name, p in model.predictor.named_parameters():
            self.assertTrue(p.grad is None or not np.any(p.grad), name)

    def test_policy_output_depends_on_code(self):
        model = build_model(small_config(), np.random.default_rng(0)).eval()
        window = self.states[:3]
        first = model.act_logits(model.codebook.vectors[0], window)
        second = model.act_logits(model.codebook.vectors[1], window)
        self.assertGreater(np.max(np.abs(first - second)), 1e-9)
        np.testing.assert_array_equal(first, model.act_logits(model.codebook.vectors[0], window))

    def test_flat_capacity_matches_skill_model(self):
        """at default sizes the flat policy is within 10% of predictor plus skill policy"""
        rng = np.random.default_rng(0)
        skill = build_model(ModelConfig(), rng)
        flat = build_model(ModelConfig(variant="flat"), rng)
        skill_count = skill.predictor.parameter_count() + skill.policy.parameter_count()
        flat_count = flat.policy.parameter_count()
        self.assertLess(abs(flat_count - skill_count) / skill_count, 0.1)


class StateArrayTests(unittest.TestCase):
    def test_load_restores_digest(self):
        source = build_model(small_config(), np.random.default_rng(0))
        target = build_model(small_config(), np.random.default_rng(1))
        self.assertNotEqual(parameter_digest(source), parameter_digest(target))
        load_state_arrays(target, source.state_arrays())
        self.assertEqual(parameter_digest(source), parameter_digest(target))

    def test_missing_and_misshapen_arrays(self):
        source = build_model(small_config(), np.random.default_rng(0))
        arrays = dict(source.state_arrays())
        del arrays["policy.action_head.weight"]
        with self.assertRaises(KeyError):
            load_state_arrays(source, arrays)
        wide = build_model(small_config(embed_dim=8), np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            load_state_arrays(wide, source.state_arrays())

    def test_kmeans_codes_survive_a_reseeded_load(self):
        source = build_model(small_config("kmeans"), np.random.default_rng(0))
        source.set_kmeans_centers(fit_segment_clusters(demo_records(), 4, 3, source.language_feature).centers)
        target = build_model(small_config("kmeans"), np.random.default_rng(5))
        load_state_arrays(target, source.state_arrays())
        np.testing.assert_array_equal(target.kmeans_projection, source.kmeans_projection)
        np.testing.assert_array_equal(target.codebook.vectors, source.codebook.vectors)


if __name__ == "__main__":
    unittest.main()
