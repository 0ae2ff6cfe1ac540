""" testing training runs, checkpoints and transfer """

import csv
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from langskill.codebook import Codebook, ema_update, mi_estimate
from langskill.errors import CheckpointError, TrainingDivergedError
from langskill.models import parameter_digest
from langskill.trainer import METRICS_HEADER, TrainConfig, Trainer, load_for_transfer, model_from_checkpoint
from langskill.world.dataset import TrajectoryRecord
from langskill.world.expert import expert_rollout
from langskill.world.tasks import generate_task


def tiny_config(**kwargs):
    params = dict(
        embed_dim=16,
        n_heads=2,
        num_skills=4,
        code_dim=4,
        horizon=3,
        batch_size=2,
        iterations=2,
        warmup_steps=0,
        lr_policy=1e-3,
        lr_skill_predictor=1e-3,
        lr_language=1e-3,
        probe_every=2,
        probe_episodes=2,
        log_every=1,
        kmeans_iterations=5,
    )
    params.update(kwargs)
    return TrainConfig(**params)


def make_records(count, offset=0):
    records = []
    for seed in range(offset, offset + count):
        state, instruction = generate_task(seed, 1 + seed % 2)
        records.append(TrajectoryRecord.from_trajectory(expert_rollout(state, instruction)))
    return records


class TrainerTests(unittest.TestCase):
    """single steps and short runs"""

    @classmethod
    def setUpClass(cls):
        cls.train_records = make_records(6)
        cls.probe_records = make_records(2, offset=100)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def trainer(self, out_dir=None, **kwargs):
        return Trainer(tiny_config(**kwargs), self.train_records, self.probe_records, out_dir=out_dir)

    def test_run_writes_metrics_and_checkpoints(self):
        result = self.trainer(self.out).run()
        self.assertEqual(len(result.metrics), 2)
        with open(result.metrics_path, newline="") as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(tuple(rows[0]), METRICS_HEADER)
        self.assertEqual([row[0] for row in rows[1:]], ["1", "2"])
        self.assertEqual(rows[1][METRICS_HEADER.index("probe_success")], "")
        self.assertNotEqual(rows[2][METRICS_HEADER.index("probe_success")], "")
        self.assertTrue((self.out / "final.ckpt").exists())
        self.assertEqual(result.best_checkpoint, self.out / "best.ckpt")
        self.assertIsNotNone(result.best_success)

    def test_runs_are_byte_identical(self):
        """same seed and data give the same checkpoint bytes"""
        first = self.trainer(self.out / "a").run()
        second = self.trainer(self.out / "b").run()
        self.assertEqual(first.final_checkpoint.read_bytes(), second.final_checkpoint.read_bytes())
        for a, b in zip(first.metrics, second.metrics):
            self.assertEqual((a.bc_loss, a.vq_loss, a.mi_bits), (b.bc_loss, b.vq_loss, b.mi_bits))

    def test_step_metrics(self):
        trainer = self.trainer()
        row = trainer.train_step(trainer.sample_batch())
        self.assertEqual(row.iteration, 1)
        self.assertAlmostEqual(row.total_loss, row.bc_loss + 0.25 * row.vq_loss)
        self.assertGreaterEqual(row.mi_bits, 0.0)
        self.assertLessEqual(row.mi_bits, np.log2(4) + 1e-9)
        self.assertGreaterEqual(row.perplexity, 1.0)
        self.assertEqual(row.lr_policy, 1e-3)

    def test_codebook_moves_unless_frozen(self):
        trainer = self.trainer()
        before = trainer.model.codebook.vectors.copy()
        trainer.train_step(trainer.sample_batch())
        self.assertFalse(np.array_equal(before, trainer.model.codebook.vectors))
        frozen = self.trainer(freeze_codebook=True)
        before = frozen.model.codebook.vectors.copy()
        frozen.train_step(frozen.sample_batch())
        np.testing.assert_array_equal(before, frozen.model.codebook.vectors)

    def test_frozen_predictor_is_not_updated(self):
        trainer = self.trainer(freeze_codebook=True, freeze_predictor=True)
        before = {name: p.values.copy() for name, p in trainer.model.predictor.named_parameters()}
        trainer.train_step(trainer.sample_batch())
        for name, p in trainer.model.predictor.named_parameters():
            np.testing.assert_array_equal(before[name], p.values, name)

    def test_every_variant_steps(self):
        for variant in ("flat", "kmeans", "continuous", "mlp-predictor"):
            trainer = self.trainer(variant=variant)
            row = trainer.train_step(trainer.sample_batch())
            self.assertTrue(np.isfinite(row.bc_loss), variant)
        flat = self.trainer(variant="flat")
        self.assertEqual(flat.train_step(flat.sample_batch()).mi_bits, 0.0)

    def test_flat_run_has_no_skill_updates(self):
        trainer = self.trainer(variant="flat")
        self.assertEqual(trainer.optimizer.groups["skill_predictor"], [])
        self.assertIsNone(trainer.model.codebook)
        language = {name: p.values.copy() for name, p in trainer.model.lang_encoder.named_parameters()}
        row = trainer.train_step(trainer.sample_batch())
        self.assertTrue(math.isnan(row.perplexity))
        self.assertEqual((row.vq_loss, row.mi_bits), (0.0, 0.0))
        self.assertEqual(row.total_loss, row.bc_loss)
        moved = [not np.array_equal(language[n], p.values) for n, p in trainer.model.lang_encoder.named_parameters()]
        self.assertTrue(any(moved))

    def test_zero_commitment_weight(self):
        trainer = self.trainer(vq_weight=0.0)
        row = trainer.train_step(trainer.sample_batch())
        self.assertGreater(row.vq_loss, 0.0)
        self.assertEqual(row.total_loss, row.bc_loss)

    def test_single_trajectory_is_memorized(self):
        record = min(self.train_records, key=lambda r: len(r.actions))
        cfg = tiny_config(
            batch_size=1,
            dropout=0.0,
            lr_policy=1e-2,
            lr_skill_predictor=1e-2,
            lr_language=1e-2,
            probe_every=10_000,
            log_every=10_000,
        )
        trainer = Trainer(cfg, [record], log_level="WARNING")
        result = trainer.run(iterations=2000)
        self.assertLess(result.metrics[-1].bc_loss, 0.01)
        self.assertLess(result.metrics[-1].bc_loss, result.metrics[0].bc_loss)

    def test_mi_rises_as_codes_settle_on_embedding_clusters(self):
        codebook = Codebook(4, 2, decay=0.9)
        codebook.vectors = np.array([[0.5, 0.0], [-0.5, 0.0], [0.0, 0.5], [0.0, -0.5]])
        rng = np.random.default_rng(0)
        embeddings = np.concatenate(
            [rng.normal(loc=[4.0, 0.0], scale=0.1, size=(8, 2)), rng.normal(loc=[-4.0, 0.0], scale=0.1, size=(8, 2))]
        )
        curve = [mi_estimate(codebook, embeddings)]
        for _ in range(200):
            ema_update(codebook, [(codebook.nearest(z), z) for z in embeddings])
            curve.append(mi_estimate(codebook, embeddings))
        self.assertGreater(curve[-1], curve[0] + 0.2)
        self.assertGreater(curve[-1], 0.95)

    def test_divergence_names_trajectory(self):
        trainer = self.trainer()
        trainer.model.policy.action_head.bias.values[:] = np.nan
        with self.assertRaises(TrainingDivergedError) as context:
            trainer.train_step([(4, self.train_records[4])])
        self.assertEqual(context.exception.trajectory_index, 4)

    def test_bad_inputs(self):
        with self.assertRaises(ValueError):
            Trainer(tiny_config(), [])
        with self.assertRaises(ValueError):
            tiny_config(variant="vae")
        with self.assertRaises(ValueError):
            tiny_config(lr_policy=0.0)


class TransferTests(unittest.TestCase):
    """rebuilding models from checkpoints"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.out = Path(cls.tmp.name)
        records = make_records(4)
        cls.trainer = Trainer(tiny_config(iterations=1), records, out_dir=cls.out / "lisa")
        cls.result = cls.trainer.run()
        cls.flat = Trainer(tiny_config(iterations=1, variant="flat"), records, out_dir=cls.out / "flat").run()

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_model_from_checkpoint(self):
        model, cfg, header = model_from_checkpoint(self.result.final_checkpoint)
        self.assertEqual(parameter_digest(model), parameter_digest(self.trainer.model))
        self.assertEqual(cfg.horizon, 3)
        self.assertEqual(header["iteration"], 1)

    def test_warm_start(self):
        model, cfg = load_for_transfer(self.result.final_checkpoint, tiny_config())
        self.assertEqual(parameter_digest(model), parameter_digest(self.trainer.model))
        self.assertFalse(cfg.freeze_codebook)

    def test_freeze_skills(self):
        _, cfg = load_for_transfer(self.result.final_checkpoint, tiny_config(), mode="freeze-skills")
        self.assertTrue(cfg.freeze_codebook)
        with self.assertRaises(CheckpointError):
            load_for_transfer(self.flat.final_checkpoint, tiny_config(variant="flat"), mode="freeze-skills")

    def test_freeze_skills_holds_predictor_and_codebook(self):
        cfg = tiny_config(freeze_predictor=True)
        model, cfg = load_for_transfer(self.result.final_checkpoint, cfg, mode="freeze-skills")
        codebook = model.codebook.vectors.copy()
        predictor = {name: p.values.copy() for name, p in model.predictor.named_parameters()}
        policy = {name: p.values.copy() for name, p in model.policy.named_parameters()}
        Trainer(cfg, make_records(4), model=model, log_level="WARNING").run(iterations=100)
        np.testing.assert_array_equal(model.codebook.vectors, codebook)
        for name, p in model.predictor.named_parameters():
            np.testing.assert_array_equal(p.values, predictor[name], name)
        self.assertTrue(any(not np.array_equal(policy[n], p.values) for n, p in model.policy.named_parameters()))

    def test_architecture_mismatch_names_keys(self):
        with self.assertRaises(CheckpointError) as context:
            load_for_transfer(self.result.final_checkpoint, tiny_config(horizon=5, num_skills=8))
        self.assertEqual(len(context.exception.fields), 2)
        self.assertIn("horizon", str(context.exception))

    def test_unreadable_checkpoint(self):
        path = self.out / "garbage.ckpt"
        path.write_bytes(b"not a checkpoint")
        with self.assertRaises(CheckpointError):
            model_from_checkpoint(path)
        with self.assertRaises(ValueError):
            load_for_transfer(self.result.final_checkpoint, tiny_config(), mode="thaw")


if __name__ == "__main__":
    unittest.main()
