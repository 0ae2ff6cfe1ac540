"""
End-to-end training of skill models and the flat baseline by behaviour cloning.
"""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from langskill import autodiff as ad
from langskill.checkpoint import load_checkpoint, save_checkpoint
from langskill.clustering import fit_segment_clusters
from langskill.codebook import ema_update, mi_estimate, perplexity
from langskill.errors import CheckpointError, TrainingDivergedError
from langskill.evaluation.rollout import Evaluator
from langskill.models import VARIANTS, ModelConfig, SkillModel, build_model, load_state_arrays
from langskill.nn_blocks import Adam, Module, WarmupSchedule
from langskill.seeding import seed_stream
from langskill.world.dataset import TrajectoryRecord
from langskill.world.grammar import VOCAB

METRICS_HEADER = (
    "iter",
    "bc_loss",
    "vq_loss",
    "total_loss",
    "mi_bits",
    "perplexity",
    "probe_success",
    "lr_policy",
    "wall_ms",
)
TRANSFER_MODES = ("warm-start", "freeze-skills")
# keys that fix parameter shapes; a checkpoint must agree on all of them
ARCHITECTURE_KEYS = (
    "variant",
    "num_skills",
    "code_dim",
    "embed_dim",
    "n_heads",
    "n_layers",
    "flat_layers",
    "lang_layers",
    "horizon",
    "max_seq_len",
)


@dataclass
class TrainConfig(ModelConfig):
    """
    Training hyperparameters. Batch size defaults to 32 at desk scale; the learning
    rates, warm-up, loss weight and EMA decay keep their published values.
    """

    vq_weight: float = 0.25
    batch_size: int = 32
    iterations: int = 3000
    lr_policy: float = 1e-4
    lr_skill_predictor: float = 1e-5
    lr_language: float = 1e-6
    warmup_steps: int = 2500
    seed: int = 0
    freeze_codebook: bool = False
    freeze_predictor: bool = False
    probe_every: int = 250
    probe_episodes: int = 20
    log_every: int = 50
    kmeans_iterations: int = 50

    def __post_init__(self) -> None:
        self._verify()

    def _verify(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS} but {self.variant!r} given")
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1 but {self.horizon} given")
        if self.vq_weight < 0:
            raise ValueError(f"vq_weight must be non-negative but {self.vq_weight} given")
        for key in ("lr_policy", "lr_skill_predictor", "lr_language"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive but {getattr(self, key)} given")
        for key in ("batch_size", "num_skills", "code_dim", "probe_every", "log_every"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be at least 1 but {getattr(self, key)} given")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1) but {self.ema_decay} given")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{f.name: getattr(self, f.name) for f in fields(ModelConfig)})


@dataclass
class TrainMetrics:
    """One metrics row; ``probe_success`` is None on iterations without a probe."""

    iteration: int
    bc_loss: float
    vq_loss: float
    total_loss: float
    mi_bits: float
    perplexity: float
    probe_success: Optional[float]
    lr_policy: float
    wall_ms: float

    def csv_row(self) -> List[str]:
        probe = "" if self.probe_success is None else repr(self.probe_success)
        values = [self.bc_loss, self.vq_loss, self.total_loss, self.mi_bits, self.perplexity]
        return [str(self.iteration)] + [repr(v) for v in values] + [probe, repr(self.lr_policy), f"{self.wall_ms:.1f}"]


@dataclass
class TrainResult:
    metrics: List[TrainMetrics] = field(default_factory=list)
    best_success: Optional[float] = None
    final_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None
    metrics_path: Optional[Path] = None


class Trainer:
    """
    Owns the model, codebook and optimizer of one training run (single writer).
    """

    def __init__(
        self,
        cfg: TrainConfig,
        train_records: Sequence[TrajectoryRecord],
        probe_records: Sequence[TrajectoryRecord] = (),
        out_dir: Optional[Path] = None,
        model: Optional[Module] = None,
        log_level: str = "INFO",
    ) -> None:
        """
        Initialize the Trainer object.

        :param cfg: Training configuration
        :type cfg: TrainConfig
        :param train_records: Expert demonstrations
        :type train_records: Sequence[TrajectoryRecord]
        :param probe_records: Held-out instructions for periodic success probes
        :type probe_records: Sequence[TrajectoryRecord], optional
        :param out_dir: Directory for metrics and checkpoints; nothing is written if None
        :type out_dir: Path, optional
        :param model: Pre-built (for example transferred) model
        :type model: Module, optional
        :param log_level: Logging level, defaults to "INFO"
        :type log_level: str, optional
        """
        self.log = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.log.setLevel(log_level)
        if not train_records:
            raise ValueError("training needs at least one trajectory")
        self.cfg = cfg
        self.train_records = list(train_records)
        self.probe_records = list(probe_records)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = model if model is not None else build_model(cfg.model_config(), seed_stream(cfg.seed, "init"))
        self.data_rng = seed_stream(cfg.seed, "data")
        self.dropout_rng = seed_stream(cfg.seed, "dropout")
        if isinstance(self.model, SkillModel) and self.model.variant == "kmeans" and self.model.kmeans_centers is None:
            clusters = fit_segment_clusters(
                self.train_records,
                cfg.num_skills,
                cfg.horizon,
                self.model.language_feature,
                iterations=cfg.kmeans_iterations,
                seed=cfg.seed,
            )
            self.model.set_kmeans_centers(clusters.centers)
        groups = self.model.parameter_groups()
        if cfg.freeze_codebook and cfg.freeze_predictor:
            groups["skill_predictor"] = []
        self.optimizer = Adam(
            groups,
            {
                "policy": WarmupSchedule(cfg.warmup_steps, cfg.lr_policy),
                "skill_predictor": WarmupSchedule(cfg.warmup_steps, cfg.lr_skill_predictor),
                "language": WarmupSchedule(cfg.warmup_steps, cfg.lr_language),
            },
            log_level=log_level,
        )
        self.iteration = 0
        self.last_loss: Optional[float] = None
        self.best_success: Optional[float] = None
        self.evaluator = Evaluator(self.model, eval_seed=cfg.seed, log_level="WARNING")

    def sample_batch(self) -> List[Tuple[int, TrajectoryRecord]]:
        n = len(self.train_records)
        indices = self.data_rng.choice(n, size=self.cfg.batch_size, replace=n < self.cfg.batch_size)
        return [(int(i), self.train_records[int(i)]) for i in indices]

    def train_step(self, batch: Sequence[Tuple[int, TrajectoryRecord]]) -> TrainMetrics:
        """
        One optimizer step on ``batch``: per-trajectory segment losses, one Adam step
        per parameter group at its own rate, then one moving-average codebook update.

        :param batch: (dataset index, record) pairs
        :type batch: Sequence[Tuple[int, TrajectoryRecord]]
        :return: Metrics row for this step
        :rtype: TrainMetrics
        :raises TrainingDivergedError: If a trajectory loss is non-finite
        """
        if not batch:
            raise ValueError("empty training batch")
        start = time.perf_counter()
        self.model.train()
        self.optimizer.zero_grad()
        weight = 1.0 / len(batch)
        bc_total = vq_total = 0.0
        assignments, z_tildes, indices = [], [], []
        for index, record in batch:
            states = np.asarray(record.states)
            loss = self.model.trajectory_loss(record.token_ids, states, record.actions, self.dropout_rng)
            bc = loss.bc_loss.item()
            vq = loss.vq_loss.item() if loss.vq_loss is not None else 0.0
            if not (math.isfinite(bc) and math.isfinite(vq)):
                raise TrainingDivergedError(f"non-finite loss (bc = {bc}, vq = {vq})", trajectory_index=index)
            total = loss.bc_loss
            if loss.vq_loss is not None:
                total = total + ad.scale(loss.vq_loss, self.cfg.vq_weight)
            ad.backward(ad.scale(total, weight))
            bc_total += bc * weight
            vq_total += vq * weight
            assignments.extend(loss.assignments)
            z_tildes.extend(loss.z_tildes)
            indices.extend(i for i in loss.code_indices if i >= 0)
        lrs = self.optimizer.step()
        codebook = getattr(self.model, "codebook", None)
        if self.model.uses_ema and not self.cfg.freeze_codebook:
            ema_update(codebook, assignments)
        self.iteration += 1
        total_loss = bc_total + self.cfg.vq_weight * vq_total
        self.last_loss = total_loss
        return TrainMetrics(
            iteration=self.iteration,
            bc_loss=bc_total,
            vq_loss=vq_total,
            total_loss=total_loss,
            mi_bits=mi_estimate(codebook, np.stack(z_tildes)) if codebook is not None and z_tildes else 0.0,
            perplexity=perplexity(codebook, indices) if indices else float("nan"),
            probe_success=None,
            lr_policy=lrs["policy"],
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )

    def _header(self) -> Dict:
        return {
            "config": asdict(self.cfg),
            "variant": self.model.variant,
            "vocab": list(VOCAB),
            "iteration": self.iteration,
            "last_loss": self.last_loss,
            "rng_states": {
                "data": self.data_rng.bit_generator.state,
                "dropout": self.dropout_rng.bit_generator.state,
            },
        }

    def save(self, path: Path) -> Path:
        save_checkpoint(path, self._header(), self.model.state_arrays())
        return Path(path)

    def _probe(self) -> Optional[float]:
        if not self.probe_records:
            return None
        success = self.evaluator.probe_success(self.probe_records, self.cfg.probe_episodes)
        used_ram = psutil.virtual_memory().used / 1024**3
        self.log.info(f"iteration {self.iteration}: probe success = {success:.3f}, RAM in use = {used_ram:.2f} [GB]")
        return success

    def run(self, iterations: Optional[int] = None) -> TrainResult:
        """
        Train for ``iterations`` steps, probing, logging and checkpointing on the way.

        :return: Metrics, best probe success and checkpoint paths
        :rtype: TrainResult
        :raises OSError: If an output file cannot be written
        """
        iterations = self.cfg.iterations if iterations is None else iterations
        result = TrainResult()
        writer = handle = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            result.metrics_path = self.out_dir / "metrics.csv"
            handle = open(result.metrics_path, "w", newline="")
            writer = csv.writer(handle)
            writer.writerow(METRICS_HEADER)
        self.log.info(f"training {self.model.variant} for {iterations} iterations")
        try:
            for _ in range(iterations):
                row = self.train_step(self.sample_batch())
                if self.iteration % self.cfg.probe_every == 0 or self.iteration == iterations:
                    row.probe_success = self._probe()
                    if row.probe_success is not None and (
                        self.best_success is None or row.probe_success > self.best_success
                    ):
                        self.best_success = row.probe_success
                        if self.out_dir is not None:
                            result.best_checkpoint = self.save(self.out_dir / "best.ckpt")
                if self.iteration % self.cfg.log_every == 0:
                    self.log.info(
                        f"iteration {self.iteration}: bc = {row.bc_loss:.4f}, vq = {row.vq_loss:.4f}, "
                        f"mi = {row.mi_bits:.3f} [bits], perplexity = {row.perplexity:.2f}, lr = {row.lr_policy:.2e}"
                    )
                result.metrics.append(row)
                if writer is not None:
                    writer.writerow(row.csv_row())
                    handle.flush()
        finally:
            if handle is not None:
                handle.close()
        if self.out_dir is not None:
            result.final_checkpoint = self.save(self.out_dir / "final.ckpt")
            if result.best_checkpoint is None:
                result.best_checkpoint = self.save(self.out_dir / "best.ckpt")
        result.best_success = self.best_success
        return result


def load_for_transfer(path: Path, cfg: TrainConfig, mode: str = "warm-start") -> Tuple[Module, TrainConfig]:
    """
    Rebuild a model from a checkpoint for further training.

    ``warm-start`` keeps every weight trainable. ``freeze-skills`` disables moving-average
    codebook updates and, with ``freeze_predictor``, removes the skill predictor from the
    optimizer.

    :param path: Checkpoint path
    :type path: Path
    :param cfg: Configuration of the new run
    :type cfg: TrainConfig
    :param mode: "warm-start" or "freeze-skills"
    :type mode: str
    :return: Loaded model and the configuration to train it with
    :rtype: Tuple[Module, TrainConfig]
    :raises CheckpointError: If architecture keys disagree or the checkpoint has no skills to freeze
    """
    if mode not in TRANSFER_MODES:
        raise ValueError(f"mode must be one of {TRANSFER_MODES} but {mode!r} given")
    checkpoint = load_checkpoint(path)
    saved = checkpoint.config
    mismatched = [key for key in ARCHITECTURE_KEYS if key in saved and saved[key] != getattr(cfg, key)]
    if mismatched:
        details = [f"{key} (checkpoint {saved[key]}, config {getattr(cfg, key)})" for key in mismatched]
        raise CheckpointError("checkpoint does not match the configuration", details)
    if mode == "freeze-skills" and not checkpoint.has_codebook:
        raise CheckpointError(f"checkpoint {path} has no codebook to freeze")
    model = build_model(cfg.model_config(), seed_stream(cfg.seed, "init"))
    try:
        load_state_arrays(model, checkpoint.arrays)
    except (KeyError, ValueError) as error:
        raise CheckpointError(f"cannot load {path}: {error}") from error
    if mode == "freeze-skills":
        cfg = replace(cfg, freeze_codebook=True)
    logging.getLogger(__name__).info(f"loaded {path} for {mode}, last loss = {checkpoint.header.get('last_loss')}")
    return model, cfg


def train_run(
    cfg: TrainConfig,
    train_records: Sequence[TrajectoryRecord],
    probe_records: Sequence[TrajectoryRecord],
    out_dir: Path,
    init_from: Optional[Path] = None,
    mode: str = "warm-start",
    log_level: str = "INFO",
) -> TrainResult:
    """Train from scratch or from a checkpoint and write metrics plus checkpoints to ``out_dir``."""
    model = None
    if init_from is not None:
        model, cfg = load_for_transfer(init_from, cfg, mode)
    trainer = Trainer(cfg, train_records, probe_records, out_dir=out_dir, model=model, log_level=log_level)
    return trainer.run()


def model_from_checkpoint(path: Path) -> Tuple[Module, TrainConfig, Dict]:
    """
    Rebuild the model a checkpoint was saved from.

    :return: Model, its training configuration and the raw header
    :rtype: Tuple[Module, TrainConfig, Dict]
    :raises CheckpointError: If the file is unreadable or incomplete
    """
    checkpoint = load_checkpoint(path)
    known = {f.name for f in fields(TrainConfig)}
    try:
        cfg = TrainConfig(**{k: v for k, v in checkpoint.config.items() if k in known})
        model = build_model(cfg.model_config(), seed_stream(cfg.seed, "init"))
        load_state_arrays(model, checkpoint.arrays)
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"cannot rebuild a model from {path}: {error}") from error
    return model, cfg, checkpoint.header
