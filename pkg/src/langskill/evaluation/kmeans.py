"""
Clustering baseline: k-means centers of language-state segment features stand in for
learned skill codes, and the policy is trained on them exactly like the skill model.
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

from langskill.config import RunConfig, save_config
from langskill.evaluation.report import EvalReport
from langskill.evaluation.rollout import Evaluator
from langskill.trainer import TrainResult, model_from_checkpoint, train_run
from langskill.world.dataset import DatasetManifest, TrajectoryRecord

log = logging.getLogger(__name__)


def kmeans_skill_baseline(
    base: RunConfig,
    train_records: Sequence[TrajectoryRecord],
    probe_records: Sequence[TrajectoryRecord],
    eval_records: Sequence[TrajectoryRecord],
    out_dir: Path,
    manifest: Optional[DatasetManifest] = None,
) -> Tuple[EvalReport, TrainResult]:
    """
    Fit ``num_skills`` clusters with ``kmeans_iterations`` Lloyd steps, train the policy on
    the cluster codes and evaluate it on the same instructions and seeds as other runs.

    :param base: Configuration of the run; only the variant is overridden
    :type base: RunConfig
    :param train_records: Demonstrations for clustering and training
    :type train_records: Sequence[TrajectoryRecord]
    :param probe_records: Instructions for periodic success probes
    :type probe_records: Sequence[TrajectoryRecord]
    :param eval_records: Instructions for the final evaluation
    :type eval_records: Sequence[TrajectoryRecord]
    :param out_dir: Run directory
    :type out_dir: Path
    :param manifest: Dataset manifest, required when evaluating on eval_unseen
    :type manifest: DatasetManifest, optional
    :return: Evaluation report and training result
    :rtype: Tuple[EvalReport, TrainResult]
    """
    out_dir = Path(out_dir)
    cfg = replace(base, variant="kmeans", out_dir=str(out_dir))
    save_config(cfg, out_dir)
    log.info(f"k-means baseline with {cfg.num_skills} clusters, {cfg.kmeans_iterations} iterations")
    result = train_run(cfg, train_records, probe_records, out_dir, log_level=cfg.log_level)
    model, _, _ = model_from_checkpoint(result.final_checkpoint)
    evaluator = Evaluator(model, eval_seed=cfg.seed, workers=cfg.workers, log_level=cfg.log_level)
    report = evaluator.evaluate_split(eval_records, cfg.eval_split, cfg.eval_episodes, cfg.eval_seeds, manifest)
    report.save(out_dir / f"{report.split}.json")
    return report, result
