"""
Sequential sweeps of full training runs over one configuration key.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from langskill.config import RunConfig, save_config
from langskill.evaluation.rollout import Evaluator
from langskill.trainer import model_from_checkpoint, train_run
from langskill.world.dataset import DatasetManifest, TrajectoryRecord

# sweep name -> (config key, default values); the horizon sweep fixes 50 skills
SWEEPS: Dict[str, Tuple[str, Tuple]] = {
    "horizon": ("horizon", (1, 5, 10, 50)),
    "skills": ("num_skills", (10, 20, 50, 100)),
    "codes": ("variant", ("discrete", "continuous")),
}
HORIZON_SWEEP_SKILLS = 50
ABLATION_HEADER = ("sweep", "value", "success_rate", "final_mi", "dataset_hash", "run_dir")

log = logging.getLogger(__name__)


@dataclass
class AblationRow:
    sweep: str
    value: str
    success_rate: float
    final_mi: float
    dataset_hash: str
    run_dir: Path


def sweep_config(base: RunConfig, sweep: str, value, out_dir: Path) -> RunConfig:
    """Configuration of one sweep point, writing into its own sub-directory."""
    if sweep not in SWEEPS:
        raise ValueError(f"sweep must be one of {tuple(SWEEPS)} but {sweep!r} given")
    key, _ = SWEEPS[sweep]
    run_dir = str(Path(out_dir) / f"{sweep}_{value}")
    if sweep == "codes":
        return replace(base, variant="continuous" if value == "continuous" else "lisa", out_dir=run_dir)
    if sweep == "horizon":
        return replace(base, horizon=int(value), num_skills=HORIZON_SWEEP_SKILLS, out_dir=run_dir)
    return replace(base, **{key: int(value), "out_dir": run_dir})


def ablation_runner(
    base: RunConfig,
    sweep: str,
    train_records: Sequence[TrajectoryRecord],
    probe_records: Sequence[TrajectoryRecord],
    eval_records: Sequence[TrajectoryRecord],
    out_dir: Path,
    dataset_hash: str,
    values: Optional[Sequence] = None,
    manifest: Optional[DatasetManifest] = None,
) -> List[AblationRow]:
    """
    One training run and one evaluation per sweep value, all on the same data and seeds.

    :param base: Configuration shared by every run
    :type base: RunConfig
    :param sweep: "horizon", "skills" or "codes"
    :type sweep: str
    :param values: Sweep values; the published grid when None
    :type values: Sequence, optional
    :param manifest: Dataset manifest, required when evaluating on eval_unseen
    :type manifest: DatasetManifest, optional
    :return: One row per value, also written to ``ablation.csv``
    :rtype: List[AblationRow]
    """
    if sweep not in SWEEPS:
        raise ValueError(f"sweep must be one of {tuple(SWEEPS)} but {sweep!r} given")
    values = list(SWEEPS[sweep][1] if values is None else values)
    out_dir = Path(out_dir)
    rows = []
    for value in values:
        cfg = sweep_config(base, sweep, value, out_dir)
        run_dir = Path(cfg.out_dir)
        save_config(cfg, run_dir)
        log.info(f"ablation {sweep} = {value}: training into {run_dir}")
        result = train_run(cfg, train_records, probe_records, run_dir, log_level=cfg.log_level)
        model, _, _ = model_from_checkpoint(result.final_checkpoint)
        evaluator = Evaluator(model, eval_seed=cfg.seed, workers=cfg.workers)
        report = evaluator.evaluate_split(eval_records, cfg.eval_split, cfg.eval_episodes, cfg.eval_seeds, manifest)
        report.save(run_dir / f"{report.split}.json")
        rows.append(
            AblationRow(
                sweep=sweep,
                value=str(value),
                success_rate=report.success_rate,
                final_mi=result.metrics[-1].mi_bits if result.metrics else 0.0,
                dataset_hash=dataset_hash,
                run_dir=run_dir,
            )
        )
    write_ablation_csv(rows, out_dir / "ablation.csv")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow(
                [row.sweep, row.value, repr(row.success_rate), repr(row.final_mi), row.dataset_hash, str(row.run_dir)]
            )
    return path
