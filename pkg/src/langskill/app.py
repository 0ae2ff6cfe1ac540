"""
CLI application for dataset generation, training, evaluation and analysis.

Every file the commands read or write is described in FORMATS.md.
"""

import functools
import json
import logging
import sys
from dataclasses import fields
from logging import FileHandler
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import click
import numpy as np

from langskill import __version__
from langskill.analysis import analyze_run
from langskill.checkpoint import load_checkpoint
from langskill.config import RESOLVED_CONFIG_NAME, RunConfig, load_config, save_config
from langskill.errors import CheckpointError, HoldoutError, UserError
from langskill.evaluation.ablation import SWEEPS, ablation_runner
from langskill.evaluation.heatmap import skill_language_heatmap
from langskill.evaluation.kmeans import kmeans_skill_baseline
from langskill.evaluation.rollout import (
    Evaluator,
    interpretability_agreement,
    most_used_codes,
    write_behavior_csv,
)
from langskill.models import VARIANTS, audit_bottleneck
from langskill.trainer import model_from_checkpoint, train_run
from langskill.world.dataset import DatasetManifest, TrajectoryRecord, build_dataset, load_manifest, load_split
from langskill.world.grammar import VOCAB

LOG_NAME = "run.log"
SPLIT_NAMES = {"seen": "eval_seen", "unseen": "eval_unseen"}

log = logging.getLogger(__name__)


def setup_logging(out_dir: Path, log_level: str = "INFO") -> Path:
    """
    Route every logger to stdout and to ``run.log`` inside ``out_dir``.

    :return: Path of the log file
    :rtype: Path
    """
    logger = logging.getLogger()
    for handler in logger.handlers:
        handler.close()
    logger.handlers.clear()
    # logger level must be set to the lowest level of any handler.
    logger.setLevel(logging.DEBUG)
    fmt = "%(asctime)s.%(msecs)03d %(levelname)s %(name)s: %(message)s"
    datefmt = "%Y-%m-%d,%H:%M:%S"
    log_formatter = logging.Formatter(fmt=fmt, datefmt=datefmt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_filename = out_dir / LOG_NAME
    file_handler = FileHandler(log_filename, "w")
    file_handler.setLevel(log_level)
    file_handler.setFormatter(log_formatter)
    log_handler = logging.StreamHandler(sys.stdout)
    log_handler.setLevel(log_level)
    log_handler.setFormatter(log_formatter)
    logger.addHandler(file_handler)
    logger.addHandler(log_handler)
    return log_filename


def handle_errors(func: Callable) -> Callable:
    """Map user errors and missing files to exit code 1 and anything unexpected to 2."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except (UserError, FileNotFoundError) as error:
            code, message = 1, str(error)
        except Exception as error:
            log.exception("internal error")
            code, message = 2, f"internal error: {error}"
        click.echo(f"error: {message}", err=True)
        sys.exit(code)

    return wrapper


def check_vocab(vocab: List[str], source: str) -> None:
    if list(vocab) != list(VOCAB):
        raise CheckpointError(f"{source} vocabulary does not match this build", ["vocab"])


def load_run_data(
    cfg: RunConfig,
) -> Tuple[DatasetManifest, List[TrajectoryRecord], List[TrajectoryRecord], List[TrajectoryRecord]]:
    """Manifest, training records, probe records and evaluation records of ``cfg.dataset_dir``."""
    manifest = load_manifest(Path(cfg.dataset_dir))
    check_vocab(manifest.vocab, "dataset")
    train_records = load_split(Path(cfg.dataset_dir), "train")
    probe_records = load_split(Path(cfg.dataset_dir), "eval_seen")[: cfg.probe_episodes]
    if cfg.eval_split == "eval_unseen" and manifest.counts.get("eval_unseen", 0) == 0:
        raise HoldoutError(f"dataset {cfg.dataset_dir} has no unseen compositions")
    eval_records = load_split(Path(cfg.dataset_dir), cfg.eval_split)
    return manifest, train_records, probe_records, eval_records


def run_config_from_header(header: Dict, overrides: Dict) -> RunConfig:
    """RunConfig echoed in a checkpoint header, with ``overrides`` applied."""
    known = {f.name for f in fields(RunConfig)}
    values = {k: v for k, v in header.get("config", {}).items() if k in known}
    values.update(overrides)
    return RunConfig(**values)


@click.group()
@click.version_option(__version__, prog_name="langskill")
def cli() -> None:
    """
    Language-conditioned skill learning with a discrete skill codebook.

    File formats of every input and output are documented in FORMATS.md.
    """


@cli.command("gen-data")
@click.option("--n-train", type=click.IntRange(min=1), default=1000, show_default=True, help="Training demos.")
@click.option("--n-eval", type=click.IntRange(min=0), default=100, show_default=True, help="Seen-split tasks.")
@click.option("--n-unseen", type=click.IntRange(min=0), default=100, show_default=True, help="Unseen compositions.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--workers", type=click.IntRange(min=1), default=4, show_default=True)
@handle_errors
def gen_data(n_train: int, n_eval: int, n_unseen: int, seed: int, out_dir: Path, workers: int) -> None:
    """
    Generate train, eval_seen and eval_unseen JSONL files plus manifest.json.
    """
    setup_logging(out_dir)
    save_config(RunConfig(dataset_dir=str(out_dir), seed=seed, workers=workers), out_dir)
    manifest = build_dataset(out_dir, n_train, n_eval, n_unseen, seed, workers=workers)
    click.echo(f"dataset written to {out_dir}")
    for split, count in manifest.counts.items():
        fraction = manifest.unseen_fraction.get(split)
        unseen = f", unseen instructions = {100.0 * fraction:.1f} [%]" if fraction is not None else ""
        click.echo(f"  {split}: {count} trajectories{unseen}")
    click.echo(f"  config hash = {manifest.config_hash}, train hash = {manifest.train_hash}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Overrides the config variant.")
@click.option("--init-from", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Checkpoint.")
@click.option("--freeze-skills", is_flag=True, help="Freeze the codebook of --init-from.")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), default=None)
@click.option("--iterations", type=click.IntRange(min=1), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@handle_errors
def train(
    config_path: Optional[Path],
    variant: Optional[str],
    init_from: Optional[Path],
    freeze_skills: bool,
    dataset_dir: Optional[str],
    iterations: Optional[int],
    out_dir: Optional[str],
) -> None:
    """
    Train a skill model or the flat baseline; writes metrics.csv, best.ckpt, final.ckpt
    and resolved_config.yaml.
    """
    if freeze_skills and init_from is None:
        raise UserError("--freeze-skills needs --init-from")
    overrides = {"variant": variant, "dataset_dir": dataset_dir, "iterations": iterations, "out_dir": out_dir}
    cfg = load_config(config_path, overrides)
    run_dir = Path(cfg.out_dir)
    setup_logging(run_dir, cfg.log_level)
    save_config(cfg, run_dir)
    _, train_records, probe_records, _ = load_run_data(cfg)
    if init_from is not None:
        if not Path(init_from).exists():
            raise FileNotFoundError(f"no checkpoint at {init_from}")
        check_vocab(load_checkpoint(init_from).header.get("vocab", []), "checkpoint")
    mode = "freeze-skills" if freeze_skills else "warm-start"
    result = train_run(cfg, train_records, probe_records, run_dir, init_from, mode, log_level=cfg.log_level)
    model, _, _ = model_from_checkpoint(result.final_checkpoint)
    record = train_records[0]
    audit = audit_bottleneck(model, record.token_ids, np.asarray(record.states))
    if audit.skipped:
        log.info("bottleneck audit skipped for the flat baseline")
    elif audit.passed:
        log.info("bottleneck audit passed: language reaches the policy only through the skill code")
    else:
        log.warning(f"bottleneck audit: language parameters reach the policy directly {audit.leaked_parameters}")
    best = "n/a" if result.best_success is None else f"{result.best_success:.3f}"
    click.echo(f"trained {cfg.variant} for {len(result.metrics)} iterations, best probe success = {best}")
    click.echo(f"final checkpoint: {result.final_checkpoint}")


@cli.command("eval")
@click.option("--ckpt", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--split", type=click.Choice(tuple(SPLIT_NAMES)), default="seen", show_default=True)
@click.option("--fixed-skill", type=int, default=None, help="Hold this code for whole episodes.")
@click.option("--episodes", type=click.IntRange(min=1), default=100, show_default=True, help="Instructions.")
@click.option("--seeds", type=click.IntRange(min=1), default=3, show_default=True, help="Layouts per instruction.")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--interpretability", is_flag=True, help="Fixed-skill rollouts of the 10 most-used codes.")
@handle_errors
def evaluate(
    ckpt: Path,
    split: str,
    fixed_skill: Optional[int],
    episodes: int,
    seeds: int,
    dataset_dir: Optional[Path],
    out_dir: Optional[Path],
    workers: int,
    interpretability: bool,
) -> None:
    """
    Evaluate a checkpoint; writes an EvalReport JSON plus heatmap or behaviour CSVs.
    """
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    out_dir = out_dir if out_dir is not None else ckpt.parent
    setup_logging(out_dir)
    model, cfg, header = model_from_checkpoint(ckpt)
    check_vocab(header.get("vocab", []), "checkpoint")
    dataset_dir = dataset_dir if dataset_dir is not None else Path(header["config"].get("dataset_dir", "data"))
    manifest = load_manifest(dataset_dir)
    check_vocab(manifest.vocab, "dataset")
    split_name = SPLIT_NAMES[split]
    if split_name == "eval_unseen" and manifest.counts.get("eval_unseen", 0) == 0:
        raise HoldoutError(f"dataset {dataset_dir} has no unseen compositions")
    overrides = {
        "dataset_dir": str(dataset_dir),
        "out_dir": str(out_dir),
        "eval_split": split_name,
        "eval_episodes": episodes,
        "eval_seeds": seeds,
        "workers": workers,
    }
    save_config(run_config_from_header(header, overrides), out_dir)
    records = load_split(dataset_dir, split_name)
    evaluator = Evaluator(model, eval_seed=cfg.seed, workers=workers)
    codebook = getattr(model, "codebook", None)

    if fixed_skill is not None:
        if codebook is None:
            raise UserError(f"{cfg.variant} checkpoints have no discrete codes to fix")
        if not 0 <= fixed_skill < codebook.num_codes:
            raise UserError(f"--fixed-skill must lie in [0, {codebook.num_codes}) but {fixed_skill} given")
        report, profile = evaluator.fixed_skill_rollout(records, fixed_skill, episodes)
        report.save(out_dir / f"fixed_skill_{fixed_skill}.json")
        write_behavior_csv([profile], out_dir / f"behavior_{fixed_skill}.csv")
        click.echo(f"code {fixed_skill}: success = {report.success_rate:.3f}, top event = {profile.top_event()}")
        return

    report = evaluator.evaluate_split(records, split_name, episodes, seeds, manifest)
    report.save(out_dir / f"{report.split}.json")
    click.echo(f"{cfg.variant} on {report.split}: success = {report.success_rate:.3f} over {report.episodes} episodes")
    if not report.skill_word_counts:
        return
    heatmap = skill_language_heatmap(report.outcomes, codebook.num_codes)
    heatmap.write_csv(out_dir, prefix=f"heatmap_{report.split}")
    if interpretability:
        profiles = {}
        for code in most_used_codes(heatmap):
            _, profiles[code] = evaluator.fixed_skill_rollout(records, code, episodes)
        write_behavior_csv(list(profiles.values()), out_dir / "behavior.csv")
        agreement = interpretability_agreement(heatmap, profiles)
        (out_dir / "interpretability.json").write_text(json.dumps(agreement, indent=2) + "\n")
        click.echo(f"interpretability: {agreement['matches']} of {agreement['checked']} codes agree")


@cli.command()
@click.option("--run-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--compare", type=click.Path(file_okay=False, path_type=Path), multiple=True, help="Other run dirs.")
@handle_errors
def analyze(run_dir: Path, compare: Tuple[Path, ...]) -> None:
    """
    Write mi_curve.csv, heatmaps of every eval report and, with --compare, compare.csv.
    """
    if not (run_dir / "metrics.csv").exists():
        raise FileNotFoundError(f"no metrics file at {run_dir / 'metrics.csv'}")
    setup_logging(run_dir)
    resolved = run_dir / RESOLVED_CONFIG_NAME
    save_config(load_config(resolved if resolved.exists() else None, {"out_dir": str(run_dir)}), run_dir)
    outputs = analyze_run(run_dir, compare)
    for kind, paths in outputs.items():
        for path in paths:
            click.echo(f"{kind}: {path}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--sweep", type=click.Choice(tuple(SWEEPS)), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--acknowledge-compute", is_flag=True, help="Confirm running one full training per value.")
@handle_errors
def ablate(config_path: Optional[Path], sweep: str, out_dir: Optional[str], acknowledge_compute: bool) -> None:
    """
    Sequential full trainings over one sweep; writes ablation.csv.
    """
    if not acknowledge_compute:
        raise UserError(f"the {sweep} sweep runs {len(SWEEPS[sweep][1])} full trainings, pass --acknowledge-compute")
    cfg = load_config(config_path, {"out_dir": out_dir})
    setup_logging(Path(cfg.out_dir), cfg.log_level)
    manifest, train_records, probe_records, eval_records = load_run_data(cfg)
    out = Path(cfg.out_dir)
    rows = ablation_runner(
        cfg, sweep, train_records, probe_records, eval_records, out, manifest.train_hash, manifest=manifest
    )
    for row in rows:
        click.echo(f"{row.sweep} = {row.value}: success = {row.success_rate:.3f}, final mi = {row.final_mi:.3f} [bits]")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@handle_errors
def kmeans(config_path: Optional[Path], out_dir: Optional[str]) -> None:
    """
    Train and evaluate the k-means skill baseline.
    """
    cfg = load_config(config_path, {"out_dir": out_dir})
    setup_logging(Path(cfg.out_dir), cfg.log_level)
    manifest, train_records, probe_records, eval_records = load_run_data(cfg)
    report, _ = kmeans_skill_baseline(cfg, train_records, probe_records, eval_records, Path(cfg.out_dir), manifest)
    click.echo(f"k-means on {report.split}: success = {report.success_rate:.3f} over {report.episodes} episodes")


if __name__ == "__main__":
    cli()
