"""
Post-run analysis: mutual-information curves, heatmap exports and paired comparison tables.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from langskill.evaluation.heatmap import skill_language_heatmap
from langskill.evaluation.report import EvalReport

METRICS_NAME = "metrics.csv"
MI_CURVE_NAME = "mi_curve.csv"
COMPARE_NAME = "compare.csv"
REPORT_GLOB = "eval_*.json"

log = logging.getLogger(__name__)


def mi_curve(metrics_path: Path, out_path: Path) -> Path:
    """
    Copy the ``iter`` and ``mi_bits`` columns of a metrics file, values untouched.

    :raises FileNotFoundError: If there is no metrics file
    :raises ValueError: If the file lacks either column
    """
    metrics_path = Path(metrics_path)
    if not metrics_path.exists():
        raise FileNotFoundError(f"no metrics file at {metrics_path}")
    with open(metrics_path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"iter", "mi_bits"} <= set(reader.fieldnames):
            raise ValueError(f"{metrics_path} has no iter and mi_bits columns")
        rows = [(row["iter"], row["mi_bits"]) for row in reader]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iter", "mi_bits"])
        writer.writerows(rows)
    return out_path


def load_reports(run_dir: Path) -> Dict[str, EvalReport]:
    """Evaluation reports of a run directory keyed by split."""
    reports = {}
    for path in sorted(Path(run_dir).glob(REPORT_GLOB)):
        report = EvalReport.load(path)
        reports[report.split] = report
    return reports


def export_heatmaps(run_dir: Path) -> List[Path]:
    """Write raw and normalized heatmaps for every report that logged skill codes."""
    paths = []
    for split, report in load_reports(run_dir).items():
        if not report.skill_word_counts or not report.outcomes:
            log.info(f"{split}: no skill codes logged, skipping heatmap")
            continue
        heatmap = skill_language_heatmap(report.outcomes, len(report.skill_word_counts))
        paths.extend(heatmap.write_csv(Path(run_dir), prefix=f"heatmap_{split}").values())
    return paths


def seed_summary(report: EvalReport) -> Tuple[float, Optional[float]]:
    """Mean success over seeds in percent, and the sample std when there are at least two seeds."""
    rates = np.asarray(report.per_seed_success, dtype=np.float64) * 100.0
    if rates.size == 0:
        return 100.0 * report.success_rate, None
    std = float(np.std(rates, ddof=1)) if rates.size >= 2 else None
    return float(rates.mean()), std


def format_summary(mean: float, std: Optional[float]) -> str:
    return f"{mean:.2f} ± {'n/a' if std is None else f'{std:.2f}'}"


@dataclass
class CompareRow:
    split: str
    cells: List[str]


def compare_runs(run_dirs: Sequence[Path], out_path: Path) -> List[CompareRow]:
    """
    Success table over the evaluation splits every run shares, one column per run.

    :param run_dirs: Run directories holding ``eval_*.json`` reports
    :type run_dirs: Sequence[Path]
    :param out_path: CSV destination
    :type out_path: Path
    :return: One row per shared split
    :rtype: List[CompareRow]
    """
    per_run = [load_reports(run_dir) for run_dir in run_dirs]
    shared = sorted(set.intersection(*(set(reports) for reports in per_run))) if per_run else []
    rows = [
        CompareRow(split, [format_summary(*seed_summary(reports[split])) for reports in per_run]) for split in shared
    ]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["split"] + [Path(run_dir).name for run_dir in run_dirs])
        for row in rows:
            writer.writerow([row.split] + row.cells)
    if not rows:
        log.warning("runs share no evaluation split, comparison table is empty")
    return rows


def analyze_run(run_dir: Path, compare: Sequence[Path] = ()) -> Dict[str, List[Path]]:
    """
    MI curve and heatmaps for ``run_dir``, plus a comparison table against ``compare``.

    :raises FileNotFoundError: If ``run_dir`` has no metrics file
    """
    run_dir = Path(run_dir)
    outputs: Dict[str, List[Path]] = {"mi_curve": [mi_curve(run_dir / METRICS_NAME, run_dir / MI_CURVE_NAME)]}
    outputs["heatmaps"] = export_heatmaps(run_dir)
    if compare:
        path = run_dir / COMPARE_NAME
        compare_runs([run_dir, *compare], path)
        outputs["compare"] = [path]
    return outputs
