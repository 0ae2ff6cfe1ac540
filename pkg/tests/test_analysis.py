""" testing post-run analysis outputs """

import csv
import tempfile
import unittest
from pathlib import Path

from langskill.analysis import (
    COMPARE_NAME,
    METRICS_NAME,
    MI_CURVE_NAME,
    analyze_run,
    compare_runs,
    export_heatmaps,
    format_summary,
    mi_curve,
    seed_summary,
)
from langskill.evaluation.report import EpisodeOutcome, EvalReport
from langskill.world.grammar import VOCAB, tokenize


def make_report(split, per_seed, codes=True):
    texts = ["go to the red ball", "open the blue door"]
    outcomes = []
    for seed_index, rate in enumerate(per_seed):
        for index, text in enumerate(texts):
            outcomes.append(
                EpisodeOutcome(
                    instruction=text,
                    token_ids=tokenize(text),
                    subgoals=[],
                    instruction_index=index,
                    seed_index=seed_index,
                    success=index < rate * len(texts),
                    steps=2,
                    step_codes=[index, index] if codes else [-1, -1],
                )
            )
    return EvalReport(
        split=split,
        variant="lisa" if codes else "flat",
        episodes=len(outcomes),
        success_rate=sum(o.success for o in outcomes) / len(outcomes),
        per_seed_success=list(per_seed),
        max_steps=64,
        outcomes=outcomes,
        vocab=list(VOCAB),
        skill_word_counts=[[0] * len(VOCAB) for _ in range(2)] if codes else [],
    )


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


class AnalysisTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_metrics(self, run_dir, header=("iter", "bc_loss", "mi_bits")):
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / METRICS_NAME, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerow(["1", "2.5", "0.125"])
            writer.writerow(["2", "2.25", "0.3333333333333333"])

    def test_mi_curve_copies_values(self):
        run_dir = self.root / "run"
        self.write_metrics(run_dir)
        path = mi_curve(run_dir / METRICS_NAME, run_dir / MI_CURVE_NAME)
        self.assertEqual(read_rows(path), [["iter", "mi_bits"], ["1", "0.125"], ["2", "0.3333333333333333"]])

    def test_mi_curve_errors(self):
        with self.assertRaises(FileNotFoundError):
            mi_curve(self.root / METRICS_NAME, self.root / MI_CURVE_NAME)
        self.write_metrics(self.root, header=("iter", "bc_loss", "vq_loss"))
        with self.assertRaises(ValueError):
            mi_curve(self.root / METRICS_NAME, self.root / MI_CURVE_NAME)

    def test_seed_summary(self):
        mean, std = seed_summary(make_report("eval_seen", [0.5, 1.0]))
        self.assertAlmostEqual(mean, 75.0)
        self.assertAlmostEqual(std, 35.35533905932738)
        mean, std = seed_summary(make_report("eval_seen", [0.5]))
        self.assertEqual((mean, std), (50.0, None))
        self.assertEqual(format_summary(mean, std), "50.00 ± n/a")
        self.assertEqual(format_summary(75.0, 35.356), "75.00 ± 35.36")

    def test_compare_uses_shared_splits(self):
        first, second = self.root / "lisa", self.root / "flat"
        make_report("eval_seen", [1.0]).save(first / "eval_seen.json")
        make_report("eval_unseen", [0.5]).save(first / "eval_unseen.json")
        make_report("eval_seen", [0.5, 0.5], codes=False).save(second / "eval_seen.json")
        rows = compare_runs([first, second], self.root / COMPARE_NAME)
        self.assertEqual([row.split for row in rows], ["eval_seen"])
        table = read_rows(self.root / COMPARE_NAME)
        self.assertEqual(table[0], ["split", "lisa", "flat"])
        self.assertEqual(table[1], ["eval_seen", "100.00 ± n/a", "50.00 ± 0.00"])

    def test_compare_without_shared_splits(self):
        first, second = self.root / "a", self.root / "b"
        make_report("eval_seen", [1.0]).save(first / "eval_seen.json")
        make_report("eval_unseen", [1.0]).save(second / "eval_unseen.json")
        self.assertEqual(compare_runs([first, second], self.root / COMPARE_NAME), [])
        self.assertEqual(read_rows(self.root / COMPARE_NAME), [["split", "a", "b"]])

    def test_heatmaps_skip_reports_without_codes(self):
        run_dir = self.root / "run"
        make_report("eval_seen", [1.0]).save(run_dir / "eval_seen.json")
        make_report("eval_unseen", [1.0], codes=False).save(run_dir / "eval_unseen.json")
        names = sorted(path.name for path in export_heatmaps(run_dir))
        self.assertEqual(names, [f"heatmap_eval_seen_{s}.csv" for s in ("col", "raw", "row")])

    def test_analyze_run(self):
        run_dir, other = self.root / "run", self.root / "other"
        self.write_metrics(run_dir)
        make_report("eval_seen", [1.0]).save(run_dir / "eval_seen.json")
        make_report("eval_seen", [0.5]).save(other / "eval_seen.json")
        outputs = analyze_run(run_dir, compare=[other])
        self.assertEqual(outputs["mi_curve"], [run_dir / MI_CURVE_NAME])
        self.assertEqual(len(outputs["heatmaps"]), 3)
        self.assertEqual(outputs["compare"], [run_dir / COMPARE_NAME])
        self.assertNotIn("compare", analyze_run(run_dir))
        with self.assertRaises(FileNotFoundError):
            analyze_run(other)


if __name__ == "__main__":
    unittest.main()
