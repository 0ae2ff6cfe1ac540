"""
Skill/word co-occurrence matrices from evaluation episode logs.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from langskill.evaluation.report import EpisodeOutcome
from langskill.world.grammar import CONTENT_TOKENS, VOCAB


@dataclass
class HeatmapExport:
    raw: np.ndarray
    column_normalized: np.ndarray
    row_normalized: np.ndarray
    vocab: List[str]

    @property
    def codes(self) -> List[int]:
        return list(range(self.raw.shape[0]))

    def write_csv(self, out_dir: Path, prefix: str = "heatmap") -> Dict[str, Path]:
        """Write raw, column- and row-normalized matrices; first row vocab, first column code."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for suffix, matrix, integer in (
            ("raw", self.raw, True),
            ("col", self.column_normalized, False),
            ("row", self.row_normalized, False),
        ):
            path = out_dir / f"{prefix}_{suffix}.csv"
            with open(path, "w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(["code"] + self.vocab)
                for code, row in enumerate(matrix):
                    writer.writerow([code] + [int(v) if integer else repr(float(v)) for v in row])
            paths[suffix] = path
        return paths

    def top_content_token(self, code: int) -> str:
        """Most frequent content word for ``code``; template filler words are ignored."""
        columns = [self.vocab.index(word) for word in CONTENT_TOKENS if word in self.vocab]
        row = self.raw[code, columns]
        return self.vocab[columns[int(np.argmax(row))]]


def _normalize(matrix: np.ndarray, axis: int) -> np.ndarray:
    totals = matrix.sum(axis=axis, keepdims=True)
    return np.divide(matrix, totals, out=np.zeros_like(matrix, dtype=np.float64), where=totals > 0)


def skill_word_counts(outcomes: Sequence[EpisodeOutcome], num_codes: int, vocab_size: int = len(VOCAB)) -> np.ndarray:
    counts = np.zeros((num_codes, vocab_size), dtype=np.int64)
    for outcome in outcomes:
        for code in outcome.codes_used:
            for token in outcome.token_ids:
                counts[code, token] += 1
    return counts


def skill_language_heatmap(outcomes: Sequence[EpisodeOutcome], num_codes: int) -> HeatmapExport:
    """
    For every episode and every code it used, count every token of its instruction.

    :param outcomes: Episode logs from an evaluation
    :type outcomes: Sequence[EpisodeOutcome]
    :param num_codes: Codebook size K
    :type num_codes: int
    :return: Raw counts and both normalizations
    :rtype: HeatmapExport
    :raises ValueError: If there are no episode logs
    """
    if not outcomes:
        raise ValueError("heatmap needs at least one episode log")
    raw = skill_word_counts(outcomes, num_codes)
    return HeatmapExport(
        raw=raw,
        column_normalized=_normalize(raw.astype(np.float64), axis=0),
        row_normalized=_normalize(raw.astype(np.float64), axis=1),
        vocab=list(VOCAB),
    )
