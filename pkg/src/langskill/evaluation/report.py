"""
Evaluation report documents, written as JSON.
"""

from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

HEATMAP_NOTE = (
    "heatmap counts attribute every instruction token to every code used in the episode; "
    "token-code alignment is unknown, so rows are noisy"
)


class EpisodeOutcome(BaseModel):
    instruction: str
    token_ids: List[int]
    subgoals: List[Tuple[str, str, str]]
    instruction_index: int
    seed_index: int
    success: bool
    steps: int
    # code index in force at every step; -1 when the agent has no discrete codes
    step_codes: List[int] = Field(default_factory=list)
    completed: List[Tuple[str, str, str]] = Field(default_factory=list)

    @property
    def codes_used(self) -> List[int]:
        return sorted({c for c in self.step_codes if c >= 0})


class EvalReport(BaseModel):
    """Success accounting, per-episode outcomes and the skill/word count matrix."""

    split: str
    variant: str
    episodes: int
    success_rate: float
    per_seed_success: List[float]
    max_steps: int
    outcomes: List[EpisodeOutcome]
    vocab: List[str]
    skill_word_counts: List[List[int]] = Field(default_factory=list)
    perplexity: Optional[float] = None
    parameter_digest: str = ""
    fixed_skill: Optional[int] = None
    notes: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _verify(self) -> "EvalReport":
        if self.episodes != len(self.outcomes):
            raise ValueError(f"episodes = {self.episodes} but {len(self.outcomes)} outcomes recorded")
        successes = sum(o.success for o in self.outcomes)
        expected = successes / self.episodes if self.episodes else 0.0
        if abs(self.success_rate - expected) > 1e-12:
            raise ValueError(f"success_rate {self.success_rate} does not equal {successes}/{self.episodes}")
        if any(v < 0 for row in self.skill_word_counts for v in row):
            raise ValueError("skill/word counts must be non-negative")
        return self

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.model_dump_json(indent=2) + "\n")

    @classmethod
    def load(cls, path: Path) -> "EvalReport":
        return cls.model_validate_json(Path(path).read_text())
