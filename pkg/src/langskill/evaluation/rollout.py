"""
Closed-loop evaluation: agents, single episodes, split evaluation, composition tests and
fixed-skill behaviour profiles.
"""

import csv
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from langskill.codebook import perplexity
from langskill.errors import HoldoutError
from langskill.evaluation.heatmap import HeatmapExport, skill_word_counts
from langskill.evaluation.report import HEATMAP_NOTE, EpisodeOutcome, EvalReport
from langskill.models import FlatModel, SkillModel, parameter_digest
from langskill.seeding import derived_int
from langskill.world.dataset import DatasetManifest, TrajectoryRecord
from langskill.world.expert import next_expert_action
from langskill.world.grammar import VOCAB, Subgoal
from langskill.world.grid import MAX_STEPS, GridState, encode_state, step
from langskill.world.tasks import generate_task

log = logging.getLogger(__name__)

Event = Tuple[str, str, str]
VERB_WORDS = {"goto": "go", "pickup": "pick", "open": "open"}


class ExpertAgent:
    """Wraps the scripted expert behind the agent interface."""

    def begin(self, token_ids: Sequence[int]) -> None:
        self.step_codes: List[int] = []

    def act(self, state: GridState, observations: List[List[int]]) -> int:
        self.step_codes.append(-1)
        return next_expert_action(state)


class FlatAgent:
    def __init__(self, model: FlatModel) -> None:
        self.model = model

    def begin(self, token_ids: Sequence[int]) -> None:
        self.token_ids = list(token_ids)
        self.step_codes: List[int] = []

    def act(self, state: GridState, observations: List[List[int]]) -> int:
        self.step_codes.append(-1)
        return int(np.argmax(self.model.act_logits(self.token_ids, np.asarray(observations))))


class SkillAgent:
    """
    Re-invokes the skill predictor every H steps and acts greedily from the policy on the
    states of the current segment. With ``fixed_code`` the predictor is never called.
    """

    def __init__(self, model: SkillModel, fixed_code: Optional[int] = None) -> None:
        if fixed_code is not None:
            if model.codebook is None:
                raise ValueError("fixed-skill rollouts need a discrete codebook")
            if not 0 <= fixed_code < model.codebook.num_codes:
                raise ValueError(f"code index must lie in [0, {model.codebook.num_codes}) but {fixed_code} given")
        self.model = model
        self.fixed_code = fixed_code

    def begin(self, token_ids: Sequence[int]) -> None:
        self.token_ids = list(token_ids)
        self.step_codes: List[int] = []
        self.segment_start = 0
        self.code: Optional[np.ndarray] = None
        self.code_index = -1

    def act(self, state: GridState, observations: List[List[int]]) -> int:
        t = len(observations) - 1
        if t % self.model.horizon == 0 or self.code is None:
            self.segment_start = t
            if self.fixed_code is not None:
                self.code, self.code_index = self.model.codebook.vectors[self.fixed_code].copy(), self.fixed_code
            else:
                self.code, self.code_index, _ = self.model.predict_code(self.token_ids, np.asarray(observations))
        self.step_codes.append(self.code_index)
        window = np.asarray(observations[self.segment_start : t + 1])
        return int(np.argmax(self.model.act_logits(self.code, window)))


def agent_for(model, fixed_code: Optional[int] = None):
    if isinstance(model, FlatModel):
        if fixed_code is not None:
            raise ValueError("the flat baseline has no skill codes to fix")
        return FlatAgent(model)
    if isinstance(model, SkillModel):
        return SkillAgent(model, fixed_code)
    return ExpertAgent()


def _events(before: GridState, after: GridState) -> List[Event]:
    """Subgoal-shaped events caused by one step, whatever the instruction asked for."""
    events = []
    if before.carrying is None and after.carrying is not None:
        events.append(("pickup", after.carrying.color, after.carrying.kind))
    for old, new in zip(before.objects, after.objects):
        if new.kind == "door" and new.is_open and not old.is_open:
            events.append(("open", new.color, "door"))
    front = after.object_at(after.front_pos)
    if front is not None and (after.front_pos != before.front_pos or before.object_at(before.front_pos) is None):
        events.append(("goto", front.color, front.kind))
    return events


@dataclass
class EpisodeResult:
    outcome: EpisodeOutcome
    events: Set[Event] = field(default_factory=set)


def run_episode(agent, state: GridState, token_ids: Sequence[int], instruction: str = "") -> EpisodeResult:
    """
    Roll ``agent`` out from ``state`` until every subgoal is done or the cap is reached.

    :return: Outcome plus every subgoal-shaped event that occurred
    :rtype: EpisodeResult
    """
    agent.begin(token_ids)
    observations = [encode_state(state)]
    events: Set[Event] = set()
    current = state
    while not current.done:
        action = agent.act(current, observations)
        nxt, done = step(current, action)
        events.update(_events(current, nxt))
        current = nxt
        if not done:
            observations.append(encode_state(current))
    outcome = EpisodeOutcome(
        instruction=instruction,
        token_ids=list(token_ids),
        subgoals=[tuple(s) for s in state.subgoals],
        instruction_index=0,
        seed_index=0,
        success=current.success,
        steps=current.step_count,
        step_codes=list(agent.step_codes),
        completed=[tuple(s) for _, s in current.completions],
    )
    return EpisodeResult(outcome=outcome, events=events)


def episode_state(
    record: TrajectoryRecord, instruction_index: int, seed_index: int, eval_seed: int, max_steps: int
) -> GridState:
    """Layout for one episode: the record's own for seed 0, fresh seeded layouts otherwise."""
    if seed_index == 0:
        return record.initial_state(max_steps=max_steps)
    task_seed = derived_int(eval_seed, "eval", (instruction_index, seed_index))
    subgoals = [Subgoal(*s) for s in record.subgoals]
    state, _ = generate_task(task_seed, len(subgoals), subgoals=subgoals, max_steps=max_steps)
    return state


class Evaluator:
    """Runs paired, deterministic evaluations of one model."""

    def __init__(
        self,
        model,
        eval_seed: int = 0,
        workers: int = 1,
        agent_factory: Optional[Callable[[], object]] = None,
        log_level: str = "INFO",
    ) -> None:
        """
        Initialize the Evaluator object.

        :param model: SkillModel, FlatModel or None for the expert
        :param eval_seed: Root seed of the evaluation layout stream
        :type eval_seed: int, optional
        :param workers: Worker threads for episodes
        :type workers: int, optional
        :param agent_factory: Overrides the agent built from ``model``
        :type agent_factory: Callable, optional
        :param log_level: Logging level, defaults to "INFO"
        :type log_level: str, optional
        """
        self.log = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.log.setLevel(log_level)
        self.model = model
        self.eval_seed = eval_seed
        self.workers = max(1, workers)
        self.agent_factory = agent_factory

    @property
    def variant(self) -> str:
        return getattr(self.model, "variant", "expert")

    def _digest(self) -> str:
        return parameter_digest(self.model) if self.model is not None else ""

    def _run(
        self, records: Sequence[TrajectoryRecord], seeds: int, max_steps: int, fixed_code: Optional[int]
    ) -> List[EpisodeResult]:
        jobs = [(i, s) for i in range(len(records)) for s in range(seeds)]

        def play(job: Tuple[int, int]) -> EpisodeResult:
            i, s = job
            record = records[i]
            agent = self.agent_factory() if self.agent_factory else agent_for(self.model, fixed_code)
            state = episode_state(record, i, s, self.eval_seed, max_steps)
            result = run_episode(agent, state, record.token_ids, record.instruction)
            result.outcome.instruction_index = i
            result.outcome.seed_index = s
            return result

        if self.model is not None:
            self.model.eval()
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(play, jobs))

    def rollout_eval(
        self,
        records: Sequence[TrajectoryRecord],
        episodes: int = 100,
        seeds: int = 1,
        max_steps: int = MAX_STEPS,
        split: str = "eval_seen",
        fixed_code: Optional[int] = None,
        _results: Optional[List[EpisodeResult]] = None,
    ) -> EvalReport:
        """
        Evaluate on the first ``episodes`` instructions, ``seeds`` layouts each.

        :param records: Instruction set from a dataset split
        :type records: Sequence[TrajectoryRecord]
        :param episodes: Number of instructions
        :type episodes: int, optional
        :param seeds: Layouts per instruction; layout 0 is the record's own
        :type seeds: int, optional
        :param max_steps: Episode cap
        :type max_steps: int, optional
        :param split: Split name stored in the report
        :type split: str, optional
        :param fixed_code: Hold this code for whole episodes instead of predicting
        :type fixed_code: int, optional
        :return: Report with outcomes in (instruction, seed) order
        :rtype: EvalReport
        :raises RuntimeError: If model parameters changed during evaluation
        """
        if seeds < 1:
            raise ValueError(f"seeds must be at least 1 but {seeds} given")
        chosen = list(records[:episodes])
        before = self._digest()
        results = _results if _results is not None else self._run(chosen, seeds, max_steps, fixed_code)
        after = self._digest()
        if before != after:
            raise RuntimeError("model parameters changed during evaluation")
        outcomes = [r.outcome for r in results]
        per_seed = []
        for s in range(seeds):
            seed_outcomes = [o for o in outcomes if o.seed_index == s]
            per_seed.append(sum(o.success for o in seed_outcomes) / len(seed_outcomes) if seed_outcomes else 0.0)
        codebook = getattr(self.model, "codebook", None)
        counts: List[List[int]] = []
        used = [c for o in outcomes for c in o.step_codes if c >= 0]
        if codebook is not None:
            counts = skill_word_counts(outcomes, codebook.num_codes).tolist()
        report = EvalReport(
            split=split,
            variant=self.variant,
            episodes=len(outcomes),
            success_rate=sum(o.success for o in outcomes) / len(outcomes) if outcomes else 0.0,
            per_seed_success=per_seed,
            max_steps=max_steps,
            outcomes=outcomes,
            vocab=list(VOCAB),
            skill_word_counts=counts,
            perplexity=perplexity(codebook, used) if used and codebook is not None else None,
            parameter_digest=before,
            fixed_skill=fixed_code,
            notes=[HEATMAP_NOTE] if counts else [],
        )
        self.log.info(
            f"{self.variant} on {split}: success = {report.success_rate:.3f} over {report.episodes} episodes"
        )
        return report

    def composition_eval(
        self,
        records: Sequence[TrajectoryRecord],
        manifest: DatasetManifest,
        episodes: int = 100,
        seeds: int = 1,
        max_steps: int = MAX_STEPS,
    ) -> EvalReport:
        """
        Evaluate unseen compositions with a doubled episode cap.

        :raises HoldoutError: If an instruction's subgoal sequence occurs in train
        """
        chosen = list(records[:episodes])
        train_keys = manifest.train_sequence_keys()
        seen = [r.instruction for r in chosen if r.sequence_key in train_keys]
        if seen:
            raise HoldoutError(f"{len(seen)} composition instructions occur in train, e.g. {seen[0]!r}")
        report = self.rollout_eval(chosen, episodes, seeds, 2 * max_steps, split="eval_unseen")
        report.notes.append(f"episode cap doubled to {2 * max_steps} steps for composition")
        return report

    def evaluate_split(
        self,
        records: Sequence[TrajectoryRecord],
        split: str,
        episodes: int,
        seeds: int,
        manifest: Optional[DatasetManifest] = None,
    ) -> EvalReport:
        """Composition evaluation for ``eval_unseen``, plain rollout evaluation otherwise."""
        if split == "eval_unseen":
            if manifest is None:
                raise ValueError("composition evaluation needs the dataset manifest")
            return self.composition_eval(records, manifest, episodes, seeds)
        return self.rollout_eval(records, episodes, seeds, split=split)

    def fixed_skill_rollout(
        self,
        records: Sequence[TrajectoryRecord],
        code_index: int,
        episodes: int = 20,
        max_steps: int = MAX_STEPS,
    ) -> Tuple[EvalReport, "BehaviorProfile"]:
        """
        Hold one code for whole episodes and count which subgoals the policy completes.
        """
        chosen = list(records[:episodes])
        results = self._run(chosen, 1, max_steps, code_index)
        report = self.rollout_eval(
            chosen, episodes, 1, max_steps, split="fixed_skill", fixed_code=code_index, _results=results
        )
        profile = BehaviorProfile(code=code_index, episodes=len(results))
        for result in results:
            profile.counts.update(result.events)
        return report, profile

    def probe_success(self, records: Sequence[TrajectoryRecord], episodes: int, max_steps: int = MAX_STEPS) -> float:
        return self.rollout_eval(records, episodes, 1, max_steps, split="probe").success_rate


@dataclass
class BehaviorProfile:
    """Per-code count of episodes in which each subgoal-shaped event happened."""

    code: int
    episodes: int
    counts: Counter = field(default_factory=Counter)

    def top_event(self) -> Optional[Event]:
        if not self.counts:
            return None
        return sorted(self.counts.items(), key=lambda item: (-item[1], item[0]))[0][0]

    def rows(self) -> List[List]:
        return [[self.code, *event, count] for event, count in sorted(self.counts.items())]


def write_behavior_csv(profiles: Sequence[BehaviorProfile], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["code", "verb", "color", "kind", "episodes_completed"])
        for profile in profiles:
            writer.writerows(profile.rows())
    return path


def most_used_codes(heatmap: HeatmapExport, top: int = 10) -> List[int]:
    usage = heatmap.raw.sum(axis=1)
    order = sorted(range(len(usage)), key=lambda code: (-usage[code], code))
    return [code for code in order[:top] if usage[code] > 0]


def interpretability_agreement(heatmap: HeatmapExport, profiles: Dict[int, BehaviorProfile], top: int = 10) -> Dict:
    """
    Share of the most-used codes whose top heatmap content word names part of the
    subgoal most often completed under that code's fixed rollout.
    """
    codes = most_used_codes(heatmap, top)
    matches = []
    for code in codes:
        profile = profiles.get(code)
        event = profile.top_event() if profile else None
        if event is None:
            continue
        words = {VERB_WORDS[event[0]], event[1], event[2]}
        if heatmap.top_content_token(code) in words:
            matches.append(code)
    return {"codes": codes, "matching_codes": matches, "matches": len(matches), "checked": len(codes)}
