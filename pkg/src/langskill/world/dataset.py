"""
Expert dataset generation and loading.

A dataset directory holds ``train.jsonl``, ``eval_seen.jsonl``, ``eval_unseen.jsonl`` and
``manifest.json``. Every record is produced from its own seed, derived from the root
seed, the split and the record index, so output bytes do not depend on thread timing.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel

from langskill.errors import HoldoutError
from langskill.world.expert import Trajectory, expert_rollout
from langskill.world.grammar import MAX_SUBGOALS, VOCAB, Subgoal
from langskill.world.grid import MAX_STEPS, GridState, decode_state
from langskill.world.tasks import generate_task

SPLITS = ("train", "eval_seen", "eval_unseen")
_SPLIT_CODES = {name: code for code, name in enumerate(SPLITS)}
UNSEEN_CANDIDATES_PER_RECORD = 200

SequenceKey = Tuple[Tuple[str, str, str], ...]


class TrajectoryRecord(BaseModel):
    """One line of a dataset file."""

    instruction: str
    token_ids: List[int]
    states: List[List[int]]
    actions: List[int]
    subgoals: List[Tuple[str, str, str]]

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory) -> "TrajectoryRecord":
        return cls(
            instruction=trajectory.instruction.text,
            token_ids=list(trajectory.instruction.token_ids),
            states=trajectory.states,
            actions=trajectory.actions,
            subgoals=[tuple(s) for s in trajectory.instruction.subgoals],
        )

    @property
    def sequence_key(self) -> SequenceKey:
        return tuple(tuple(s) for s in self.subgoals)

    def initial_state(self, max_steps: int = MAX_STEPS) -> GridState:
        return decode_state(self.states[0], [Subgoal(*s) for s in self.subgoals], max_steps=max_steps)


class DatasetConfig(BaseModel):
    n_train: int
    n_eval_seen: int
    n_eval_unseen: int
    seed: int
    max_steps: int = MAX_STEPS

    def digest(self) -> str:
        return hashlib.sha1(self.model_dump_json().encode()).hexdigest()


class DatasetManifest(BaseModel):
    config: DatasetConfig
    counts: Dict[str, int]
    vocab: List[str]
    unseen_fraction: Dict[str, float]
    config_hash: str
    train_hash: str
    train_sequences: List[List[Tuple[str, str, str]]]

    def train_sequence_keys(self) -> Set[SequenceKey]:
        return {tuple(tuple(s) for s in seq) for seq in self.train_sequences}


def record_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODES[split], index]))


def _task_record(task_seed: int, n_subgoals: int, subgoals: Optional[Sequence[Subgoal]] = None) -> TrajectoryRecord:
    state, instruction = generate_task(task_seed, n_subgoals, subgoals=subgoals)
    return TrajectoryRecord.from_trajectory(expert_rollout(state, instruction))


class DatasetBuilder:
    """Writes the three dataset splits and the manifest into one directory."""

    def __init__(self, out_dir: Path, config: DatasetConfig, workers: int = 4, log_level: str = "INFO") -> None:
        """
        Initialize the DatasetBuilder object.

        :param out_dir: Output directory, created if missing
        :type out_dir: Path
        :param config: Split sizes and root seed
        :type config: DatasetConfig
        :param workers: Worker threads for record generation
        :type workers: int, optional
        :param log_level: Logging level, defaults to "INFO"
        :type log_level: str, optional
        """
        self.log = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.log.setLevel(log_level)
        self.out_dir = Path(out_dir)
        self.config = config
        self.workers = max(1, workers)

    def _generate(self, split: str, count: int, min_subgoals: int = 1) -> List[TrajectoryRecord]:
        def make(index: int) -> TrajectoryRecord:
            rng = record_rng(self.config.seed, split, index)
            n_subgoals = int(rng.integers(min_subgoals, MAX_SUBGOALS + 1))
            return _task_record(int(rng.integers(2**31)), n_subgoals)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(make, range(count)))

    def _generate_unseen(self, train: List[TrajectoryRecord]) -> List[TrajectoryRecord]:
        """
        Sequences of two or three subgoals absent from train whose every subgoal occurs in train.
        """
        count = self.config.n_eval_unseen
        if count == 0:
            return []
        train_keys = {r.sequence_key for r in train}
        constituents = sorted({tuple(s) for r in train for s in r.subgoals})
        if len(constituents) < 2:
            raise HoldoutError(f"train split holds {len(constituents)} distinct subgoals; at least 2 are needed")
        accepted: List[Tuple[int, List[Subgoal]]] = []
        budget = count * UNSEEN_CANDIDATES_PER_RECORD
        for index in range(budget):
            if len(accepted) == count:
                break
            rng = record_rng(self.config.seed, "eval_unseen", index)
            n_subgoals = int(rng.integers(2, MAX_SUBGOALS + 1))
            picks = rng.integers(len(constituents), size=n_subgoals)
            sequence = tuple(constituents[int(p)] for p in picks)
            if any(a == b for a, b in zip(sequence, sequence[1:])) or sequence in train_keys:
                continue
            accepted.append((int(rng.integers(2**31)), [Subgoal(*s) for s in sequence]))
        if len(accepted) < count:
            raise HoldoutError(
                f"found {len(accepted)} of {count} unseen compositions after {budget} candidates"
            )
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda item: _task_record(item[0], len(item[1]), item[1]), accepted))

    def _write_split(self, split: str, records: List[TrajectoryRecord]) -> bytes:
        payload = "".join(record.model_dump_json() + "\n" for record in records).encode()
        path = self.out_dir / f"{split}.jsonl"
        path.write_bytes(payload)
        self.log.info(f"wrote {len(records)} records to {path}")
        return payload

    def build(self) -> DatasetManifest:
        """
        Generate, validate and write every split.

        :return: Manifest, also written to ``manifest.json``
        :rtype: DatasetManifest
        :raises HoldoutError: If the unseen split cannot be filled
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log.info(f"generating {self.config.n_train} train records, seed = {self.config.seed}")
        train = self._generate("train", self.config.n_train)
        seen = self._generate("eval_seen", self.config.n_eval_seen)
        unseen = self._generate_unseen(train)

        train_keys = {r.sequence_key for r in train}

        def unseen_fraction(records: List[TrajectoryRecord]) -> float:
            if not records:
                return 0.0
            return sum(r.sequence_key not in train_keys for r in records) / len(records)

        train_bytes = self._write_split("train", train)
        self._write_split("eval_seen", seen)
        self._write_split("eval_unseen", unseen)
        manifest = DatasetManifest(
            config=self.config,
            counts={"train": len(train), "eval_seen": len(seen), "eval_unseen": len(unseen)},
            vocab=list(VOCAB),
            unseen_fraction={"eval_seen": unseen_fraction(seen), "eval_unseen": unseen_fraction(unseen)},
            config_hash=self.config.digest(),
            train_hash=hashlib.sha1(train_bytes).hexdigest(),
            train_sequences=[list(key) for key in sorted(train_keys)],
        )
        (self.out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n")
        self.log.info(
            f"unseen fraction: eval_seen = {manifest.unseen_fraction['eval_seen']:.3f}, "
            f"eval_unseen = {manifest.unseen_fraction['eval_unseen']:.3f}"
        )
        return manifest


def build_dataset(
    out_dir: Path, n_train: int, n_eval_seen: int, n_eval_unseen: int, seed: int, workers: int = 4
) -> DatasetManifest:
    config = DatasetConfig(n_train=n_train, n_eval_seen=n_eval_seen, n_eval_unseen=n_eval_unseen, seed=seed)
    return DatasetBuilder(Path(out_dir), config, workers=workers).build()


def load_manifest(dataset_dir: Path) -> DatasetManifest:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return DatasetManifest.model_validate_json(path.read_text())


def load_split(dataset_dir: Path, split: str) -> List[TrajectoryRecord]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS} but {split!r} given")
    path = Path(dataset_dir) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no dataset split at {path}")
    with open(path) as handle:
        return [TrajectoryRecord.model_validate_json(line) for line in handle if line.strip()]
