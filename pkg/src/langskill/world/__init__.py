"""Compositional gridworld, instruction grammar, scripted expert and dataset files."""

from langskill.world.dataset import (
    DatasetBuilder,
    DatasetConfig,
    DatasetManifest,
    TrajectoryRecord,
    build_dataset,
    load_manifest,
    load_split,
)
from langskill.world.expert import Trajectory, expert_rollout, next_expert_action
from langskill.world.grammar import VOCAB, Instruction, Subgoal, detokenize, tokenize
from langskill.world.grid import NUM_ACTIONS, Action, GridState, decode_state, encode_state, step
from langskill.world.tasks import generate_task

__all__ = [
    "Action",
    "DatasetBuilder",
    "DatasetConfig",
    "DatasetManifest",
    "GridState",
    "Instruction",
    "NUM_ACTIONS",
    "Subgoal",
    "Trajectory",
    "TrajectoryRecord",
    "VOCAB",
    "build_dataset",
    "decode_state",
    "detokenize",
    "encode_state",
    "expert_rollout",
    "generate_task",
    "load_manifest",
    "load_split",
    "next_expert_action",
    "step",
    "tokenize",
]
