"""
Fully observed 8x8 gridworld with balls, boxes, keys and doors set in the outer wall.
"""

import copy
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from langskill.world.grammar import COLORS, KINDS, PICKABLE_KINDS, Subgoal

WIDTH = 8
HEIGHT = 8
MAX_STEPS = 64

# facing vectors, clockwise starting at east
DIR_TO_VEC = ((1, 0), (0, 1), (-1, 0), (0, -1))

# cell categories for the observation vector
EMPTY = 0
WALL = 1
OBJECT_BASE = 2
OPEN_DOOR_BASE = OBJECT_BASE + len(KINDS) * len(COLORS)
AGENT_BASE = OPEN_DOOR_BASE + len(COLORS)
NUM_CELL_CATEGORIES = AGENT_BASE + len(DIR_TO_VEC)
NUM_CARRY_CATEGORIES = 1 + len(PICKABLE_KINDS) * len(COLORS)
OBS_LENGTH = WIDTH * HEIGHT + 2


class Action(IntEnum):
    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5


NUM_ACTIONS = len(Action)


@dataclass
class WorldObject:
    kind: str
    color: str
    pos: Optional[Tuple[int, int]]
    is_open: bool = False

    def matches(self, subgoal: Subgoal) -> bool:
        return self.kind == subgoal.kind and self.color == subgoal.color

    @property
    def code(self) -> int:
        return KINDS.index(self.kind) * len(COLORS) + COLORS.index(self.color)


@dataclass
class GridState:
    """
    Complete environment state.

    Doors sit in the outer wall and are never entered; every other object sits on an
    interior cell. ``subgoal_index`` counts subgoals completed in order.
    """

    agent_pos: Tuple[int, int]
    agent_dir: int
    objects: List[WorldObject]
    subgoals: Tuple[Subgoal, ...] = ()
    carrying: Optional[WorldObject] = None
    step_count: int = 0
    max_steps: int = MAX_STEPS
    subgoal_index: int = 0
    width: int = WIDTH
    height: int = HEIGHT
    completions: List[Tuple[int, Subgoal]] = field(default_factory=list)

    def copy(self) -> "GridState":
        return copy.deepcopy(self)

    @property
    def success(self) -> bool:
        return self.subgoal_index >= len(self.subgoals)

    @property
    def done(self) -> bool:
        return self.success or self.step_count >= self.max_steps

    @property
    def front_pos(self) -> Tuple[int, int]:
        dx, dy = DIR_TO_VEC[self.agent_dir]
        return self.agent_pos[0] + dx, self.agent_pos[1] + dy

    def is_wall(self, pos: Tuple[int, int]) -> bool:
        x, y = pos
        return x <= 0 or y <= 0 or x >= self.width - 1 or y >= self.height - 1

    def object_at(self, pos: Tuple[int, int]) -> Optional[WorldObject]:
        for obj in self.objects:
            if obj.pos == pos:
                return obj
        return None

    def find(self, color: str, kind: str) -> Optional[WorldObject]:
        for obj in self.objects:
            if obj.color == color and obj.kind == kind:
                return obj
        return None

    def is_free(self, pos: Tuple[int, int]) -> bool:
        return not self.is_wall(pos) and self.object_at(pos) is None


def subgoal_satisfied(state: GridState, subgoal: Subgoal) -> bool:
    """Whether ``subgoal`` holds in ``state`` right now."""
    if subgoal.verb == "goto":
        obj = state.object_at(state.front_pos)
        return obj is not None and obj.matches(subgoal)
    if subgoal.verb == "pickup":
        return state.carrying is not None and state.carrying.matches(subgoal)
    obj = state.find(subgoal.color, subgoal.kind)
    return obj is not None and obj.is_open


def advance_subgoals(state: GridState) -> None:
    """Mark every leading subgoal that holds as complete, in order."""
    while state.subgoal_index < len(state.subgoals) and subgoal_satisfied(state, state.subgoals[state.subgoal_index]):
        state.completions.append((state.step_count, state.subgoals[state.subgoal_index]))
        state.subgoal_index += 1


def apply_action(state: GridState, action: int) -> None:
    """Apply grid dynamics in place; invalid moves leave the grid unchanged."""
    action = Action(action)
    if action == Action.LEFT:
        state.agent_dir = (state.agent_dir - 1) % 4
    elif action == Action.RIGHT:
        state.agent_dir = (state.agent_dir + 1) % 4
    elif action == Action.FORWARD:
        if state.is_free(state.front_pos):
            state.agent_pos = state.front_pos
    elif action == Action.PICKUP:
        obj = state.object_at(state.front_pos)
        if obj is not None and obj.kind in PICKABLE_KINDS and state.carrying is None:
            obj.pos = None
            state.carrying = obj
    elif action == Action.DROP:
        if state.carrying is not None and state.is_free(state.front_pos):
            state.carrying.pos = state.front_pos
            state.carrying = None
    elif action == Action.TOGGLE:
        obj = state.object_at(state.front_pos)
        if obj is not None and obj.kind == "door":
            obj.is_open = not obj.is_open


def step(state: GridState, action: int) -> Tuple[GridState, bool]:
    """
    Advance the environment by one action.

    :param state: Current state (not modified)
    :type state: GridState
    :param action: Action id in 0..5
    :type action: int
    :return: Next state and whether the episode is over
    :rtype: Tuple[GridState, bool]
    :raises ValueError: If the action id is unknown
    """
    if not 0 <= int(action) < NUM_ACTIONS:
        raise ValueError(f"action must lie in [0, {NUM_ACTIONS}) but {action} given")
    next_state = state.copy()
    if next_state.done:
        return next_state, True
    apply_action(next_state, int(action))
    next_state.step_count += 1
    advance_subgoals(next_state)
    return next_state, next_state.done


def encode_state(state: GridState) -> List[int]:
    """
    Categorical observation: one category per cell (row-major), then the agent
    direction, then the carried object code (0 when empty).
    """
    cells = np.zeros((state.height, state.width), dtype=np.int64)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = WALL
    for obj in state.objects:
        if obj.pos is None:
            continue
        x, y = obj.pos
        cells[y, x] = OPEN_DOOR_BASE + COLORS.index(obj.color) if obj.is_open else OBJECT_BASE + obj.code
    x, y = state.agent_pos
    cells[y, x] = AGENT_BASE + state.agent_dir
    carried = 0 if state.carrying is None else 1 + state.carrying.code
    return cells.reshape(-1).tolist() + [state.agent_dir, carried]


def decode_state(
    observation: Sequence[int], subgoals: Sequence[Subgoal] = (), max_steps: int = MAX_STEPS
) -> GridState:
    """Rebuild a state at step zero from :func:`encode_state` output."""
    observation = list(observation)
    if len(observation) != OBS_LENGTH:
        raise ValueError(f"observation must hold {OBS_LENGTH} entries but {len(observation)} given")
    objects = []
    agent_pos = None
    for index, category in enumerate(observation[: WIDTH * HEIGHT]):
        pos = (index % WIDTH, index // WIDTH)
        if OBJECT_BASE <= category < OPEN_DOOR_BASE:
            code = category - OBJECT_BASE
            objects.append(WorldObject(KINDS[code // len(COLORS)], COLORS[code % len(COLORS)], pos))
        elif OPEN_DOOR_BASE <= category < AGENT_BASE:
            objects.append(WorldObject("door", COLORS[category - OPEN_DOOR_BASE], pos, is_open=True))
        elif AGENT_BASE <= category < NUM_CELL_CATEGORIES:
            agent_pos = pos
    if agent_pos is None:
        raise ValueError("observation has no agent cell")
    carrying = None
    if observation[-1]:
        code = observation[-1] - 1
        carrying = WorldObject(KINDS[code // len(COLORS)], COLORS[code % len(COLORS)], None)
        objects.append(carrying)
    state = GridState(
        agent_pos=agent_pos,
        agent_dir=int(observation[WIDTH * HEIGHT]),
        objects=objects,
        subgoals=tuple(Subgoal(*s) for s in subgoals),
        carrying=carrying,
        max_steps=max_steps,
    )
    advance_subgoals(state)
    return state
