"""
Seeded task generator: a layout plus an instruction whose subgoals the expert can solve.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from langskill.errors import TaskGenerationError
from langskill.world.expert import expert_rollout
from langskill.world.grammar import COLORS, MAX_SUBGOALS, Instruction, Subgoal, all_subgoals
from langskill.world.grid import HEIGHT, MAX_STEPS, WIDTH, GridState, WorldObject, advance_subgoals

MAX_OBJECTS = 6
MAX_ATTEMPTS = 50

log = logging.getLogger(__name__)

_SUBGOALS = all_subgoals()


def _interior_cells() -> List[Tuple[int, int]]:
    return [(x, y) for y in range(1, HEIGHT - 1) for x in range(1, WIDTH - 1)]


def _wall_slots() -> List[Tuple[int, int]]:
    """Outer-wall cells excluding corners; doors go here."""
    slots = [(x, 0) for x in range(1, WIDTH - 1)] + [(x, HEIGHT - 1) for x in range(1, WIDTH - 1)]
    slots += [(0, y) for y in range(1, HEIGHT - 1)] + [(WIDTH - 1, y) for y in range(1, HEIGHT - 1)]
    return slots


def _sample_subgoals(rng: np.random.Generator, n_subgoals: int) -> List[Subgoal]:
    subgoals: List[Subgoal] = []
    while len(subgoals) < n_subgoals:
        candidate = _SUBGOALS[int(rng.integers(len(_SUBGOALS)))]
        if subgoals and candidate == subgoals[-1]:
            continue
        subgoals.append(candidate)
    return subgoals


def _place(rng: np.random.Generator, subgoals: Sequence[Subgoal]) -> GridState:
    needed = []
    for s in subgoals:
        if (s.color, s.kind) not in needed:
            needed.append((s.color, s.kind))
    if len(needed) > MAX_OBJECTS:
        raise TaskGenerationError(f"{len(needed)} distinct objects exceed the limit of {MAX_OBJECTS}")
    n_objects = int(rng.integers(len(needed), MAX_OBJECTS + 1))
    pairs = list(needed)
    while len(pairs) < n_objects:
        kind = ("ball", "box", "key", "door")[int(rng.integers(4))]
        pair = (COLORS[int(rng.integers(len(COLORS)))], kind)
        if pair not in pairs:
            pairs.append(pair)

    interior = _interior_cells()
    walls = _wall_slots()
    interior_order = rng.permutation(len(interior))
    wall_order = rng.permutation(len(walls))
    interior_iter = iter(interior_order)
    objects = []
    used_walls = set()
    for color, kind in pairs:
        if kind == "door":
            placed = False
            for index in wall_order:
                slot = walls[int(index)]
                # keep doors apart so each keeps a distinct approach cell
                if all(abs(slot[0] - u[0]) + abs(slot[1] - u[1]) > 1 for u in used_walls):
                    used_walls.add(slot)
                    objects.append(WorldObject(kind, color, slot))
                    placed = True
                    break
            if not placed:
                raise TaskGenerationError(f"no wall slot left for the {color} door")
        else:
            objects.append(WorldObject(kind, color, interior[int(next(interior_iter))]))
    occupied = {o.pos for o in objects}
    free = [interior[int(i)] for i in interior_order if interior[int(i)] not in occupied]
    agent_pos = free[int(rng.integers(len(free)))]
    state = GridState(
        agent_pos=agent_pos,
        agent_dir=int(rng.integers(4)),
        objects=objects,
        subgoals=tuple(subgoals),
        max_steps=MAX_STEPS,
    )
    return state


def generate_task(
    seed: int, n_subgoals: int, subgoals: Optional[Sequence[Subgoal]] = None, max_steps: int = MAX_STEPS
) -> Tuple[GridState, Instruction]:
    """
    Build a solvable task deterministically from ``seed``.

    Objects carry distinct (color, kind) pairs so every reference is unambiguous. A
    layout is accepted only when no subgoal holds at the start and the expert solves it
    within the step cap; otherwise a derived seed is tried.

    :param seed: Task seed
    :type seed: int
    :param n_subgoals: Number of subgoals, 1 to 3
    :type n_subgoals: int
    :param subgoals: Fixed subgoal sequence; when given only the layout is sampled
    :type subgoals: Sequence[Subgoal], optional
    :param max_steps: Episode cap stored in the state
    :type max_steps: int, optional
    :return: Initial state and instruction
    :rtype: Tuple[GridState, Instruction]
    :raises ValueError: If n_subgoals is outside [1, 3]
    :raises TaskGenerationError: If no valid layout is found within the retry budget
    """
    if subgoals is not None:
        n_subgoals = len(subgoals)
    if not 1 <= n_subgoals <= MAX_SUBGOALS:
        raise ValueError(f"n_subgoals must lie in [1, {MAX_SUBGOALS}] but {n_subgoals} given")
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        chosen = [Subgoal(*s).validate() for s in subgoals] if subgoals is not None else _sample_subgoals(
            rng, n_subgoals
        )
        try:
            state = _place(rng, chosen)
        except (TaskGenerationError, StopIteration):
            continue
        advance_subgoals(state)
        if state.subgoal_index > 0:
            continue
        instruction = Instruction.from_subgoals(chosen, rng)
        try:
            expert_rollout(state, instruction)
        except TaskGenerationError as error:
            log.debug(f"seed {seed} attempt {attempt} rejected: {error}")
            continue
        state.max_steps = max_steps
        return state, instruction
    raise TaskGenerationError(f"no solvable layout for seed {seed} after {MAX_ATTEMPTS} attempts")

