"""
Scripted expert: solves subgoals in order along BFS-shortest paths over (x, y, direction).
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from langskill.errors import TaskGenerationError
from langskill.world.grammar import Instruction, Subgoal
from langskill.world.grid import DIR_TO_VEC, Action, GridState, encode_state, step

Pose = Tuple[int, int, int]


@dataclass
class Trajectory:
    """Expert demonstration: the observation before each action, and the action."""

    instruction: Instruction
    states: List[List[int]] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    success: bool = False
    # number of navigation moves spent on each subgoal
    segment_moves: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


def _goal_poses(state: GridState, target: Tuple[int, int]) -> set:
    goals = set()
    for direction, (dx, dy) in enumerate(DIR_TO_VEC):
        pos = (target[0] - dx, target[1] - dy)
        if pos == state.agent_pos or state.is_free(pos):
            goals.add((pos[0], pos[1], direction))
    return goals


def bfs_path(state: GridState, target: Tuple[int, int]) -> Optional[List[int]]:
    """
    Shortest turn/forward action sequence that leaves the agent facing ``target``.

    :param state: Starting state; only the layout and agent pose are read
    :type state: GridState
    :param target: Cell to face
    :type target: Tuple[int, int]
    :return: Actions, or None when no pose facing the target is reachable
    :rtype: List[int] or None
    """
    goals = _goal_poses(state, target)
    start: Pose = (state.agent_pos[0], state.agent_pos[1], state.agent_dir)
    if start in goals:
        return []
    parents: Dict[Pose, Tuple[Pose, int]] = {start: (start, -1)}
    queue = deque([start])
    while queue:
        pose = queue.popleft()
        x, y, direction = pose
        dx, dy = DIR_TO_VEC[direction]
        successors = (
            ((x, y, (direction - 1) % 4), Action.LEFT),
            ((x, y, (direction + 1) % 4), Action.RIGHT),
            ((x + dx, y + dy, direction), Action.FORWARD),
        )
        for nxt, action in successors:
            if nxt in parents:
                continue
            if action == Action.FORWARD and not state.is_free((nxt[0], nxt[1])):
                continue
            parents[nxt] = (pose, int(action))
            if nxt in goals:
                path = []
                while nxt != start:
                    nxt, move = parents[nxt]
                    path.append(move)
                return path[::-1]
            queue.append(nxt)
    return None


def bfs_distance(state: GridState, target: Tuple[int, int]) -> Optional[int]:
    path = bfs_path(state, target)
    return None if path is None else len(path)


def _needs_free_hands(state: GridState) -> bool:
    """A later subgoal picks something up or refers to the object being carried."""
    if state.carrying is None:
        return False
    return any(
        s.verb == "pickup" or state.carrying.matches(s) for s in state.subgoals[state.subgoal_index :]
    )


def plan_subgoal(state: GridState, subgoal: Subgoal) -> List[int]:
    """
    Actions completing ``subgoal`` from ``state``.

    :raises TaskGenerationError: If the target is missing or unreachable
    """
    target = state.find(subgoal.color, subgoal.kind)
    if target is None or target.pos is None:
        if subgoal.verb == "pickup" and state.carrying is not None and state.carrying.matches(subgoal):
            return []
        raise TaskGenerationError(f"no reachable {subgoal.color} {subgoal.kind} for {subgoal.verb}")
    path = bfs_path(state, target.pos)
    if path is None:
        raise TaskGenerationError(f"no path to the {subgoal.color} {subgoal.kind}")
    if subgoal.verb == "pickup":
        path.append(int(Action.PICKUP))
    elif subgoal.verb == "open" and not target.is_open:
        path.append(int(Action.TOGGLE))
    return path


def next_expert_action(state: GridState) -> int:
    """Expert action for the current state; used to wrap the expert as an evaluation agent."""
    if state.success:
        return int(Action.LEFT)
    subgoal = state.subgoals[state.subgoal_index]
    if state.carrying is not None and (subgoal.verb == "pickup" or state.carrying.matches(subgoal)):
        if state.is_free(state.front_pos):
            return int(Action.DROP)
        return int(Action.LEFT)
    plan = plan_subgoal(state, subgoal)
    return plan[0] if plan else int(Action.LEFT)


def expert_rollout(state: GridState, instruction: Instruction) -> Trajectory:
    """
    Solve every subgoal in order.

    After a pickup the object is put back down when a later subgoal needs free hands.

    :param state: Initial state whose subgoals match the instruction
    :type state: GridState
    :param instruction: Instruction being demonstrated
    :type instruction: Instruction
    :return: Successful trajectory
    :rtype: Trajectory
    :raises TaskGenerationError: If a subgoal cannot be reached or the step cap is hit
    """
    trajectory = Trajectory(instruction=instruction)
    current = state.copy()

    def act(action: int) -> None:
        nonlocal current
        trajectory.states.append(encode_state(current))
        trajectory.actions.append(int(action))
        current, _ = step(current, action)

    while not current.success:
        if current.step_count >= current.max_steps:
            raise TaskGenerationError(f"expert exceeded {current.max_steps} steps")
        index = current.subgoal_index
        subgoal = current.subgoals[index]
        plan = plan_subgoal(current, subgoal)
        moves = sum(1 for a in plan if a in (Action.LEFT, Action.RIGHT, Action.FORWARD))
        trajectory.segment_moves.append(moves)
        for action in plan:
            act(action)
        if current.subgoal_index == index:
            raise TaskGenerationError(f"expert plan did not complete {tuple(subgoal)}")
        if subgoal.verb == "pickup" and not current.success and _needs_free_hands(current):
            act(Action.DROP)
            if current.carrying is not None:
                raise TaskGenerationError("expert could not free its hands")
    trajectory.success = True
    return trajectory
