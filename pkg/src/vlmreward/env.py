"""Synthetic goal gridworld with Find / Lift / Place task families.

The agent sees a 5x5 egocentric window (radius 2) around itself plus the
object it is holding. Observations are fixed-size byte strings so they can
be fed to embedding providers and hashed for trajectory logs.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput, InvalidState

COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "white", "black")
TYPES = ("cup", "book", "ball", "box", "plant", "lamp", "shoe", "key")
FAMILIES = ("find", "lift", "place")
ACTIONS = ("up", "down", "left", "right", "grab", "drop", "noop")
MOVES = {"up": (0, -1), "down": (0, 1), "left": (-1, 0), "right": (1, 0)}

VIEW_RADIUS = 2
VIEW_SIZE = 2 * VIEW_RADIUS + 1
OUT_OF_BOUNDS = 255
# two bytes (type code, color code) per window cell, then two for the held object
PAYLOAD_SIZE = 2 * VIEW_SIZE * VIEW_SIZE + 2


@dataclass(frozen=True, order=True)
class Descriptor:
    color: str
    type: str

    def __post_init__(self):
        if self.color not in COLORS:
            raise InvalidInput(f"unknown color {self.color!r}")
        if self.type not in TYPES:
            raise InvalidInput(f"unknown object type {self.type!r}")

    @property
    def codes(self) -> tuple[int, int]:
        return TYPES.index(self.type) + 1, COLORS.index(self.color) + 1

    def __str__(self) -> str:
        return f"{self.color} {self.type}"


@dataclass(frozen=True)
class GoalSpec:
    family: str
    target: Descriptor
    second: Descriptor | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInput(f"unknown task family {self.family!r}")
        if (self.family == "place") != (self.second is not None):
            raise InvalidInput("exactly the place family takes a second descriptor")
        if self.second is not None and self.second == self.target:
            raise InvalidInput("place goal needs two different descriptors")

    @property
    def goal_id(self) -> str:
        parts = [self.family, self.target.color, self.target.type]
        if self.second is not None:
            parts += [self.second.color, self.second.type]
        return "-".join(parts)

    @property
    def task_name(self) -> str:
        if self.family == "find":
            return f"find the {self.target}"
        if self.family == "lift":
            return f"lift the {self.target}"
        return f"put the {self.target} near the {self.second}"

    def descriptors(self) -> tuple[Descriptor, ...]:
        return (self.target,) if self.second is None else (self.target, self.second)


def enumerate_goals(
    families: Sequence[str], colors: Sequence[str], types: Sequence[str]
) -> list[GoalSpec]:
    """All goals of the grammar, in a stable order.

    Place goals pair every descriptor with every other one.
    """
    descs = [Descriptor(c, t) for c in colors for t in types]
    goals = []
    for fam in families:
        if fam == "place":
            goals += [GoalSpec(fam, a, b) for a, b in itertools.permutations(descs, 2)]
        else:
            goals += [GoalSpec(fam, d) for d in descs]
    return goals


@dataclass(frozen=True)
class EnvConfig:
    width: int = 6
    height: int = 6
    num_objects: int = 3
    timeout: int = 20
    discount: float = 0.95
    seed: int = 0
    families: tuple[str, ...] = ("find",)
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow", "purple")
    types: tuple[str, ...] = ("cup", "book")

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise InvalidInput("grid must be at least 2x2")
        if self.timeout < 1:
            raise InvalidInput("timeout must be >= 1")
        if not (0.0 < self.discount <= 1.0):
            raise InvalidInput("discount must lie in (0, 1]")
        if self.num_objects < 1 or self.num_objects >= self.width * self.height:
            raise InvalidInput("object count must be in [1, cells - 1]")
        for c in self.colors:
            if c not in COLORS:
                raise InvalidInput(f"unknown color {c!r}")
        for t in self.types:
            if t not in TYPES:
                raise InvalidInput(f"unknown object type {t!r}")
        for f in self.families:
            if f not in FAMILIES:
                raise InvalidInput(f"unknown task family {f!r}")
        if not self.colors or not self.types or not self.families:
            raise InvalidInput("colors, types and families must be non-empty")

    def goals(self) -> list[GoalSpec]:
        return enumerate_goals(self.families, self.colors, self.types)


@dataclass(frozen=True)
class GridObject:
    id: int
    type: str
    color: str
    cell: tuple[int, int]

    @property
    def descriptor(self) -> Descriptor:
        return Descriptor(self.color, self.type)


@dataclass(frozen=True)
class GridState:
    width: int
    height: int
    agent: tuple[int, int]
    objects: tuple[GridObject, ...]
    goal: GoalSpec
    held: int | None = None
    steps: int = 0
    seed: int = 0
    achieved: bool = False
    done: bool = False

    def __post_init__(self):
        for cell in [self.agent] + [o.cell for o in self.objects]:
            if not (0 <= cell[0] < self.width and 0 <= cell[1] < self.height):
                raise InvalidState(f"cell {cell} outside {self.width}x{self.height} grid")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise InvalidState("object ids must be unique")
        if self.held is not None and self.held not in ids:
            raise InvalidState(f"held object {self.held} does not exist")

    def object(self, object_id: int) -> GridObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def objects_at(self, cell: tuple[int, int]) -> list[GridObject]:
        return [o for o in self.objects if o.cell == cell and o.id != self.held]


@dataclass(frozen=True)
class StepResult:
    state: GridState
    observation: bytes
    done: bool
    gt_reward: int


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def ground_truth_success(state: GridState, goal: GoalSpec) -> int:
    """Oracle predicate for goal achievement.

    A held object sits on the agent's cell, so it counts as distance 0 for
    Find, but neither object of a Place goal may be held.
    """
    if goal.family == "find":
        return int(
            any(
                o.descriptor == goal.target and chebyshev(o.cell, state.agent) <= 1
                for o in state.objects
            )
        )
    if goal.family == "lift":
        return int(state.held is not None and state.object(state.held).descriptor == goal.target)
    loose = [o for o in state.objects if o.id != state.held]
    for a in loose:
        if a.descriptor != goal.target:
            continue
        for b in loose:
            if b.id != a.id and b.descriptor == goal.second and chebyshev(a.cell, b.cell) <= 1:
                return 1
    return 0


def render_observation(state: GridState) -> bytes:
    buf = bytearray(PAYLOAD_SIZE)
    ax, ay = state.agent
    i = 0
    for dy in range(-VIEW_RADIUS, VIEW_RADIUS + 1):
        for dx in range(-VIEW_RADIUS, VIEW_RADIUS + 1):
            x, y = ax + dx, ay + dy
            if not (0 <= x < state.width and 0 <= y < state.height):
                buf[i] = buf[i + 1] = OUT_OF_BOUNDS
            else:
                here = state.objects_at((x, y))
                if here:
                    buf[i], buf[i + 1] = min(here, key=lambda o: o.id).descriptor.codes
            i += 2
    if state.held is not None:
        buf[i], buf[i + 1] = state.object(state.held).descriptor.codes
    return bytes(buf)


def obs_digest(observation: bytes) -> str:
    return hashlib.sha256(observation).hexdigest()[:16]


@dataclass(frozen=True)
class Observation:
    """Decoded observation payload: per-cell type/color codes and the held object."""

    types: np.ndarray  # (VIEW_SIZE, VIEW_SIZE) uint8, 0 empty, 255 out of bounds
    colors: np.ndarray
    held: tuple[int, int]  # (0, 0) when empty-handed

    def matches(self, desc: Descriptor) -> np.ndarray:
        t, c = desc.codes
        return (self.types == t) & (self.colors == c)

    def holding(self, desc: Descriptor) -> bool:
        return self.held == desc.codes


def decode_observation(observation: bytes) -> Observation:
    if not isinstance(observation, (bytes, bytearray)) or len(observation) != PAYLOAD_SIZE:
        raise InvalidInput(f"observation payload must be {PAYLOAD_SIZE} bytes")
    arr = np.frombuffer(bytes(observation), dtype=np.uint8)
    cells = arr[:-2].reshape(VIEW_SIZE, VIEW_SIZE, 2)
    held = (int(arr[-2]), int(arr[-1]))
    n_types, n_colors = len(TYPES), len(COLORS)
    t, c = cells[..., 0], cells[..., 1]
    valid = ((t == 0) & (c == 0)) | ((t == OUT_OF_BOUNDS) & (c == OUT_OF_BOUNDS))
    valid |= (t >= 1) & (t <= n_types) & (c >= 1) & (c <= n_colors)
    held_ok = held == (0, 0) or (1 <= held[0] <= n_types and 1 <= held[1] <= n_colors)
    if not valid.all() or not held_ok:
        raise InvalidInput("observation payload contains unknown codes")
    return Observation(types=t.copy(), colors=c.copy(), held=held)


def visible_success(obs: Observation, goal: GoalSpec) -> bool:
    """Goal predicate evaluated on what the egocentric window shows."""
    r = VIEW_RADIUS
    if goal.family == "find":
        near = obs.matches(goal.target)[r - 1 : r + 2, r - 1 : r + 2]
        return bool(near.any()) or obs.holding(goal.target)
    if goal.family == "lift":
        return obs.holding(goal.target)
    a_cells = np.argwhere(obs.matches(goal.target))
    b_cells = np.argwhere(obs.matches(goal.second))
    for a in a_cells:
        for b in b_cells:
            if np.abs(a - b).max() <= 1:
                return True
    return False


class GoalGridEnv:
    """Pure transition functions over immutable ``GridState`` values.

    ``terminate_on_success=False`` is used for training rollouts, where the
    agent (not the oracle) decides when an episode ends.
    """

    def __init__(self, config: EnvConfig, terminate_on_success: bool = True):
        self.config = config
        self.terminate_on_success = terminate_on_success

    def check_satisfiable(self, goal: GoalSpec) -> None:
        cfg = self.config
        for d in goal.descriptors():
            if d.color not in cfg.colors or d.type not in cfg.types:
                raise InvalidInput(f"goal {goal.goal_id!r} uses {d}, absent from this env")
        if cfg.num_objects < len(goal.descriptors()):
            raise InvalidInput(f"goal {goal.goal_id!r} needs more objects than configured")

    def reset(self, goal: GoalSpec, seed: int) -> tuple[GridState, bytes]:
        """Sample a layout containing the goal's objects, with the goal not yet achieved."""
        self.check_satisfiable(goal)
        cfg = self.config
        rng = np.random.default_rng(seed)
        palette = [Descriptor(c, t) for c in cfg.colors for t in cfg.types]
        n_cells = cfg.width * cfg.height
        for _ in range(1000):
            cells = rng.choice(n_cells, size=cfg.num_objects + 1, replace=False)
            xy = [(int(c) % cfg.width, int(c) // cfg.width) for c in cells]
            descs = list(goal.descriptors())
            while len(descs) < cfg.num_objects:
                descs.append(palette[int(rng.integers(len(palette)))])
            objects = tuple(
                GridObject(i, d.type, d.color, xy[i + 1]) for i, d in enumerate(descs)
            )
            state = GridState(cfg.width, cfg.height, xy[0], objects, goal, seed=seed)
            if not ground_truth_success(state, goal):
                return state, render_observation(state)
        raise InvalidInput(f"could not sample a layout where {goal.goal_id!r} is unsolved")

    def step(self, state: GridState, action: str) -> StepResult:
        if state.done:
            raise InvalidState("step() called on a finished episode")
        if action not in ACTIONS:
            raise InvalidInput(f"unknown action {action!r}")
        agent, held, objects = state.agent, state.held, state.objects
        if action in MOVES:
            dx, dy = MOVES[action]
            x, y = agent[0] + dx, agent[1] + dy
            if 0 <= x < state.width and 0 <= y < state.height:
                agent = (x, y)
                if held is not None:
                    objects = tuple(
                        replace(o, cell=agent) if o.id == held else o for o in objects
                    )
        elif action == "grab" and held is None:
            here = state.objects_at(agent)
            if here:
                held = min(here, key=lambda o: o.id).id
        elif action == "drop" and held is not None:
            if not state.objects_at(agent):
                held = None
        nxt = replace(state, agent=agent, held=held, objects=objects, steps=state.steps + 1)
        success = ground_truth_success(nxt, state.goal)
        gt = int(success and not state.achieved)
        done = (bool(success) and self.terminate_on_success) or nxt.steps >= self.config.timeout
        nxt = replace(nxt, achieved=state.achieved or bool(success), done=done)
        return StepResult(nxt, render_observation(nxt), done, gt)


def expert_action(state: GridState, rng: np.random.Generator) -> str:
    """Scripted near-optimal policy, used to reach positive states when building datasets."""
    goal = state.goal

    def toward(cell):
        dx, dy = cell[0] - state.agent[0], cell[1] - state.agent[1]
        if dx == 0 and dy == 0:
            return None
        if abs(dx) >= abs(dy):
            return "right" if dx > 0 else "left"
        return "down" if dy > 0 else "up"

    def nearest(desc):
        cands = [o for o in state.objects if o.descriptor == desc and o.id != state.held]
        if not cands:
            return None
        return min(cands, key=lambda o: (chebyshev(o.cell, state.agent), o.id))

    held = state.object(state.held) if state.held is not None else None
    if goal.family == "find":
        tgt = nearest(goal.target)
        return toward(tgt.cell) or "noop" if tgt else "noop"
    if held is not None and held.descriptor != goal.target:
        return "drop" if not state.objects_at(state.agent) else ACTIONS[int(rng.integers(4))]
    if held is None:
        tgt = nearest(goal.target)
        if tgt is None:
            return "noop"
        return toward(tgt.cell) or "grab"
    if goal.family == "lift":
        return "noop"
    b = nearest(goal.second)
    if b is None:
        return "noop"
    if chebyshev(b.cell, state.agent) <= 1 and not state.objects_at(state.agent):
        return "drop"
    if chebyshev(b.cell, state.agent) <= 1:
        return ACTIONS[int(rng.integers(4))]
    return toward(b.cell) or ACTIONS[int(rng.integers(4))]


def replay(env: GoalGridEnv, goal: GoalSpec, seed: int, actions: Iterable[str]) -> list[StepResult]:
    """Re-run an action sequence from a fresh reset."""
    state, _ = env.reset(goal, seed)
    out = []
    for a in actions:
        res = env.step(state, a)
        out.append(res)
        state = res.state
    return out
