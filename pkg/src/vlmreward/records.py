"""Trajectory JSONL persistence and reward replay."""
from __future__ import annotations

import json
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence

from .agent import Transition, Trajectory
from .env import GoalGridEnv, GoalSpec, obs_digest
from .errors import DatasetError, InvalidState

TRANSITION_KEYS = ("step", "goal", "action", "obs_digest", "intrinsic_p", "intrinsic_r", "gt_r", "done")


def write_trajectories(trajectories: Iterable[Trajectory], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for traj in trajectories:
            for t in traj.transitions:
                fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")
                n += 1
    return n


def read_transitions(path: str | Path) -> list[Transition]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Transition(**rec))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DatasetError(f"bad trajectory record: {exc}", lineno) from None
            missing = [k for k in TRANSITION_KEYS if k not in rec]
            if missing:
                raise DatasetError(f"record lacks {missing}", lineno)
    return out


def group_episodes(transitions: Sequence[Transition]) -> list[list[Transition]]:
    return [list(g) for _, g in groupby(transitions, key=lambda t: t.episode)]


def replay_rewards(
    transitions: Sequence[Transition],
    env: GoalGridEnv,
    goals: dict[str, GoalSpec],
    reward_fn,
) -> list[tuple[float, int]]:
    """Re-simulate every logged episode from its seed and recompute the intrinsic reward.

    Observation digests are checked along the way so a diverging replay is
    reported at the first mismatching step rather than as a reward mismatch.
    """
    out = []
    for episode in group_episodes(transitions):
        first = episode[0]
        goal = goals[first.goal]
        state, _ = env.reset(goal, first.env_seed)
        for t in episode:
            res = env.step(state, t.action)
            if obs_digest(res.observation) != t.obs_digest:
                raise InvalidState(f"replay diverged at episode {t.episode} step {t.step}")
            r = reward_fn(res.observation, goal, res.state)
            out.append((r.probability, r.reward))
            state = res.state
    return out
