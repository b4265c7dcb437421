"""Binary goal-achievement reward from embedding similarities.

The probability that observation ``o`` shows goal ``l`` achieved is a
temperature softmax over cosine similarities between the image embedding
and the text embeddings of ``l`` and its frozen negatives; the reward is 1
when that probability is strictly above the threshold.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .embedding import EmbeddingProvider
from .env import GoalSpec
from .errors import InvalidInput
from .prompting import PLAIN, PromptTemplate, apply_template

DEFAULT_TEMPERATURE = 0.07
DEFAULT_THRESHOLD = 0.5
MAX_DEFAULT_NEGATIVES = 64


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInput(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(min(1.0, max(-1.0, a @ b)))


def candidate_probabilities(
    obs_emb: np.ndarray, candidate_embs: np.ndarray, temperature: float
) -> np.ndarray:
    """Softmax over ``cos(obs, c) / temperature`` for each row ``c``."""
    if temperature <= 0 or not np.isfinite(temperature):
        raise InvalidInput("temperature must be a positive finite number")
    obs_emb = np.asarray(obs_emb, dtype=np.float64)
    cands = np.asarray(candidate_embs, dtype=np.float64)
    if obs_emb.ndim != 1 or obs_emb.size == 0:
        raise InvalidInput("observation embedding must be a non-empty vector")
    if cands.ndim != 2 or cands.shape[0] == 0 or cands.shape[1] != obs_emb.size:
        raise InvalidInput(f"candidate embeddings of shape {cands.shape} do not match dimension {obs_emb.size}")
    sims = np.clip(cands @ obs_emb, -1.0, 1.0)
    z = sims / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def goal_probability(
    obs_emb: np.ndarray,
    goal_emb: np.ndarray,
    negative_embs: Sequence[np.ndarray] | np.ndarray,
    temperature: float,
) -> float:
    """Probability of the goal among ``{goal} + negatives``."""
    goal_emb = np.asarray(goal_emb, dtype=np.float64)
    if goal_emb.size == 0:
        raise InvalidInput("goal embedding must be non-empty")
    rows = [goal_emb] + [np.asarray(n, dtype=np.float64) for n in negative_embs]
    for r in rows:
        if r.shape != goal_emb.shape:
            raise InvalidInput("all candidate embeddings must share one dimension")
    return float(candidate_probabilities(obs_emb, np.stack(rows), temperature)[0])


def binary_reward(p: float, threshold: float) -> int:
    return 1 if p > threshold else 0


@dataclass(frozen=True)
class RewardModelConfig:
    temperature: float = DEFAULT_TEMPERATURE
    threshold: float = DEFAULT_THRESHOLD
    negatives: int | None = None  # None: |task set| - 1, capped at 64
    seed: int = 0
    template: str = PLAIN.id

    def __post_init__(self):
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise InvalidInput("temperature must be > 0")
        if not (0.0 <= self.threshold <= 1.0):
            raise InvalidInput("threshold must lie in [0, 1]")
        if self.negatives is not None and self.negatives < 1:
            raise InvalidInput("negatives must be >= 1")

    def resolve_negatives(self, n_goals: int) -> int:
        n = self.negatives
        if n is None:
            n = min(n_goals - 1, MAX_DEFAULT_NEGATIVES)
        if not (1 <= n <= n_goals - 1):
            raise InvalidInput(f"negatives must be in [1, {n_goals - 1}] for {n_goals} goals, got {n}")
        return n


@dataclass(frozen=True)
class TaskSet:
    goals: tuple[GoalSpec, ...]
    prompts: tuple[str, ...]
    template: str = PLAIN.id

    def __post_init__(self):
        if not self.goals:
            raise InvalidInput("task set must be non-empty")
        ids = [g.goal_id for g in self.goals]
        if len(set(ids)) != len(ids):
            raise InvalidInput("goal ids must be unique")
        if len(self.prompts) != len(self.goals) or not all(self.prompts):
            raise InvalidInput("every goal needs a non-empty prompt")

    @classmethod
    def from_goals(cls, goals: Sequence[GoalSpec], template: PromptTemplate = PLAIN) -> "TaskSet":
        goals = tuple(goals)
        return cls(goals, tuple(apply_template(template, g.task_name) for g in goals), template.id)

    @property
    def ids(self) -> list[str]:
        return [g.goal_id for g in self.goals]

    def index(self, goal_id: str) -> int:
        try:
            return self.ids.index(goal_id)
        except ValueError:
            raise InvalidInput(f"unknown goal id {goal_id!r}") from None

    def __len__(self) -> int:
        return len(self.goals)


def _goal_seed(seed: int, goal_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{goal_id}".encode()).digest()[:8], "little")


def sample_negatives(task_set: TaskSet, goal_id: str, n: int, seed: int) -> tuple[str, ...]:
    """Draw ``n`` distinct other goals uniformly; results keep task-set order."""
    idx = task_set.index(goal_id)
    if not (0 <= n <= len(task_set) - 1):
        raise InvalidInput(f"cannot draw {n} negatives from {len(task_set) - 1} other goals")
    others = [i for i in range(len(task_set)) if i != idx]
    rng = np.random.default_rng(_goal_seed(seed, goal_id))
    picked = sorted(int(i) for i in rng.choice(others, size=n, replace=False))
    return tuple(task_set.goals[i].goal_id for i in picked)


@dataclass(frozen=True)
class NegativeAssignment:
    negatives: Mapping[str, tuple[str, ...]]
    n: int
    seed: int

    @classmethod
    def build(cls, task_set: TaskSet, n: int, seed: int) -> "NegativeAssignment":
        return cls({g: sample_negatives(task_set, g, n, seed) for g in task_set.ids}, n, seed)

    def __getitem__(self, goal_id: str) -> tuple[str, ...]:
        try:
            return self.negatives[goal_id]
        except KeyError:
            raise InvalidInput(f"goal {goal_id!r} has no negative assignment") from None


@dataclass(frozen=True)
class RewardOutput:
    probability: float
    reward: int


class RewardModel:
    """Frozen reward function for one run.

    Text embeddings of the whole task set are computed at construction and
    never recomputed, so the model is read-only afterwards and can be shared
    between rollout workers.
    """

    def __init__(
        self,
        provider: EmbeddingProvider,
        config: RewardModelConfig,
        task_set: TaskSet,
        assignment: NegativeAssignment | None = None,
    ):
        self.provider = provider
        self.config = config
        self.task_set = task_set
        if assignment is None:
            assignment = NegativeAssignment.build(
                task_set, config.resolve_negatives(len(task_set)), config.seed
            )
        self.assignment = assignment
        self._text_cache: dict[tuple[str, str, str], np.ndarray] = {}
        self._text = np.stack([self._embed_prompt(g, p) for g, p in zip(task_set.goals, task_set.prompts)])
        self._candidates = {
            gid: np.array([task_set.index(gid)] + [task_set.index(n) for n in assignment[gid]])
            for gid in task_set.ids
        }

    def _embed_prompt(self, goal: GoalSpec, prompt: str) -> np.ndarray:
        key = (self.provider.name, self.task_set.template, goal.task_name)
        cached = self._text_cache.get(key)
        if cached is None:
            cached = np.asarray(self.provider.embed_text(prompt), dtype=np.float64)
            self._text_cache[key] = cached
        return cached

    def text_embedding(self, goal_id: str) -> np.ndarray:
        return self._text[self.task_set.index(goal_id)].copy()

    def probability_from_embedding(self, obs_emb: np.ndarray, goal_id: str) -> float:
        if goal_id not in self._candidates:
            raise InvalidInput(f"unknown goal id {goal_id!r}")
        cands = self._text[self._candidates[goal_id]]
        return float(candidate_probabilities(obs_emb, cands, self.config.temperature)[0])

    def probability(self, observation: bytes, goal_id: str) -> float:
        if goal_id not in self._candidates:
            raise InvalidInput(f"unknown goal id {goal_id!r}")
        return self.probability_from_embedding(self.provider.embed_image(observation), goal_id)

    def compute_reward(self, observation: bytes, goal_id: str) -> RewardOutput:
        p = self.probability(observation, goal_id)
        return RewardOutput(p, binary_reward(p, self.config.threshold))

    __call__ = compute_reward
