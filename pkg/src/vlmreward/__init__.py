"""Vision-language embeddings as a sparse binary reward for goal-conditioned RL."""

from .embedding import (
    RemoteEmbeddingClient,
    RemoteEmbeddingProvider,
    RemoteEmbeddingRequest,
    SyntheticEmbedder,
    SyntheticEmbedderConfig,
)
from .env import EnvConfig, GoalGridEnv, GoalSpec, ground_truth_success, render_observation
from .prompting import PromptTemplate, apply_template, builtin_templates
from .reward import (
    NegativeAssignment,
    RewardModel,
    RewardModelConfig,
    TaskSet,
    binary_reward,
    cosine_similarity,
    goal_probability,
    sample_negatives,
)

__all__ = [
    "EnvConfig",
    "GoalGridEnv",
    "GoalSpec",
    "NegativeAssignment",
    "PromptTemplate",
    "RemoteEmbeddingClient",
    "RemoteEmbeddingProvider",
    "RemoteEmbeddingRequest",
    "RewardModel",
    "RewardModelConfig",
    "SyntheticEmbedder",
    "SyntheticEmbedderConfig",
    "TaskSet",
    "apply_template",
    "binary_reward",
    "builtin_templates",
    "cosine_similarity",
    "goal_probability",
    "ground_truth_success",
    "render_observation",
    "sample_negatives",
]
