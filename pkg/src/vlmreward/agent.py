"""Goal-conditioned REINFORCE learner trained on the intrinsic reward only.

The policy is linear-softmax over goal-relative features of the egocentric
window: which visible cells hold the goal's target object, its second
object (Place goals), any other object, or lie outside the grid. Features
are gated by (task family, what is being held), so one weight block exists
per context. Because features are expressed relative to the goal
descriptor, the policy transfers to held-out goals.

Ground-truth rewards are produced by the environment and written to the
logging record (``Transition``) only. The learner consumes
``LearnerEpisode`` values, which have no field that could carry them.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import (
    ACTIONS,
    FAMILIES,
    VIEW_SIZE,
    OUT_OF_BOUNDS,
    EnvConfig,
    GoalGridEnv,
    GoalSpec,
    GridState,
    Observation,
    decode_observation,
    ground_truth_success,
    obs_digest,
)
from .errors import InvalidInput, TrainingError, VLMRewardError
from .reward import RewardOutput

log = logging.getLogger(__name__)

N_CELLS = VIEW_SIZE * VIEW_SIZE
# per-cell maps for A, B, other objects, out-of-bounds; direction summaries of
# the nearest A and B (left, right, up, down, adjacent, visible); bias
BASE_FEATURES = 4 * N_CELLS + 12 + 1
N_CONTEXTS = len(FAMILIES) * 3
N_FEATURES = N_CONTEXTS * BASE_FEATURES

# (observation payload, goal, state) -> reward. The state argument exists for
# the oracle diagnostic; VLM rewards ignore it.
RewardFn = Callable[[bytes, GoalSpec, GridState], RewardOutput]


@dataclass(frozen=True)
class AgentConfig:
    iterations: int = 50
    batch_size: int = 40
    learning_rate: float = 0.05
    entropy_weight: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    split_seed: int = 0
    holdout_fraction: float = 0.2
    eval_episodes: int = 20
    final_eval_episodes: int = 200
    greedy_eval: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInput("iterations must be >= 0")
        if self.batch_size < 1 or self.eval_episodes < 1:
            raise InvalidInput("batch_size and eval_episodes must be >= 1")
        if not (self.learning_rate > 0):
            raise InvalidInput("learning_rate must be > 0")
        if self.entropy_weight < 0:
            raise InvalidInput("entropy_weight must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInput(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise InvalidInput("holdout_fraction must lie in (0, 1)")


def goal_features(obs: Observation, goal: GoalSpec) -> np.ndarray:
    base = np.zeros(BASE_FEATURES)
    a = obs.matches(goal.target)
    b = obs.matches(goal.second) if goal.second is not None else np.zeros_like(a)
    oob = obs.types == OUT_OF_BOUNDS
    other = (obs.types != 0) & ~oob & ~a & ~b
    base[0:N_CELLS] = a.ravel()
    base[N_CELLS : 2 * N_CELLS] = b.ravel()
    base[2 * N_CELLS : 3 * N_CELLS] = other.ravel()
    base[3 * N_CELLS : 4 * N_CELLS] = oob.ravel()
    base[4 * N_CELLS : 4 * N_CELLS + 6] = _direction(a)
    base[4 * N_CELLS + 6 : 4 * N_CELLS + 12] = _direction(b)
    base[-1] = 1.0
    if obs.held == (0, 0):
        held_state = 0
    elif obs.holding(goal.target):
        held_state = 1
    else:
        held_state = 2
    ctx = FAMILIES.index(goal.family) * 3 + held_state
    phi = np.zeros(N_FEATURES)
    phi[ctx * BASE_FEATURES : (ctx + 1) * BASE_FEATURES] = base
    return phi


_OFFSETS = np.stack(
    np.meshgrid(np.arange(VIEW_SIZE) - VIEW_SIZE // 2, np.arange(VIEW_SIZE) - VIEW_SIZE // 2, indexing="xy"),
    axis=-1,
)  # [row, col] -> (dx, dy)


def _direction(mask: np.ndarray) -> np.ndarray:
    out = np.zeros(6)
    if not mask.any():
        return out
    offs = _OFFSETS[mask]
    dx, dy = offs[np.argmin(np.abs(offs).max(axis=1))]
    out[:4] = dx < 0, dx > 0, dy < 0, dy > 0
    out[4] = max(abs(dx), abs(dy)) <= 1
    out[5] = 1.0
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Policy:
    """Linear softmax policy ``pi(a | s, g) = softmax(W @ phi(s, g))``.

    Zero-initialized weights give the uniform policy. ``moments`` holds Adam
    state (first moment, second moment, step count) when Adam is used.
    """

    def __init__(
        self,
        goals: Sequence[GoalSpec],
        weights: np.ndarray | None = None,
        init_scale: float = 0.0,
        seed: int = 0,
        moments: tuple[np.ndarray, np.ndarray, int] | None = None,
    ):
        self.goals = {g.goal_id: g for g in goals}
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = init_scale * rng.standard_normal((len(ACTIONS), N_FEATURES))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(ACTIONS), N_FEATURES):
            raise InvalidInput(f"weights must have shape {(len(ACTIONS), N_FEATURES)}")
        self.weights = weights
        self.moments = moments

    def with_weights(self, weights: np.ndarray, moments=None) -> "Policy":
        return Policy(list(self.goals.values()), weights, moments=moments)

    def goal(self, goal_id: str) -> GoalSpec:
        try:
            return self.goals[goal_id]
        except KeyError:
            raise InvalidInput(f"unknown goal id {goal_id!r}") from None

    def features(self, observation: bytes, goal_id: str) -> np.ndarray:
        return goal_features(decode_observation(observation), self.goal(goal_id))

    def action_probs(self, observation: bytes, goal_id: str) -> np.ndarray:
        return softmax(self.weights @ self.features(observation, goal_id))

    def act_features(self, phi: np.ndarray, rng: np.random.Generator | None, greedy: bool = False) -> int:
        logits = self.weights @ phi
        if greedy:
            return int(np.argmax(logits))  # first maximum wins ties
        p = softmax(logits)
        return int(rng.choice(len(p), p=p))

    def act(
        self,
        observation: bytes,
        goal_id: str,
        rng: np.random.Generator | None = None,
        greedy: bool = False,
    ) -> str:
        if not greedy and rng is None:
            raise InvalidInput("sampling requires an rng")
        return ACTIONS[self.act_features(self.features(observation, goal_id), rng, greedy)]

    def to_json(self) -> dict:
        return {
            "actions": list(ACTIONS),
            "goals": sorted(self.goals),
            "shape": list(self.weights.shape),
            "weights": [float(x) for x in self.weights.ravel()],
        }


# --- episode records -----------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    """One logged step. This is the only place ground-truth reward lives."""

    episode: int
    env_seed: int
    step: int
    goal: str
    action: str
    obs_digest: str
    intrinsic_p: float
    intrinsic_r: int
    gt_r: int
    done: bool

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class LearnerEpisode:
    """What the learner is allowed to see: features, actions, intrinsic rewards."""

    features: np.ndarray  # (steps, N_FEATURES)
    actions: np.ndarray  # (steps,) action indices
    rewards: np.ndarray  # (steps,) intrinsic rewards


LEARNER_FIELDS = frozenset(f.name for f in dataclasses.fields(LearnerEpisode))
GROUND_TRUTH_MARKERS = ("gt", "ground", "oracle")


def assert_no_ground_truth(batch: Sequence[LearnerEpisode]) -> None:
    """Runtime guard: learner inputs are bare ``LearnerEpisode`` values, nothing more."""
    for ep in batch:
        if type(ep) is not LearnerEpisode:
            raise TrainingError(f"learner batch holds {type(ep).__name__}, expected LearnerEpisode")
        names = set(vars(ep))
        leaked = [n for n in names if n not in LEARNER_FIELDS or any(m in n for m in GROUND_TRUTH_MARKERS)]
        if leaked:
            raise TrainingError(f"learner batch carries forbidden fields {sorted(leaked)}")


@dataclass
class Trajectory:
    goal: str
    env_seed: int
    transitions: list[Transition] = field(default_factory=list)
    learner: LearnerEpisode | None = None

    @property
    def intrinsic_return(self) -> int:
        return int(any(t.intrinsic_r for t in self.transitions))

    @property
    def gt_return(self) -> int:
        return int(sum(t.gt_r for t in self.transitions))

    def __len__(self) -> int:
        return len(self.transitions)


def collect_episode(
    policy: Policy,
    env: GoalGridEnv,
    reward_fn: RewardFn,
    goal_id: str,
    env_seed: int,
    rng: np.random.Generator,
    episode: int = 0,
) -> Trajectory:
    """Roll out one training episode; it ends on intrinsic reward 1 or timeout."""
    if env.terminate_on_success:
        raise InvalidInput("training rollouts need an env with terminate_on_success=False")
    goal = policy.goal(goal_id)
    state, obs = env.reset(goal, env_seed)
    feats, acts, rews = [], [], []
    traj = Trajectory(goal_id, env_seed)
    while True:
        phi = policy.features(obs, goal_id)
        a = policy.act_features(phi, rng)
        res = env.step(state, ACTIONS[a])
        out = reward_fn(res.observation, goal, res.state)
        done = bool(out.reward) or res.done
        feats.append(phi)
        acts.append(a)
        rews.append(float(out.reward))
        traj.transitions.append(
            Transition(
                episode, env_seed, res.state.steps, goal_id, ACTIONS[a],
                obs_digest(res.observation), out.probability, out.reward, res.gt_reward, done,
            )
        )
        state, obs = res.state, res.observation
        if done:
            break
    traj.learner = LearnerEpisode(np.stack(feats), np.array(acts), np.array(rews))
    return traj


def evaluate(
    policy: Policy,
    env_config: EnvConfig,
    goal_ids: Sequence[str],
    episodes: int,
    rng: np.random.Generator,
    greedy: bool = False,
) -> float:
    """Mean ground-truth return; episodes end on oracle success or timeout."""
    env = GoalGridEnv(env_config, terminate_on_success=True)
    total = 0
    for _ in range(episodes):
        gid = goal_ids[int(rng.integers(len(goal_ids)))]
        state, obs = env.reset(policy.goal(gid), int(rng.integers(2**31)))
        while True:
            res = env.step(state, policy.act(obs, gid, rng, greedy=greedy))
            total += res.gt_reward
            state, obs = res.state, res.observation
            if res.done:
                break
    return total / episodes


# --- learning ------------------------------------------------------------------


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def policy_loss_and_grad(
    weights: np.ndarray,
    features: np.ndarray,
    actions: np.ndarray,
    advantages: np.ndarray,
    entropy_weight: float,
) -> tuple[float, np.ndarray]:
    """Mean over steps of ``-A * log pi(a|s) - c * H(pi(.|s))`` and its gradient in W."""
    logits = features @ weights.T
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    m = len(actions)
    rows = np.arange(m)
    entropy = -(p * logp).sum(axis=1)
    loss = float(-(advantages * logp[rows, actions]).mean() - entropy_weight * entropy.mean())
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    dlogits = -advantages[:, None] * (onehot - p)
    dlogits += entropy_weight * p * (logp + entropy[:, None])
    grad = dlogits.T @ features / m
    return loss, grad


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def update(
    policy: Policy,
    batch: Sequence[LearnerEpisode],
    gamma: float,
    learning_rate: float,
    entropy_weight: float,
    optimizer: str = "adam",
) -> tuple[Policy, float]:
    """One REINFORCE step with a mean-return baseline; returns a new policy."""
    if not batch:
        raise InvalidInput("update needs a non-empty batch")
    assert_no_ground_truth(batch)
    feats = np.concatenate([ep.features for ep in batch])
    acts = np.concatenate([ep.actions for ep in batch])
    returns = np.concatenate([discounted_returns(ep.rewards, gamma) for ep in batch])
    adv = returns - returns.mean()
    loss, grad = policy_loss_and_grad(policy.weights, feats, acts, adv, entropy_weight)
    if not math.isfinite(loss) or not np.isfinite(grad).all():
        raise TrainingError(f"non-finite loss {loss} (mean return {returns.mean():.4f})")
    if optimizer == "sgd":
        return policy.with_weights(policy.weights - learning_rate * grad), loss
    b1, b2 = ADAM_BETAS
    if policy.moments is None:
        m, v, t = np.zeros_like(grad), np.zeros_like(grad), 0
    else:
        m, v, t = policy.moments
    t += 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    step = learning_rate * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + ADAM_EPS)
    return policy.with_weights(policy.weights - step, (m, v, t)), loss


# --- training loop -------------------------------------------------------------


def split_goals(goals: Sequence[GoalSpec], holdout_fraction: float, seed: int):
    """Deterministic train/held-out split ranked by a seeded hash of the goal id."""
    if len(goals) < 2:
        raise InvalidInput("need at least two goals to hold some out")
    ranked = sorted(goals, key=lambda g: hashlib.sha256(f"{seed}:{g.goal_id}".encode()).digest())
    k = min(len(goals) - 1, max(1, round(holdout_fraction * len(goals))))
    held = {g.goal_id for g in ranked[:k]}
    train = [g for g in goals if g.goal_id not in held]
    holdout = [g for g in goals if g.goal_id in held]
    return train, holdout


@dataclass
class TrainingLog:
    intrinsic_return: list[float] = field(default_factory=list)
    gt_return_train: list[float] = field(default_factory=list)
    gt_return_holdout: list[float] = field(default_factory=list)
    mean_ep_len: list[float] = field(default_factory=list)
    aborted_episodes: int = 0

    COLUMNS = ("iteration", "intrinsic_return", "gt_return_train", "gt_return_holdout", "mean_ep_len")

    def __len__(self) -> int:
        return len(self.intrinsic_return)

    def append(self, intrinsic: float, gt_train: float, gt_holdout: float, ep_len: float) -> None:
        self.intrinsic_return.append(intrinsic)
        self.gt_return_train.append(gt_train)
        self.gt_return_holdout.append(gt_holdout)
        self.mean_ep_len.append(ep_len)

    def rows(self):
        for i in range(len(self)):
            yield (
                i,
                self.intrinsic_return[i],
                self.gt_return_train[i],
                self.gt_return_holdout[i],
                self.mean_ep_len[i],
            )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainingLog":
        out = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                out.append(
                    float(rec["intrinsic_return"]),
                    float(rec["gt_return_train"]),
                    float(rec["gt_return_holdout"]),
                    float(rec["mean_ep_len"]),
                )
        return out


@dataclass
class TrainingResult:
    log: TrainingLog
    policy: Policy
    trajectories: list[Trajectory]
    train_goals: list[GoalSpec]
    holdout_goals: list[GoalSpec]
    final_holdout_return: float | None = None


def run_training(
    env_config: EnvConfig,
    agent_config: AgentConfig,
    goals: Sequence[GoalSpec],
    reward_fn: RewardFn,
    keep_trajectories: bool = False,
    on_iteration: Callable[[int, TrainingLog], None] | None = None,
) -> TrainingResult:
    """Alternate episode collection and policy updates for the configured budget."""
    train_goals, holdout_goals = split_goals(goals, agent_config.holdout_fraction, agent_config.split_seed)
    env = GoalGridEnv(env_config, terminate_on_success=False)
    for g in goals:
        env.check_satisfiable(g)
    policy = Policy(goals)
    rng = np.random.default_rng([agent_config.seed, 0])
    eval_rng = np.random.default_rng([agent_config.seed, 1])
    train_ids = [g.goal_id for g in train_goals]
    holdout_ids = [g.goal_id for g in holdout_goals]
    tlog = TrainingLog()
    kept: list[Trajectory] = []
    episode = 0
    for it in range(agent_config.iterations):
        batch: list[Trajectory] = []
        last_error: Exception | None = None
        for _ in range(agent_config.batch_size):
            gid = train_ids[int(rng.integers(len(train_ids)))]
            env_seed = int(rng.integers(2**31))
            try:
                traj = collect_episode(policy, env, reward_fn, gid, env_seed, rng, episode)
            except (VLMRewardError, OSError) as exc:
                log.error("episode %d aborted: %s", episode, exc)
                tlog.aborted_episodes += 1
                last_error = exc
                continue
            finally:
                episode += 1
            batch.append(traj)
        if not batch:
            log.error("every episode of iteration %d was aborted", it)
            raise last_error
        policy, loss = update(
            policy,
            [t.learner for t in batch],
            env_config.discount,
            agent_config.learning_rate,
            agent_config.entropy_weight,
            agent_config.optimizer,
        )
        held = evaluate(
            policy, env_config, holdout_ids, agent_config.eval_episodes, eval_rng, agent_config.greedy_eval
        )
        tlog.append(
            float(np.mean([t.intrinsic_return for t in batch])),
            float(np.mean([t.gt_return for t in batch])),
            held,
            float(np.mean([len(t) for t in batch])),
        )
        log.debug("iter %d loss %.4f intrinsic %.3f holdout %.3f", it, loss, tlog.intrinsic_return[-1], held)
        if keep_trajectories:
            kept.extend(batch)
        if on_iteration is not None:
            on_iteration(it, tlog)
    final = None
    if agent_config.iterations > 0:
        final = evaluate(
            policy,
            env_config,
            holdout_ids,
            agent_config.final_eval_episodes,
            np.random.default_rng([agent_config.seed, 2]),
            agent_config.greedy_eval,
        )
    return TrainingResult(tlog, policy, kept, train_goals, holdout_goals, final)


def vlm_reward_fn(model) -> RewardFn:
    """Adapt a ``RewardModel``; the environment state is never looked at."""

    def fn(observation: bytes, goal: GoalSpec, state: GridState) -> RewardOutput:
        return model.compute_reward(observation, goal.goal_id)

    return fn


def oracle_reward_fn(observation: bytes, goal: GoalSpec, state: GridState) -> RewardOutput:
    """Diagnostic: reward the agent with the simulator's success predicate."""
    r = ground_truth_success(state, goal)
    return RewardOutput(float(r), r)
