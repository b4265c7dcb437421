"""Offline and online evaluation of reward models.

Offline: score a labeled dataset of (observation, goal, label) examples,
sweep the threshold to get a precision-recall curve, summarize it as an
area. Online: correlation between intrinsic and ground-truth training
returns.
"""
from __future__ import annotations

import base64
import binascii
import csv
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .agent import TrainingLog
from .env import ACTIONS, EnvConfig, GoalGridEnv, GoalSpec, expert_action, ground_truth_success
from .errors import DatasetError, InvalidInput, UndefinedCorrelation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledExample:
    goal: str
    label: int
    observation: bytes | None = None
    probability: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInput(f"label must be 0 or 1, got {self.label!r}")
        if self.observation is None and self.probability is None:
            raise InvalidInput("example needs an observation or a precomputed probability")
        if self.probability is not None and not (0.0 <= self.probability <= 1.0):
            raise InvalidInput("probability must lie in [0, 1]")

    def to_json(self) -> dict:
        out: dict = {"goal": self.goal, "label": self.label}
        if self.observation is not None:
            out["observation"] = base64.b64encode(self.observation).decode("ascii")
        if self.probability is not None:
            out["probability"] = self.probability
        return out

    @classmethod
    def from_json(cls, obj) -> "LabeledExample":
        if not isinstance(obj, dict):
            raise InvalidInput("example must be a JSON object")
        goal, label = obj.get("goal"), obj.get("label")
        if not isinstance(goal, str) or not goal:
            raise InvalidInput("'goal' must be a non-empty string")
        if isinstance(label, bool) or not isinstance(label, int):
            raise InvalidInput("'label' must be the integer 0 or 1")
        obs = obj.get("observation")
        if obs is not None:
            if not isinstance(obs, str):
                raise InvalidInput("'observation' must be a base64 string")
            try:
                obs = base64.b64decode(obs, validate=True)
            except (binascii.Error, ValueError):
                raise InvalidInput("'observation' is not valid base64") from None
        prob = obj.get("probability")
        if prob is not None and (isinstance(prob, bool) or not isinstance(prob, (int, float))):
            raise InvalidInput("'probability' must be a number")
        return cls(goal, label, obs, None if prob is None else float(prob))


def write_dataset(examples: Iterable[LabeledExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> list[LabeledExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(LabeledExample.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from None
            except InvalidInput as exc:
                raise DatasetError(str(exc), lineno) from None
    return out


def generate_dataset(
    env_config: EnvConfig,
    goals: Sequence[GoalSpec],
    size: int,
    seed: int,
    expert_prob: float = 0.5,
) -> list[LabeledExample]:
    """Balanced dataset of states visited by a noisy scripted policy.

    Every visited state is labeled by the oracle and kept only while its
    class quota (``size // 2`` positives) is not yet full.
    """
    if size < 2:
        raise InvalidInput("dataset size must be >= 2")
    rng = np.random.default_rng(seed)
    env = GoalGridEnv(env_config, terminate_on_success=False)
    want = {1: size // 2, 0: size - size // 2}
    have = {0: 0, 1: 0}
    out: list[LabeledExample] = []
    for _episode in range(1000 * size):
        if have[0] == want[0] and have[1] == want[1]:
            break
        goal = goals[int(rng.integers(len(goals)))]
        state, _ = env.reset(goal, int(rng.integers(2**31)))
        while not state.done:
            if rng.random() < expert_prob:
                action = expert_action(state, rng)
            else:
                action = ACTIONS[int(rng.integers(len(ACTIONS)))]
            res = env.step(state, action)
            state = res.state
            label = ground_truth_success(state, goal)
            if have[label] < want[label]:
                out.append(LabeledExample(goal.goal_id, label, res.observation))
                have[label] += 1
    else:
        raise InvalidInput(f"could not balance a dataset of {size} examples; positives are too rare")
    return out


# --- scoring and PR curves -------------------------------------------------------


def score_dataset(dataset: Sequence[LabeledExample], reward_model) -> list[tuple[float, int]]:
    if not dataset:
        raise InvalidInput("dataset is empty")
    out = []
    for ex in dataset:
        if ex.probability is not None:
            p = ex.probability
        else:
            p = reward_model.probability(ex.observation, ex.goal)
        out.append((p, ex.label))
    return out


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class PRCurve:
    points: tuple[PRPoint, ...]
    size: int
    positives: int
    undefined: tuple[float, ...] = field(default=())  # thresholds with no predicted positive

    @property
    def thresholds(self) -> list[float]:
        return [p.threshold for p in self.points]

    def auc(self) -> float:
        return pr_auc(self)


def default_thresholds(k: int = 101) -> list[float]:
    return [i / (k - 1) for i in range(k)]


def pr_curve(scored: Sequence[tuple[float, int]], thresholds: Sequence[float] | None = None) -> PRCurve:
    """Precision and recall of ``p > beta`` at every threshold."""
    if thresholds is None:
        thresholds = default_thresholds()
    thr = sorted(set(float(t) for t in thresholds))
    if not thr or thr[0] < 0.0 or thr[-1] > 1.0:
        raise InvalidInput("thresholds must be a non-empty subset of [0, 1]")
    probs = np.array([p for p, _ in scored], dtype=np.float64)
    labels = np.array([y for _, y in scored], dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InvalidInput("dataset has no positive labels; recall is undefined")
    pred = probs[None, :] > np.array(thr)[:, None]
    tp = (pred & labels).sum(axis=1)
    pp = pred.sum(axis=1)
    points, undefined = [], []
    for beta, t, n in zip(thr, tp, pp):
        if n == 0:
            undefined.append(beta)
            continue
        points.append(PRPoint(beta, float(t / n), float(t / n_pos)))
    return PRCurve(tuple(points), len(scored), n_pos, tuple(undefined))


def pr_auc(curve: PRCurve) -> float:
    """Trapezoidal area under precision as a function of recall.

    Each recall value keeps its best precision; the curve is extended flat
    from the lowest observed recall down to recall 0.
    """
    if not curve.points:
        return 0.0
    best: dict[float, float] = {}
    for p in curve.points:
        best[p.recall] = max(best.get(p.recall, 0.0), p.precision)
    rs = sorted(best)
    xs = [0.0] + rs
    ys = [best[rs[0]]] + [best[r] for r in rs]
    return float(sum((xs[i + 1] - xs[i]) * (ys[i + 1] + ys[i]) / 2 for i in range(len(xs) - 1)))


def write_pr_csv(curve: PRCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta", "precision", "recall"])
        for p in curve.points:
            w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall)])


def compare_fidelities(
    fidelities: Sequence[float],
    dataset: Sequence[LabeledExample],
    model_for_fidelity: Callable[[float], object],
    thresholds: Sequence[float] | None = None,
) -> list[PRCurve]:
    """One PR curve per embedder fidelity, all on the same dataset."""
    if len(fidelities) < 2:
        raise InvalidInput("need at least two fidelities to compare")
    return [pr_curve(score_dataset(dataset, model_for_fidelity(f)), thresholds) for f in fidelities]


# --- online -----------------------------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise InvalidInput("series must have equal length")
    if len(x) < 3:
        raise UndefinedCorrelation("need at least 3 points")
    if statistics.pvariance(x) == 0 or statistics.pvariance(y) == 0:
        raise UndefinedCorrelation("a series has zero variance")
    r = statistics.correlation([float(v) for v in x], [float(v) for v in y])
    return max(-1.0, min(1.0, r))


def correlation(log: TrainingLog) -> float:
    """Pearson r between per-iteration intrinsic and ground-truth training returns."""
    return pearson(log.intrinsic_return, log.gt_return_train)


# --- prompt templates -------------------------------------------------------------


@dataclass(frozen=True)
class PromptCompareRow:
    template_id: str
    auc: float
    heldout_return: float | None = None


def prompt_compare(
    template_ids: Sequence[str],
    config,
    dataset: Sequence[LabeledExample],
    train: bool = False,
    provider=None,
) -> list[PromptCompareRow]:
    """Offline AUC per template and, with ``train``, a full training run each."""
    from .config import build_provider, build_reward_model
    from .agent import run_training, vlm_reward_fn

    if len(template_ids) < 2:
        raise InvalidInput("need at least two templates to compare")
    registry = config.registry()
    for tid in template_ids:
        registry.get(tid)
    goals = config.goals()
    provider = provider if provider is not None else build_provider(config, goals)
    thresholds = config.eval.threshold_grid()
    rows = []
    for tid in template_ids:
        model = build_reward_model(config, provider, goals, template_id=tid)
        auc = pr_auc(pr_curve(score_dataset(dataset, model), thresholds))
        held = None
        if train:
            res = run_training(config.env, config.agent, goals, vlm_reward_fn(model))
            held = res.final_holdout_return
        rows.append(PromptCompareRow(tid, auc, held))
    return rows


def write_compare_csv(rows: Sequence[PromptCompareRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["template_id", "auc", "heldout_return"])
        for r in rows:
            w.writerow([r.template_id, repr(r.auc), "" if r.heldout_return is None else repr(r.heldout_return)])


def plot_pr_curves(curves: Sequence[PRCurve], labels: Sequence[str], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "vlmreward"
    fig, ax = plt.subplots(figsize=(5, 4))
    for c, lab in zip(curves, labels):
        pts = sorted(c.points, key=lambda p: p.recall)
        ax.plot([p.recall for p in pts], [p.precision for p in pts], label=f"{lab} (AUC {pr_auc(c):.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
