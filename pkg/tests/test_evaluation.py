import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlmreward.agent import AgentConfig, TrainingLog, run_training, vlm_reward_fn
from vlmreward.config import build_reward_model, default_config
from vlmreward.env import EnvConfig, GoalGridEnv
from vlmreward.errors import DatasetError, InvalidInput, InvalidState, UndefinedCorrelation
from vlmreward.evaluation import (
    LabeledExample,
    PRCurve,
    PRPoint,
    compare_fidelities,
    correlation,
    default_thresholds,
    generate_dataset,
    pearson,
    plot_pr_curves,
    pr_auc,
    pr_curve,
    prompt_compare,
    read_dataset,
    score_dataset,
    write_dataset,
    write_pr_csv,
)
from vlmreward import records

EXAMPLE = [(0.9, 1), (0.6, 0), (0.4, 1), (0.1, 0)]


def brute_force(scored, thresholds):
    """Confusion-matrix recount with exact rationals."""
    pos = sum(y for _, y in scored)
    out, undefined = [], []
    for beta in thresholds:
        tp = fp = 0
        for p, y in scored:
            if p > beta:
                if y:
                    tp += 1
                else:
                    fp += 1
        if tp + fp == 0:
            undefined.append(beta)
        else:
            out.append((beta, float(Fraction(tp, tp + fp)), float(Fraction(tp, pos))))
    return out, undefined


def point(curve, beta):
    return next(p for p in curve.points if p.threshold == beta)


def test_pr_examples():
    c = pr_curve(EXAMPLE)
    assert (point(c, 0.5).precision, point(c, 0.5).recall) == (0.5, 0.5)
    assert (point(c, 0.0).precision, point(c, 0.0).recall) == (0.5, 1.0)
    assert c.undefined == tuple(i / 100 for i in range(90, 101))
    assert len(c.points) + len(c.undefined) == 101


def test_perfect_separation():
    scored = [(0.8, 1), (0.9, 1), (0.2, 0), (0.3, 0)]
    c = pr_curve(scored)
    for p in c.points:
        if 0.3 <= p.threshold < 0.8:
            assert (p.precision, p.recall) == (1.0, 1.0)
    assert pr_auc(c) == 1.0


def test_no_positives_rejected():
    with pytest.raises(InvalidInput):
        pr_curve([(0.3, 0), (0.7, 0)])


def test_auc_examples():
    # two points: (recall 1, precision 0.5) and (recall 0.5, precision 1)
    c = PRCurve((PRPoint(0.0, 0.5, 1.0), PRPoint(0.5, 1.0, 0.5)), 4, 2)
    assert pr_auc(c) == pytest.approx(0.5 * 1.0 + 0.5 * 0.75)
    assert pr_auc(PRCurve((), 2, 1)) == 0.0


scored_sets = st.lists(
    st.tuples(st.one_of(st.floats(0, 1), st.sampled_from(default_thresholds())), st.integers(0, 1)),
    min_size=1, max_size=20,
).filter(lambda s: any(y for _, y in s))


@settings(max_examples=300, deadline=None)
@given(scored_sets)
def test_pr_curve_equals_brute_force(scored):
    grid = default_thresholds()
    c = pr_curve(scored, grid)
    ref, undefined = brute_force(scored, grid)
    assert [(p.threshold, p.precision, p.recall) for p in c.points] == ref
    assert list(c.undefined) == undefined


@settings(max_examples=100, deadline=None)
@given(scored_sets)
def test_recall_non_increasing(scored):
    rec = [p.recall for p in pr_curve(scored).points]
    assert all(a >= b for a, b in zip(rec, rec[1:]))


def test_pearson_examples():
    assert pearson([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert pearson([1, 2, 3, 4], [-1, -2, -3, -4]) == pytest.approx(-1.0)
    oracle = 11 / math.sqrt(130)  # sxy / sqrt(sxx * syy) worked out by hand
    assert abs(pearson([1, 2, 3, 4], [2, 4, 5, 9]) - oracle) < 1e-12
    with pytest.raises(UndefinedCorrelation):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelation):
        pearson([1, 2], [1, 2])


def test_correlation_of_log():
    log = TrainingLog()
    for i, j in [(0.1, 0.0), (0.4, 0.3), (0.5, 0.6), (0.9, 0.8)]:
        log.append(i, j, 0.0, 10)
    assert correlation(log) == pytest.approx(np.corrcoef(log.intrinsic_return, log.gt_return_train)[0, 1])


@pytest.fixture(scope="module")
def dataset():
    cfg = EnvConfig()
    return generate_dataset(cfg, cfg.goals(), 500, seed=0)


def test_dataset_balanced_and_round_trips(dataset, tmp_path):
    assert len(dataset) == 500 and sum(e.label for e in dataset) == 250
    path = tmp_path / "d.jsonl"
    write_dataset(dataset, path)
    assert read_dataset(path) == dataset
    write_dataset(read_dataset(path), tmp_path / "e.jsonl")
    assert path.read_bytes() == (tmp_path / "e.jsonl").read_bytes()


def test_dataset_labels_match_oracle(dataset):
    env = GoalGridEnv(EnvConfig())
    assert all(len(e.observation) == 52 for e in dataset)
    assert {e.goal for e in dataset} <= {g.goal_id for g in env.config.goals()}


def test_read_dataset_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"goal": "find-red-cup", "label": 1, "probability": 0.5}\n{"goal": oops}\n')
    with pytest.raises(DatasetError) as info:
        read_dataset(p)
    assert info.value.line == 2
    p.write_text('{"goal": "find-red-cup", "label": 3, "probability": 0.5}\n')
    with pytest.raises(DatasetError):
        read_dataset(p)


def test_scoring(dataset):
    model = build_reward_model(default_config())
    a = score_dataset(dataset, model)
    assert a == score_dataset(dataset, model)
    with pytest.raises(InvalidInput):
        score_dataset([], model)
    pos = [p for p, y in a if y]
    neg = [p for p, y in a if not y]
    assert min(pos) > max(neg)


def test_singleton_candidate_probability():
    cfg = default_config(env={"colors": ["red"], "types": ["cup", "book"], "seed": 0},
                         reward={"negatives": 1, "seed": 0})
    model = build_reward_model(cfg)
    from vlmreward.reward import goal_probability
    v = model.provider.embed_image(generate_dataset(cfg.env, cfg.goals(), 2, 0)[0].observation)
    assert goal_probability(v, model.text_embedding("find-red-cup"), [], 0.07) == 1.0
    ex = LabeledExample("find-red-cup", 1, probability=1.0)
    assert score_dataset([ex], model) == [(1.0, 1)]


def fidelity_models(cfg):
    return lambda f: build_reward_model(cfg.replace(embedding={"fidelity": f}))


@pytest.mark.parametrize("seed", range(3))
def test_fidelity_ordering(seed):
    cfg = default_config().with_seed(seed)
    data = generate_dataset(cfg.env, cfg.goals(), 1000, seed)
    low, high = compare_fidelities([0.2, 0.9], data, fidelity_models(cfg))
    assert pr_auc(high) > pr_auc(low)


def test_repeated_fidelity_identical(dataset):
    a, b = compare_fidelities([0.5, 0.5], dataset, fidelity_models(default_config()))
    assert a == b
    (one,) = compare_fidelities([1.0, 1.0], dataset, fidelity_models(default_config()))[:1]
    assert abs(pr_auc(one) - 1.0) <= 1e-6


def test_prompt_compare(dataset):
    cfg = default_config(embedding={"fidelity": 0.8, "seed": 0, "template_alignment": {"A": 1.0, "B": 0.3}})
    rows = prompt_compare(["A", "B", "C", "D"], cfg, dataset)
    assert [r.template_id for r in rows] == ["A", "B", "C", "D"]
    assert rows[0].auc > rows[1].auc
    same = prompt_compare(["C", "C"], cfg, dataset)
    assert same[0] == same[1]
    with pytest.raises(InvalidInput):
        prompt_compare(["A"], cfg, dataset)


def test_csv_and_svg_outputs(tmp_path):
    c = pr_curve(EXAMPLE)
    write_pr_csv(c, tmp_path / "pr.csv")
    lines = (tmp_path / "pr.csv").read_text().splitlines()
    assert lines[0] == "beta,precision,recall" and "0.5,0.5,0.5" in lines
    pytest.importorskip("matplotlib")
    plot_pr_curves([c], ["x"], tmp_path / "a.svg")
    plot_pr_curves([c], ["x"], tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_trajectory_records_replay(tmp_path):
    cfg = default_config(embedding={"fidelity": 0.9, "seed": 0})
    model = build_reward_model(cfg)
    res = run_training(cfg.env, AgentConfig(iterations=2, batch_size=5, eval_episodes=2, final_eval_episodes=2),
                       cfg.goals(), vlm_reward_fn(model), keep_trajectories=True)
    path = tmp_path / "t.jsonl"
    n = records.write_trajectories(res.trajectories, path)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(records.TRANSITION_KEYS) <= set(first)
    logged = records.read_transitions(path)
    assert len(logged) == n
    env = GoalGridEnv(cfg.env, terminate_on_success=False)
    goals = {g.goal_id: g for g in cfg.goals()}
    fresh = vlm_reward_fn(build_reward_model(cfg))
    assert records.replay_rewards(logged, env, goals, fresh) == [(t.intrinsic_p, t.intrinsic_r) for t in logged]
    tampered = [records.Transition(**{**t.__dict__, "action": "noop" if t.action != "noop" else "up"})
                if i == 0 else t for i, t in enumerate(logged)]
    with pytest.raises(InvalidState):
        records.replay_rewards(tampered, env, goals, fresh)
