import math
import random

import pytest

from conftest import make_instance
from optima.exceptions import BackendError
from optima.rewards import (
    best_of_batch,
    combined_reward,
    exact_match,
    normalize_answer,
    numeric_equiv,
    rank_select,
    reward_batch,
    score_answer,
    token_f1,
    trajectory_loss,
)
from optima.types import RewardBreakdown, RunConfig, Trajectory, Turn


# -----------------------------------------------------------------------
# answer normalization and metrics
# -----------------------------------------------------------------------


def test_normalize_answer():
    assert normalize_answer("The  Blue, Lagoon!") == "blue lagoon"
    assert normalize_answer("A cat and an owl") == "cat and owl"
    assert normalize_answer("  plain  ") == "plain"
    assert normalize_answer("") == ""


def test_token_f1_fixtures():
    assert token_f1("dragons age", "age of dragons") == pytest.approx(0.8)
    assert token_f1("blue lagoon", "blue lagoon") == 1.0
    assert token_f1("red", "blue") == 0.0
    assert token_f1("", "") == 1.0
    assert token_f1("", "blue") == 0.0
    assert token_f1("blue", "") == 0.0


def test_token_f1_counts_duplicates():
    # "b b" vs "b": overlap min(2,1)=1, precision 1/2, recall 1/1
    assert token_f1("b b", "b") == pytest.approx(2 * 0.5 * 1.0 / 1.5)


def test_exact_match_normalizes():
    assert exact_match("The Blue Lagoon.", "blue lagoon") == 1.0
    assert exact_match("blue lagoons", "blue lagoon") == 0.0


def test_numeric_equiv_fixtures():
    assert numeric_equiv("0.50", "1/2") == 1.0
    assert numeric_equiv("$1,234", "1234") == 1.0
    assert numeric_equiv("3.0000000001", "3") == 1.0  # inside relative tolerance
    assert numeric_equiv("3.1", "3") == 0.0
    assert numeric_equiv("banana", "3") == 0.0
    assert numeric_equiv("-2", "-2.0") == 1.0


def test_numeric_equiv_tolerance_scales_with_magnitude():
    # at 1e9 the relative tolerance is about 1.0
    assert numeric_equiv("1000000002", "1000000000") == 0.0
    assert numeric_equiv("1000000000.5", "1000000000.0") == 1.0


def test_score_answer_dispatch():
    f1_instance = make_instance(label="blue lagoon", metric="token_f1")
    assert score_answer("lagoon", f1_instance) == pytest.approx(2 / 3)
    assert score_answer(None, f1_instance) == 0.0
    num = make_instance(label="42", metric="numeric_equiv")
    assert score_answer("42.0", num) == 1.0
    em = make_instance(label="yes", metric="exact_match")
    assert score_answer("Yes.", em) == 1.0


# -----------------------------------------------------------------------
# combined reward
# -----------------------------------------------------------------------


def test_combined_reward_hand_values():
    config = RunConfig(lambda_token=0.6, lambda_loss=1.0)
    # 1.0 - 0.6*0.5 + 1.0/2.0
    assert combined_reward(1.0, 0.5, 2.0, config) == pytest.approx(1.2)
    flat = RunConfig(lambda_token=0.0, lambda_loss=0.0)
    assert combined_reward(0.7, 1.0, 5.0, flat) == pytest.approx(0.7)


def test_combined_reward_guards_zero_loss():
    config = RunConfig(lambda_token=0.0, lambda_loss=1.0, eps_loss=1e-6)
    assert combined_reward(0.0, 0.0, 0.0, config) == pytest.approx(1e6)


# -----------------------------------------------------------------------
# batch scoring
# -----------------------------------------------------------------------


def _trajectory(tokens_per_turn, consensus_answer=None, losses=None, instance_id="t0"):
    names = ("Alice", "Bob")
    turns = []
    for i, tokens in enumerate(tokens_per_turn):
        content = " ".join(["w"] * tokens)
        if consensus_answer is not None and i >= len(tokens_per_turn) - 2:
            content = f"{content} <A>{consensus_answer}</A>"
        loss = None if losses is None else losses[i]
        turns.append(
            Turn(index=i, agent=names[i % 2], content=content, token_count=tokens, lm_loss=loss)
        )
    return Trajectory(
        instance_id=instance_id,
        turns=tuple(turns),
        terminated_by="consensus" if consensus_answer is not None else "turn_limit",
        total_tokens=sum(tokens_per_turn),
        extracted_answer=consensus_answer,
    )


def test_reward_batch_token_normalization():
    instance = make_instance()
    config = RunConfig(lambda_token=1.0, lambda_loss=0.0)
    short = _trajectory([5, 5], "blue lagoon", losses=[0.5, 0.5])
    long = _trajectory([10, 10], "blue lagoon", losses=[0.5, 0.5])
    rewards = reward_batch([short, long], instance, None, config)
    assert rewards[1].r_token == 1.0  # longest trajectory pins the scale
    assert rewards[0].r_token == pytest.approx(0.5)
    assert rewards[0].combined > rewards[1].combined


def test_reward_batch_loss_is_max_over_turns():
    instance = make_instance()
    config = RunConfig(lambda_token=0.0, lambda_loss=1.0)
    trajectory = _trajectory([4, 4], "blue lagoon", losses=[0.25, 2.0])
    (reward,) = reward_batch([trajectory], instance, None, config)
    assert reward.r_loss == 2.0
    assert reward.combined == pytest.approx(1.0 + 1.0 / 2.0)


def test_reward_batch_rejects_foreign_trajectories():
    instance = make_instance("t0")
    other = _trajectory([3], instance_id="elsewhere")
    with pytest.raises(ValueError, match="scored against"):
        reward_batch([other], instance, None, RunConfig())


def test_reward_batch_rejects_all_empty():
    instance = make_instance()
    empty = Trajectory(
        instance_id="t0", turns=(), terminated_by="turn_limit",
        total_tokens=0, extracted_answer=None,
    )
    with pytest.raises(ValueError, match="zero max token"):
        reward_batch([empty], instance, None, RunConfig())


def test_trajectory_loss_requires_scoring_path():
    config = RunConfig(lambda_loss=1.0)
    unscored = _trajectory([3, 3])
    with pytest.raises(BackendError):
        trajectory_loss(unscored, None, config, None)
    # with the loss term disabled the value is irrelevant and defaults to zero
    assert trajectory_loss(unscored, None, RunConfig(lambda_loss=0.0), None) == 0.0


# -----------------------------------------------------------------------
# selection
# -----------------------------------------------------------------------


def _scored(combined, tokens, r_task=1.0):
    trajectory = _trajectory([tokens])
    reward = RewardBreakdown(r_task=r_task, r_token=0.0, r_loss=1.0, combined=combined)
    return (trajectory, reward)


def test_best_of_batch_prefers_reward_then_brevity_then_position():
    a, b, c = _scored(2.0, 10), _scored(3.0, 10), _scored(3.0, 4)
    assert best_of_batch([a, b, c]) is c
    # exact tie on reward and tokens: first wins
    d, e = _scored(3.0, 4), _scored(3.0, 4)
    assert best_of_batch([d, e]) is d


def test_rank_select_threshold_is_strict():
    items = [_scored(0.9, 1, r_task=0.9), _scored(0.4, 1, r_task=0.4), _scored(0.8, 1, r_task=0.8)]
    kept = rank_select(items, theta=0.5, top_frac=1.0)
    assert [s[0] for s in kept] == [items[0][0], items[2][0]]
    boundary = [_scored(1.0, 1, r_task=0.5)]
    assert rank_select(boundary, theta=0.5, top_frac=1.0) == []


def test_rank_select_top_cut_uses_ceiling():
    items = [_scored(float(i), 1) for i in range(1, 6)]  # five pass
    kept = rank_select(items, theta=0.0, top_frac=0.5)
    assert len(kept) == 3  # ceil(0.5 * 5)
    assert [s[1].combined for s in kept] == [5.0, 4.0, 3.0]


def test_rank_select_randomized_against_reference():
    rng = random.Random(5150)
    for _ in range(300):
        m = rng.randrange(1, 12)
        items = [
            _scored(rng.uniform(-1, 3), rng.randrange(1, 50), r_task=rng.random())
            for _ in range(m)
        ]
        theta = rng.uniform(0, 1)
        frac = rng.uniform(0.1, 1.0)
        kept = rank_select(items, theta=theta, top_frac=frac)

        passing = [
            (i, s) for i, s in enumerate(items) if s[1].r_task > theta
        ]
        passing.sort(key=lambda p: (-p[1][1].combined, p[1][0].total_tokens, p[0]))
        expected = [s for _, s in passing[: math.ceil(frac * len(passing))]] if passing else []
        assert kept == expected
