"""Task metrics and the combined reward.

The combined scalar for a trajectory is

    combined = r_task - lambda_token * r_token + lambda_loss / max(r_loss, eps)

where r_token is the trajectory's token count divided by the largest count in
its sampling batch (so the longest trajectory always scores exactly 1.0) and
r_loss is the worst per-turn mean negative log-likelihood under the frozen
base model, in nats.
"""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from fractions import Fraction
from typing import Optional, Sequence

from .backend import Gateway, Message, ROLE_PARTNER, ScriptKey
from .exceptions import BackendError
from .types import RewardBreakdown, RunConfig, TaskInstance, Trajectory

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def token_f1(prediction: str, label: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    label_tokens = normalize_answer(label).split()
    if not pred_tokens and not label_tokens:
        return 1.0
    if not pred_tokens or not label_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(label_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(label_tokens)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction: str, label: str) -> float:
    return 1.0 if normalize_answer(prediction) == normalize_answer(label) else 0.0


def _parse_number(text: str) -> Optional[Fraction]:
    cleaned = text.strip().strip("$").replace(",", "").strip()
    if not cleaned:
        return None
    try:
        return Fraction(cleaned)
    except (ValueError, ZeroDivisionError):
        pass
    try:
        return Fraction(float(cleaned))
    except (ValueError, OverflowError):
        return None


def numeric_equiv(prediction: str, label: str) -> float:
    """1.0 when both parse as numbers and agree to 1e-9 relative, else 0.0.

    Decimals and fractions are interchangeable ("0.50" matches "1/2"); an
    unparseable side scores 0.0, never a silent fallback to string equality.
    """
    a = _parse_number(prediction)
    b = _parse_number(label)
    if a is None or b is None:
        return 0.0
    if a == b:
        return 1.0
    fa, fb = float(a), float(b)
    return 1.0 if abs(fa - fb) <= 1e-9 * max(1.0, abs(fa), abs(fb)) else 0.0


_METRIC_FNS = {
    "token_f1": token_f1,
    "exact_match": exact_match,
    "numeric_equiv": numeric_equiv,
}


def score_answer(answer: Optional[str], instance: TaskInstance) -> float:
    if answer is None:
        return 0.0
    return _METRIC_FNS[instance.metric](answer, instance.label)


def task_score(trajectory: Trajectory, instance: TaskInstance) -> float:
    """Metric value of the trajectory's extracted answer; no answer scores 0."""
    return score_answer(trajectory.extracted_answer, instance)


def combined_reward(r_task: float, r_token: float, r_loss: float, config: RunConfig) -> float:
    return r_task - config.lambda_token * r_token + config.lambda_loss / max(
        r_loss, config.eps_loss
    )


def recompute_combined(breakdown: RewardBreakdown, config: RunConfig) -> float:
    return combined_reward(breakdown.r_task, breakdown.r_token, breakdown.r_loss, config)


def trajectory_loss(
    trajectory: Trajectory,
    base,
    config: RunConfig,
    gateway: Optional[Gateway] = None,
) -> float:
    """Worst per-turn base-model loss; turns scored at generation time are
    reused, anything else is scored through the gateway."""
    if not trajectory.turns:
        raise ValueError(f"trajectory for {trajectory.instance_id} has no turns")
    worst = 0.0
    prefix: list[Message] = []
    for turn in trajectory.turns:
        loss = turn.lm_loss
        if loss is None:
            if config.lambda_loss == 0.0:
                loss = 0.0
            elif gateway is None:
                raise BackendError(
                    f"turn {turn.index} of {trajectory.instance_id} has no cached "
                    "loss and no gateway was given"
                )
            else:
                loss = gateway.score_turn_loss(base, prefix, turn.content)
        worst = max(worst, loss)
        prefix.append(Message(ROLE_PARTNER, turn.content))
    return worst


def reward_batch(
    trajectories: Sequence[Trajectory],
    instance: TaskInstance,
    base,
    config: RunConfig,
    gateway: Optional[Gateway] = None,
) -> list[RewardBreakdown]:
    """Score a batch of trajectories sampled for one instance.

    The token component is batch-relative, so the same trajectory can earn a
    different reward inside a different batch; callers must not mix batches.
    """
    if not trajectories:
        raise ValueError("reward_batch needs at least one trajectory")
    for trajectory in trajectories:
        if trajectory.instance_id != instance.id:
            raise ValueError(
                f"trajectory for {trajectory.instance_id!r} scored against "
                f"instance {instance.id!r}"
            )
    max_tokens = max(t.total_tokens for t in trajectories)
    if max_tokens <= 0:
        raise ValueError("zero max token count in batch")
    out = []
    for trajectory in trajectories:
        r_task = task_score(trajectory, instance)
        r_token = trajectory.total_tokens / max_tokens
        r_loss = trajectory_loss(trajectory, base, config, gateway)
        out.append(
            RewardBreakdown(
                r_task=r_task,
                r_token=r_token,
                r_loss=r_loss,
                combined=combined_reward(r_task, r_token, r_loss, config),
            )
        )
    return out


Scored = tuple[Trajectory, RewardBreakdown]


def _order_key(position: int, trajectory: Trajectory, reward: RewardBreakdown):
    # Ties resolve toward fewer tokens, then original input order.
    return (-reward.combined, trajectory.total_tokens, position)


def best_of_batch(scored: Sequence[Scored]) -> Scored:
    if not scored:
        raise ValueError("empty batch")
    best_pos = min(
        range(len(scored)), key=lambda i: _order_key(i, scored[i][0], scored[i][1])
    )
    return scored[best_pos]


def rank_select(scored: Sequence[Scored], theta: float, top_frac: float) -> list[Scored]:
    """Keep entries with r_task strictly above theta, then the top
    ceil(top_frac * m) of the survivors by combined reward."""
    survivors = [
        (i, trajectory, reward)
        for i, (trajectory, reward) in enumerate(scored)
        if reward.r_task > theta
    ]
    survivors.sort(key=lambda e: _order_key(e[0], e[1], e[2]))
    keep = math.ceil(top_frac * len(survivors))
    return [(trajectory, reward) for _, trajectory, reward in survivors[:keep]]
