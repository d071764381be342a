"""Supervised data generation: sample N conversations per instance, keep the
best one per instance, then keep the top fraction of instances.

The initialization stage draws a formatting instruction per conversation from
a pool so that early data explores many exchange formats; the iterated stage
runs the current model with no pool. Selection is identical in both:
per-instance argmax by combined reward, a strict task-score threshold, then
the global ceil(top_frac * m) cut.
"""
from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

from .backend import Gateway
from .dialogue import agent_specs_for, run_conversation
from .exceptions import DatasetError
from .jsonio import derive_seed, iter_jsonl, write_jsonl
from .rewards import Scored, best_of_batch, rank_select, reward_batch
from .types import (
    FormatPrompt,
    ModelRef,
    RewardBreakdown,
    RunConfig,
    TaskInstance,
    Trajectory,
)

log = logging.getLogger(__name__)

SFT_DATASET_NAME = "sft.jsonl"
TRAJECTORIES_NAME = "trajectories.jsonl"


@dataclass(frozen=True, slots=True)
class SftRecord:
    """One selected conversation, ready for supervised fine-tuning."""

    instance_id: str
    messages: tuple[tuple[str, str], ...]
    reward: RewardBreakdown

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "messages": [{"agent": agent, "content": content} for agent, content in self.messages],
            "reward": self.reward.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "SftRecord":
        return cls(
            instance_id=str(raw["instance_id"]),
            messages=tuple((str(m["agent"]), str(m["content"])) for m in raw["messages"]),
            reward=RewardBreakdown.from_json_dict(raw["reward"]),
        )


def load_format_pool(path: Path | str) -> list[FormatPrompt]:
    pool: list[FormatPrompt] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(iter_jsonl(path), start=1):
        try:
            prompt = FormatPrompt(id=str(raw["id"]), text=str(raw["text"]))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad format prompt: {exc}") from exc
        if prompt.id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate format prompt id {prompt.id!r}")
        seen.add(prompt.id)
        pool.append(prompt)
    if not pool:
        raise DatasetError(f"{path}: empty format pool")
    return pool


def default_format_pool() -> list[FormatPrompt]:
    with resources.as_file(
        resources.files("optima").joinpath("data/format_pool.jsonl")
    ) as path:
        return load_format_pool(path)


def choose_format_prompt(
    pool: Sequence[FormatPrompt], config: RunConfig, instance_id: str, sample: int
) -> FormatPrompt:
    """Uniform draw, seeded per (run seed, instance, sample index)."""
    rng = random.Random(derive_seed(config.seed, "format", instance_id, sample))
    return pool[rng.randrange(len(pool))]


def select_sft_records(
    batches: Sequence[tuple[TaskInstance, Sequence[Scored]]],
    theta: float,
    top_frac: float,
) -> list[SftRecord]:
    """Shared selection math for both supervised stages.

    `batches` holds, per instance, the scored non-error trajectories in sample
    order. Instances with empty batches are dropped (every sample failed).
    """
    best_per_instance: list[Scored] = []
    for instance, scored in batches:
        if not scored:
            log.warning("instance %s: every sample failed; skipped", instance.id)
            continue
        best_per_instance.append(best_of_batch(scored))
    selected = rank_select(best_per_instance, theta, top_frac)
    records = [
        SftRecord(
            instance_id=trajectory.instance_id,
            messages=tuple((turn.agent, turn.content) for turn in trajectory.turns),
            reward=reward,
        )
        for trajectory, reward in selected
    ]
    records.sort(key=lambda r: r.instance_id)
    return records


def _sample_instance(
    instance: TaskInstance,
    model: ModelRef,
    base: ModelRef,
    config: RunConfig,
    gateway: Gateway,
    pool: Optional[Sequence[FormatPrompt]],
    branch_prefix: str,
    templates_dir: Path | None,
) -> list[Trajectory]:
    agents = agent_specs_for(instance, templates_dir)
    out = []
    for j in range(config.n_samples):
        format_prompt = (
            choose_format_prompt(pool, config, instance.id, j) if pool else None
        )
        out.append(
            run_conversation(
                instance,
                agents,
                model,
                gateway=gateway,
                seed=derive_seed(config.seed, branch_prefix, instance.id, j),
                max_turns=config.max_turns,
                config=config,
                base=base,
                format_prompt=format_prompt,
                prefix=(),
                branch_key=f"{branch_prefix}.s{j}",
            )
        )
    return out


def _run_stage(
    dataset: Sequence[TaskInstance],
    pool: Optional[Sequence[FormatPrompt]],
    model: ModelRef,
    base: ModelRef,
    config: RunConfig,
    gateway: Gateway,
    out_dir: Path,
    theta: float,
    branch_prefix: str,
    templates_dir: Path | None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(instance: TaskInstance) -> list[Trajectory]:
        return _sample_instance(
            instance, model, base, config, gateway, pool, branch_prefix, templates_dir
        )

    # Instances are independent; results come back in dataset order either way.
    with ThreadPoolExecutor(max_workers=config.max_inflight) as pool_exec:
        sampled = list(pool_exec.map(job, dataset))

    write_jsonl(
        out_dir / TRAJECTORIES_NAME,
        [t.to_json_dict() for group in sampled for t in group],
    )

    batches: list[tuple[TaskInstance, list[Scored]]] = []
    for instance, trajectories in zip(dataset, sampled):
        usable = [t for t in trajectories if t.terminated_by != "backend_error"]
        dropped = len(trajectories) - len(usable)
        if dropped:
            log.warning("instance %s: %d backend-error samples excluded", instance.id, dropped)
        if not usable:
            batches.append((instance, []))
            continue
        rewards = reward_batch(usable, instance, base, config, gateway)
        batches.append((instance, list(zip(usable, rewards))))

    records = select_sft_records(batches, theta, config.top_frac_sft)
    if not records:
        log.warning("stage %s: selection is empty", branch_prefix)
    path = out_dir / SFT_DATASET_NAME
    write_jsonl(path, [r.to_json_dict() for r in records])
    return path


def run_init_stage(
    dataset: Sequence[TaskInstance],
    pool: Optional[Sequence[FormatPrompt]],
    base: ModelRef,
    config: RunConfig,
    *,
    gateway: Gateway,
    out_dir: Path,
    templates_dir: Path | None = None,
    branch_prefix: str = "init",
) -> Path:
    """Initialization: sample from the base model with pooled format prompts.

    Pass pool=None for task families that skip formatting instructions
    (numeric reasoning). Returns the sft.jsonl path.
    """
    return _run_stage(
        dataset,
        pool,
        base,
        base,
        config,
        gateway,
        out_dir,
        config.theta_init,
        branch_prefix,
        templates_dir,
    )


def run_isft_stage(
    dataset: Sequence[TaskInstance],
    model: ModelRef,
    base: ModelRef,
    config: RunConfig,
    *,
    gateway: Gateway,
    out_dir: Path,
    templates_dir: Path | None = None,
    branch_prefix: str = "sft",
) -> Path:
    """Iterated supervised stage: current model, no pool, fixed threshold."""
    return _run_stage(
        dataset,
        None,
        model,
        base,
        config,
        gateway,
        out_dir,
        config.theta_sft,
        branch_prefix,
        templates_dir,
    )


def read_sft_dataset(path: Path | str) -> list[SftRecord]:
    return [SftRecord.from_json_dict(raw) for raw in iter_jsonl(path)]
