"""Deterministic demo fixtures: a small task set plus a mock script that
covers every request the pipeline, evaluation, and tree search can make.

Branch profiles cycle through four conversation shapes per instance: a short
correct consensus, a longer correct consensus, a wrong consensus, and a
disagreement that runs to the turn limit. All content is seeded word salad,
so distinct branches stay far apart in edit distance and never merge by
accident.
"""
from __future__ import annotations

import random
from pathlib import Path
from typing import Optional, Sequence

from .backend import MockScript, ScriptEntry, dump_mock_script
from .jsonio import derive_seed, write_jsonl
from .pipeline import stage_plan
from .types import RunConfig, TaskInstance

_VOCAB = (
    "amber birch basalt cedar delta ember fjord garnet harbor indigo juniper "
    "krypton lagoon marble nickel onyx prairie quartz russet saffron timber "
    "umber violet walnut xenon yonder zephyr anchor bramble cobalt drizzle "
    "ferrous glacier hollow iris juncture kernel lantern meadow nectar orchid"
).split()

# Conversation profiles: (declare_from_turn, words_per_turn, kind)
_PROFILES = {
    0: (2, 5, "correct"),
    1: (3, 8, "correct"),
    2: (4, 6, "wrong"),
    3: (2, 7, "disagree"),
}


def demo_dataset(n_instances: int = 3) -> list[TaskInstance]:
    instances = []
    for i in range(n_instances):
        label = f"{_VOCAB[(2 * i) % len(_VOCAB)]} {_VOCAB[(2 * i + 7) % len(_VOCAB)]} {i}"
        instances.append(
            TaskInstance(
                id=f"q{i:03d}",
                question=f"Which codename did expedition {i} register?",
                agent_contexts=(
                    ("Alice", f"Registry fragment A for expedition {i}."),
                    ("Bob", f"Registry fragment B for expedition {i}."),
                ),
                label=label,
                metric="token_f1",
                setting="info_exchange",
            )
        )
    return instances


def demo_config(**overrides) -> RunConfig:
    base = dict(
        variant="isft_dpo",
        n_samples=4,
        max_turns=6,
        max_iterations=2,
        seed=20240817,
    )
    base.update(overrides)
    return RunConfig(**base)


def _branch_profiles(
    instance_index: int, config: RunConfig, eval_samples: int
) -> list[tuple[str, int]]:
    branches: list[tuple[str, int]] = []
    for slot, kind in enumerate(stage_plan(config.variant, config.max_iterations)):
        if kind == "init":
            for j in range(config.n_samples):
                branches.append((f"init.s{j}", (instance_index + j) % 4))
        elif kind == "sft":
            for j in range(config.n_samples):
                branches.append((f"sft{slot}.s{j}", (instance_index + j + slot) % 4))
        else:
            for e in range(config.mcts_iterations):
                for k in range(config.mcts_branch):
                    branches.append(
                        (f"dpo{slot}.e{e}.b{k}", (instance_index + e + k + slot) % 4)
                    )
    for j in range(eval_samples):
        branches.append((f"eval.s{j}", (instance_index + j) % 4))
    return branches


def build_demo_script(
    dataset: Sequence[TaskInstance],
    config: RunConfig,
    eval_samples: int = 8,
    name: str = "demo_script",
) -> MockScript:
    """Enumerate every key any stage may request and script its completion."""
    entries: dict[tuple[str, str, int, str], ScriptEntry] = {}
    for i, instance in enumerate(dataset):
        names = instance.agent_names
        for branch, profile in _branch_profiles(i, config, eval_samples):
            declare_from, words, kind = _PROFILES[profile]
            for t in range(config.max_turns):
                agent = names[t % len(names)]
                rng = random.Random(derive_seed(902, instance.id, branch, t))
                salad = " ".join(
                    rng.choice(_VOCAB) for _ in range(words + (t % 2))
                )
                content = f"{salad}."
                if t >= declare_from:
                    if kind == "correct":
                        answer = instance.label
                    elif kind == "wrong":
                        answer = f"offtrack detour x{i}p{profile}"
                    else:  # disagree: the two agents never converge
                        answer = (
                            instance.label
                            if t % len(names) == 0
                            else f"counter claim y{i}"
                        )
                    content = f"{content} <A>{answer}</A>"
                entries[(instance.id, agent, t, branch)] = ScriptEntry(
                    content=content,
                    token_count=len(content.split()),
                    lm_loss=0.4 + ((i + profile + t) % 5) * 0.15,
                )
    return MockScript(name, entries)


def write_demo_fixtures(
    out_dir: Path | str,
    config: Optional[RunConfig] = None,
    n_instances: int = 3,
    eval_samples: int = 8,
) -> tuple[Path, Path, RunConfig]:
    """Write tasks.jsonl and mock_script.jsonl; returns their paths + config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config or demo_config()
    dataset = demo_dataset(n_instances)
    tasks_path = out_dir / "tasks.jsonl"
    write_jsonl(tasks_path, [i.to_json_dict() for i in dataset])
    script = build_demo_script(dataset, config, eval_samples=eval_samples, name="mock_script")
    script_path = out_dir / "mock_script.jsonl"
    dump_mock_script(script, script_path)
    return tasks_path, script_path, config
