"""Shared builders: well-formed dataset records and job manifests shaped
exactly like what the run loop exports."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional, Sequence

_AGENTS = ("Alice", "Bob")


def sft_record(
    instance_id: str = "q000",
    contents: Sequence[str] = ("one two three", "four five"),
    r_task: float = 1.0,
    r_token: float = 0.5,
    r_loss: float = 2.0,
    combined: float = 1.2,
) -> dict[str, Any]:
    return {
        "instance_id": instance_id,
        "messages": [
            {"agent": _AGENTS[i % 2], "content": text}
            for i, text in enumerate(contents)
        ],
        "reward": {
            "r_task": r_task,
            "r_token": r_token,
            "r_loss": r_loss,
            "combined": combined,
        },
    }


def dpo_record(
    instance_id: str = "q000",
    prompt: Sequence[str] = ("opening move",),
    chosen: str = "go left now",
    rejected: str = "go right",
    reward_chosen: float = 2.0,
    reward_rejected: float = 0.5,
) -> dict[str, Any]:
    return {
        "instance_id": instance_id,
        "prompt_turns": [
            {"agent": _AGENTS[i % 2], "content": text}
            for i, text in enumerate(prompt)
        ],
        "chosen": chosen,
        "rejected": rejected,
        "reward_chosen": reward_chosen,
        "reward_rejected": reward_rejected,
    }


def write_records(path: Path, rows: Sequence[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def manifest_dict(
    kind: str = "sft",
    dataset: str = "sft.jsonl",
    version: int = 0,
    start_from: str = "previous_iterate",
    hyperparams: Optional[dict] = None,
) -> dict[str, Any]:
    base: dict[str, Any] = {
        "name": "base",
        "endpoint": "mock:test",
        "version": version,
    }
    if version > 0:
        base["parent_version"] = version - 1
    return {
        "kind": kind,
        "dataset": dataset,
        "base_model": base,
        "start_from": start_from,
        "hyperparams": {} if hyperparams is None else hyperparams,
    }


def write_manifest(path: Path, raw: dict) -> Path:
    path.write_text(json.dumps(raw, sort_keys=True) + "\n", encoding="utf-8")
    return path
