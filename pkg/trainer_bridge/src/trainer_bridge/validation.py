"""Schema checks for the run loop's exported training datasets.

The bridge trusts nothing it is handed: every line of an sft.jsonl or
dpo.jsonl file is parsed and checked field by field before a training job
may start, and the first offending line is reported with its line number
and field name. Validation never reinterprets the data; whatever passes is
forwarded to the trainer exactly as exported.

Record shapes, mirrored from the exporter:

    sft  {"instance_id": str, "messages": [{"agent", "content"}, ...],
          "reward": {"r_task", "r_token", "r_loss", "combined"}}
    dpo  {"instance_id": str, "prompt_turns": [{"agent", "content"}, ...],
          "chosen": str, "rejected": str,
          "reward_chosen": float, "reward_rejected": float}
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import BridgeError

DATASET_KINDS = ("sft", "dpo")

# reward histogram bins; everything outside the range lands in the two
# open-ended edge buckets
HIST_LO = -2.0
HIST_HI = 3.0
HIST_STEP = 0.5

_SFT_FIELDS = frozenset({"instance_id", "messages", "reward"})
_DPO_FIELDS = frozenset(
    {"instance_id", "prompt_turns", "chosen", "rejected", "reward_chosen", "reward_rejected"}
)
_TURN_FIELDS = frozenset({"agent", "content"})
_REWARD_FIELDS = frozenset({"r_task", "r_token", "r_loss", "combined"})


@dataclass(frozen=True)
class DatasetStats:
    """What a clean dataset looks like from the outside."""

    kind: str
    records: int
    total_tokens: int
    reward_histogram: dict[str, int]


def _fail(path: Path, lineno: int, field: str, message: str) -> None:
    raise BridgeError(f"{path}:{lineno}: field {field!r}: {message}")


def _string(row: dict, key: str, path: Path, lineno: int, nonempty: bool = True) -> str:
    value = row.get(key)
    if not isinstance(value, str):
        _fail(path, lineno, key, "missing or not a string")
    if nonempty and not value.strip():
        _fail(path, lineno, key, "must be a nonempty string")
    return value


def _number(row: dict, key: str, path: Path, lineno: int) -> float:
    value = row.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, lineno, key, "missing or not a number")
    if not math.isfinite(value):
        _fail(path, lineno, key, "must be finite")
    return float(value)


def _reject_extras(row: dict, allowed: frozenset, path: Path, lineno: int) -> None:
    for key in sorted(set(row) - allowed):
        _fail(path, lineno, key, "unexpected field")


def _turns(row: dict, key: str, path: Path, lineno: int, nonempty: bool) -> int:
    """Check a message list and return its whitespace token total."""
    value = row.get(key)
    if not isinstance(value, list):
        _fail(path, lineno, key, "missing or not a list")
    if nonempty and not value:
        _fail(path, lineno, key, "must be a nonempty list")
    tokens = 0
    for i, message in enumerate(value):
        slot = f"{key}[{i}]"
        if not isinstance(message, dict):
            _fail(path, lineno, slot, "must be an object")
        _reject_extras(message, _TURN_FIELDS, path, lineno)
        _string(message, "agent", path, lineno)
        content = message.get("content")
        if not isinstance(content, str):
            _fail(path, lineno, f"{slot}.content", "missing or not a string")
        tokens += len(content.split())
    return tokens


def _check_sft(row: dict, path: Path, lineno: int) -> tuple[int, float]:
    _reject_extras(row, _SFT_FIELDS, path, lineno)
    _string(row, "instance_id", path, lineno)
    tokens = _turns(row, "messages", path, lineno, nonempty=True)
    reward = row.get("reward")
    if not isinstance(reward, dict):
        _fail(path, lineno, "reward", "missing or not an object")
    _reject_extras(reward, _REWARD_FIELDS, path, lineno)
    r_task = _number(reward, "r_task", path, lineno)
    r_token = _number(reward, "r_token", path, lineno)
    r_loss = _number(reward, "r_loss", path, lineno)
    combined = _number(reward, "combined", path, lineno)
    if not 0.0 <= r_task <= 1.0:
        _fail(path, lineno, "r_task", f"must be within [0, 1], got {r_task}")
    if not 0.0 <= r_token <= 1.0:
        _fail(path, lineno, "r_token", f"must be within [0, 1], got {r_token}")
    if r_loss < 0.0:
        _fail(path, lineno, "r_loss", f"must be >= 0, got {r_loss}")
    return tokens, combined


def _check_dpo(row: dict, path: Path, lineno: int) -> tuple[int, float]:
    _reject_extras(row, _DPO_FIELDS, path, lineno)
    _string(row, "instance_id", path, lineno)
    tokens = _turns(row, "prompt_turns", path, lineno, nonempty=False)
    chosen = _string(row, "chosen", path, lineno)
    rejected = _string(row, "rejected", path, lineno)
    if chosen == rejected:
        _fail(path, lineno, "rejected", "must differ from the chosen response")
    tokens += len(chosen.split()) + len(rejected.split())
    reward_chosen = _number(row, "reward_chosen", path, lineno)
    reward_rejected = _number(row, "reward_rejected", path, lineno)
    # the exporter guarantees a strictly positive margin; re-assert it here
    if reward_chosen - reward_rejected <= 0.0:
        _fail(
            path,
            lineno,
            "reward_chosen",
            f"must exceed reward_rejected ({reward_chosen} <= {reward_rejected})",
        )
    return tokens, reward_chosen


def _bucket(value: float) -> str:
    if value < HIST_LO:
        return f"<{HIST_LO:g}"
    if value >= HIST_HI:
        return f">={HIST_HI:g}"
    left = HIST_LO + HIST_STEP * math.floor((value - HIST_LO) / HIST_STEP)
    return f"[{left:g},{left + HIST_STEP:g})"


def validate_dataset(path: Path | str, kind: str) -> DatasetStats:
    """Parse every record of a dataset file against its kind's schema.

    Returns record count, whitespace token totals, and a histogram over the
    record-level reward (combined for sft, the chosen side for dpo).
    """
    if kind not in DATASET_KINDS:
        raise BridgeError(f"unknown dataset kind {kind!r}")
    path = Path(path)
    if not path.exists():
        raise BridgeError(f"{path}: no such dataset")
    check: Any = _check_sft if kind == "sft" else _check_dpo

    records = 0
    total_tokens = 0
    histogram: Counter[str] = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BridgeError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(row, dict):
                raise BridgeError(f"{path}:{lineno}: record must be a JSON object")
            tokens, reward = check(row, path, lineno)
            records += 1
            total_tokens += tokens
            histogram[_bucket(reward)] += 1
    if records == 0:
        raise BridgeError(f"{path}: empty dataset")
    return DatasetStats(
        kind=kind,
        records=records,
        total_tokens=total_tokens,
        reward_histogram=dict(sorted(histogram.items())),
    )
