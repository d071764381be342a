"""Self-consistency evaluation and inference-scaling reports.

Each instance is answered n times. The voted score aggregates answers
(plurality for exact/numeric metrics, overlap-graph grouping for token F1)
and the coverage score asks whether any sample alone was right; the scaling
report tracks both, plus cumulative token cost, as n grows.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Any, Optional, Sequence

from .backend import Gateway
from .dialogue import agent_specs_for, run_conversation
from .jsonio import derive_seed, format_float, write_jsonl
from .rewards import normalize_answer, score_answer, token_f1
from .types import ModelRef, RunConfig, TaskInstance

EVAL_RECORDS_NAME = "records.jsonl"
SCALING_CSV_NAME = "scaling.csv"

# Two answers belong to the same vote group when their token F1 exceeds this.
F1_GROUP_THRESHOLD = 0.9


def majority_vote_exact(answers: Sequence[Optional[str]]) -> Optional[str]:
    """Plurality answer under normalization; ties go to the earliest class.

    Returns the raw text of the winning class's first occurrence, or None
    when no answer is present at all.
    """
    counts: dict[str, int] = {}
    first_raw: dict[str, str] = {}
    first_pos: dict[str, int] = {}
    for position, answer in enumerate(answers):
        if answer is None:
            continue
        key = normalize_answer(answer)
        counts[key] = counts.get(key, 0) + 1
        if key not in first_raw:
            first_raw[key] = answer
            first_pos[key] = position
    if not counts:
        return None
    winner = min(counts, key=lambda k: (-counts[k], first_pos[k]))
    return first_raw[winner]


def majority_vote_f1(answers: Sequence[Optional[str]], label: str) -> float:
    """Group answers by pairwise token-F1 overlap and score the biggest group.

    Groups are connected components of the graph whose edges join answer
    pairs with F1 above 0.9 (transitive closure, not cliques). Ties between
    equal-sized groups go to the higher mean intra-group F1, then to the
    group containing the earliest answer. The result is the group's mean
    token F1 against the label; no answers at all scores 0.0.
    """
    present = [(i, a) for i, a in enumerate(answers) if a is not None]
    if not present:
        return 0.0

    uniques: list[str] = []
    unique_id: dict[str, int] = {}
    for _, answer in present:
        if answer not in unique_id:
            unique_id[answer] = len(uniques)
            uniques.append(answer)

    pair_f1: dict[tuple[int, int], float] = {}
    for i in range(len(uniques)):
        for j in range(i + 1, len(uniques)):
            pair_f1[(i, j)] = token_f1(uniques[i], uniques[j])

    parent = list(range(len(uniques)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (i, j), value in pair_f1.items():
        if value > F1_GROUP_THRESHOLD:
            parent[find(i)] = find(j)

    groups: dict[int, list[tuple[int, int]]] = {}
    for position, answer in present:
        root = find(unique_id[answer])
        groups.setdefault(root, []).append((position, unique_id[answer]))

    def intra_f1(members: list[tuple[int, int]]) -> float:
        if len(members) == 1:
            return 1.0
        values = []
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                ua, ub = members[a][1], members[b][1]
                if ua == ub:
                    values.append(1.0)
                else:
                    values.append(pair_f1[(min(ua, ub), max(ua, ub))])
        return fmean(values)

    label_f1 = [token_f1(u, label) for u in uniques]
    best = min(
        groups.values(),
        key=lambda members: (-len(members), -intra_f1(members), members[0][0]),
    )
    return fmean(label_f1[uid] for _, uid in best)


@dataclass(frozen=True, slots=True)
class EvalSample:
    answer: Optional[str]
    score: float
    tokens: int
    failed: bool = False

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "answer": self.answer,
            "score": self.score,
            "tokens": self.tokens,
            "failed": self.failed,
        }


@dataclass(frozen=True, slots=True)
class EvalRecord:
    instance_id: str
    samples: tuple[EvalSample, ...]
    voted_score: float
    coverage_score: float

    def __post_init__(self) -> None:
        best = max((s.score for s in self.samples), default=0.0)
        if abs(self.coverage_score - best) > 1e-12:
            raise ValueError("coverage_score must equal the best sample score")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "samples": [s.to_json_dict() for s in self.samples],
            "voted_score": self.voted_score,
            "coverage_score": self.coverage_score,
        }


@dataclass(frozen=True, slots=True)
class ScalingReport:
    """Per-n means: voted accuracy, coverage, cumulative tokens per instance."""

    rows: tuple[tuple[int, float, float, float], ...]

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["n", "mean_voted", "mean_coverage", "mean_tokens"])
            for n, voted, coverage, tokens in self.rows:
                writer.writerow(
                    [n, format_float(voted), format_float(coverage), format_float(tokens)]
                )


def _voted_score(
    instance: TaskInstance, answers: Sequence[Optional[str]]
) -> float:
    if instance.metric == "token_f1":
        return majority_vote_f1(answers, instance.label)
    return score_answer(majority_vote_exact(answers), instance)


def evaluate(
    dataset: Sequence[TaskInstance],
    model: ModelRef,
    config: RunConfig,
    n_samples: Optional[int] = None,
    *,
    gateway: Gateway,
    templates_dir: Path | None = None,
) -> tuple[list[EvalRecord], ScalingReport]:
    """Sample n conversations per instance and build record + scaling views."""
    n = config.n_samples if n_samples is None else n_samples
    if n < 1:
        raise ValueError("n_samples must be >= 1")

    def job(instance: TaskInstance) -> list[EvalSample]:
        agents = agent_specs_for(instance, templates_dir)
        samples = []
        for j in range(n):
            trajectory = run_conversation(
                instance,
                agents,
                model,
                gateway=gateway,
                seed=derive_seed(config.seed, "eval", instance.id, j),
                max_turns=config.max_turns,
                config=config,
                branch_key=f"eval.s{j}",
            )
            failed = trajectory.terminated_by == "backend_error"
            answer = trajectory.extracted_answer
            samples.append(
                EvalSample(
                    answer=answer,
                    score=0.0 if failed else score_answer(answer, instance),
                    tokens=trajectory.total_tokens,
                    failed=failed,
                )
            )
        return samples

    with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
        per_instance = list(pool.map(job, dataset))

    records = []
    for instance, samples in zip(dataset, per_instance):
        answers = [s.answer for s in samples]
        records.append(
            EvalRecord(
                instance_id=instance.id,
                samples=tuple(samples),
                voted_score=_voted_score(instance, answers),
                coverage_score=max(s.score for s in samples),
            )
        )

    rows = []
    for prefix_n in range(1, n + 1):
        voted = fmean(
            _voted_score(instance, [s.answer for s in samples[:prefix_n]])
            for instance, samples in zip(dataset, per_instance)
        )
        coverage = fmean(
            max(s.score for s in samples[:prefix_n]) for samples in per_instance
        )
        tokens = fmean(
            float(sum(s.tokens for s in samples[:prefix_n])) for samples in per_instance
        )
        rows.append((prefix_n, voted, coverage, tokens))
    return records, ScalingReport(rows=tuple(rows))


def write_eval_outputs(
    out_dir: Path | str, records: Sequence[EvalRecord], report: ScalingReport
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / EVAL_RECORDS_NAME
    write_jsonl(records_path, [r.to_json_dict() for r in records])
    csv_path = out_dir / SCALING_CSV_NAME
    report.to_csv(csv_path)
    return records_path, csv_path
