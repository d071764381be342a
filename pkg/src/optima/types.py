"""Core domain types: tasks, turns, trajectories, rewards, models, config.

Everything here is a plain dataclass with an explicit JSON mapping. The JSON
dicts, not the Python objects, are the compatibility contract: sft/dpo
datasets, trajectory dumps, and trainer manifests are all built from these.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

from .exceptions import ConfigError, DatasetError

SETTINGS = ("info_exchange", "debate")
METRICS = ("token_f1", "exact_match", "numeric_equiv")
TERMINATIONS = ("consensus", "turn_limit", "backend_error")
VARIANTS = ("isft", "idpo", "isft_dpo")

# Floor applied to the loss term denominator so a zero loss cannot divide out.
EPS_LOSS_DEFAULT = 1e-6


@dataclass(frozen=True, slots=True)
class TaskInstance:
    """One benchmark problem plus the per-agent private contexts."""

    id: str
    question: str
    agent_contexts: tuple[tuple[str, str], ...]
    label: str
    metric: str
    setting: str

    def __post_init__(self) -> None:
        if not self.id:
            raise DatasetError("instance id must be nonempty")
        if self.metric not in METRICS:
            raise DatasetError(f"instance {self.id}: unknown metric {self.metric!r}")
        if self.setting not in SETTINGS:
            raise DatasetError(f"instance {self.id}: unknown setting {self.setting!r}")
        names = [name for name, _ in self.agent_contexts]
        if len(names) < 2:
            raise DatasetError(f"instance {self.id}: need at least two agents")
        if len(set(names)) != len(names):
            raise DatasetError(f"instance {self.id}: duplicate agent names")

    @property
    def agent_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.agent_contexts)

    def context_for(self, agent: str) -> str:
        for name, context in self.agent_contexts:
            if name == agent:
                return context
        raise KeyError(agent)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "agent_contexts": [[name, ctx] for name, ctx in self.agent_contexts],
            "label": self.label,
            "metric": self.metric,
            "setting": self.setting,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "TaskInstance":
        try:
            contexts = tuple((str(n), str(c)) for n, c in raw["agent_contexts"])
            return cls(
                id=str(raw["id"]),
                question=str(raw["question"]),
                agent_contexts=contexts,
                label=str(raw["label"]),
                metric=str(raw["metric"]),
                setting=str(raw["setting"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad task record: {exc}") from exc


@dataclass(frozen=True, slots=True)
class FormatPrompt:
    """One reusable formatting instruction from the initialization pool."""

    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise DatasetError("format prompt id must be nonempty")
        if not self.text.strip():
            raise DatasetError(f"format prompt {self.id}: empty text")


@dataclass(frozen=True, slots=True)
class Turn:
    """A single utterance in a conversation."""

    index: int
    agent: str
    content: str
    token_count: int
    lm_loss: Optional[float] = None

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("turn index must be >= 0")
        if self.token_count < 0:
            raise ValueError("token_count must be >= 0")
        if self.lm_loss is not None and self.lm_loss < 0:
            raise ValueError("lm_loss must be >= 0")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "agent": self.agent,
            "content": self.content,
            "token_count": self.token_count,
            "lm_loss": self.lm_loss,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "Turn":
        loss = raw.get("lm_loss")
        return cls(
            index=int(raw["index"]),
            agent=str(raw["agent"]),
            content=str(raw["content"]),
            token_count=int(raw["token_count"]),
            lm_loss=None if loss is None else float(loss),
        )


@dataclass(frozen=True, slots=True)
class Trajectory:
    """A complete conversation for one task instance."""

    instance_id: str
    turns: tuple[Turn, ...]
    terminated_by: str
    total_tokens: int
    extracted_answer: Optional[str] = None
    format_prompt_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.terminated_by not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.terminated_by!r}")
        for i, turn in enumerate(self.turns):
            if turn.index != i:
                raise ValueError(f"turn index {turn.index} at position {i}")
        if self.total_tokens != sum(t.token_count for t in self.turns):
            raise ValueError("total_tokens does not match the turn sum")
        if (self.extracted_answer is not None) != (self.terminated_by == "consensus"):
            raise ValueError("extracted_answer must be present exactly for consensus")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "turns": [t.to_json_dict() for t in self.turns],
            "terminated_by": self.terminated_by,
            "total_tokens": self.total_tokens,
            "extracted_answer": self.extracted_answer,
            "format_prompt_id": self.format_prompt_id,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "Trajectory":
        answer = raw.get("extracted_answer")
        prompt_id = raw.get("format_prompt_id")
        return cls(
            instance_id=str(raw["instance_id"]),
            turns=tuple(Turn.from_json_dict(t) for t in raw["turns"]),
            terminated_by=str(raw["terminated_by"]),
            total_tokens=int(raw["total_tokens"]),
            extracted_answer=None if answer is None else str(answer),
            format_prompt_id=None if prompt_id is None else str(prompt_id),
        )


@dataclass(frozen=True, slots=True)
class RewardBreakdown:
    """Task, token, and loss components plus the combined scalar."""

    r_task: float
    r_token: float
    r_loss: float
    combined: float

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "r_task": self.r_task,
            "r_token": self.r_token,
            "r_loss": self.r_loss,
            "combined": self.combined,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "RewardBreakdown":
        return cls(
            r_task=float(raw["r_task"]),
            r_token=float(raw["r_token"]),
            r_loss=float(raw["r_loss"]),
            combined=float(raw["combined"]),
        )


@dataclass(frozen=True, slots=True)
class ModelRef:
    """Pointer to a model the backend can serve.

    Endpoints are either an HTTP base URL or "mock:<script-id>"; versions form
    a chain that strictly increases along parent links.
    """

    name: str
    backend_endpoint: str
    version: int
    parent_version: Optional[int] = None

    def __post_init__(self) -> None:
        if self.version < 0:
            raise ValueError("model version must be >= 0")
        if self.parent_version is not None and self.parent_version >= self.version:
            raise ValueError("parent_version must be < version")

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "endpoint": self.backend_endpoint,
            "version": self.version,
        }
        if self.parent_version is not None:
            out["parent_version"] = self.parent_version
        return out

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "ModelRef":
        parent = raw.get("parent_version")
        return cls(
            name=str(raw["name"]),
            backend_endpoint=str(raw["endpoint"]),
            version=int(raw["version"]),
            parent_version=None if parent is None else int(parent),
        )


def _default_hyperparams() -> dict[str, dict[str, Any]]:
    return {"sft": {}, "dpo": {}}


@dataclass(frozen=True, slots=True)
class RunConfig:
    """Every knob of a run; serialized verbatim into the run directory.

    Defaults follow the reference operating point: reward weights 0.6/1.0,
    selection thresholds 0.5/0.4/0.2, keep-fractions 0.7 (supervised) and
    0.5 (preference pairs), tree search 8 rounds x 3 branches over a top-10
    candidate pool, edit-similarity gates 0.25 (expansion) and 0.1 (merge).
    """

    variant: str = "isft"
    n_samples: int = 8
    max_turns: int = 8
    lambda_token: float = 0.6
    lambda_loss: float = 1.0
    theta_init: float = 0.5
    theta_sft: float = 0.5
    theta_dpo_filter: float = 0.4
    theta_dpo_diff: float = 0.2
    top_frac_sft: float = 0.7
    top_frac_dpo: float = 0.5
    mcts_iterations: int = 8
    mcts_branch: int = 3
    mcts_topk: int = 10
    edit_sim_exclude: float = 0.25
    edit_sim_merge: float = 0.1
    max_iterations: int = 6
    seed: int = 0
    eps_loss: float = EPS_LOSS_DEFAULT
    temperature: float = 1.0
    gen_max_tokens: int = 512
    max_inflight: int = 4
    trainer_timeout: float = 600.0
    trainer_hyperparams: dict[str, dict[str, Any]] = field(
        default_factory=_default_hyperparams
    )

    def validate(self) -> None:
        problems: list[str] = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_samples < 1:
            problems.append("n_samples must be >= 1")
        if self.max_turns < 2:
            problems.append("max_turns must be >= 2")
        if self.lambda_token < 0 or self.lambda_loss < 0:
            problems.append("reward weights must be >= 0")
        for name in ("theta_init", "theta_sft", "theta_dpo_filter"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                problems.append(f"{name} must be in [0, 1], got {value}")
        if self.theta_dpo_diff <= 0:
            problems.append("theta_dpo_diff must be > 0")
        for name in ("top_frac_sft", "top_frac_dpo"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                problems.append(f"{name} must be in (0, 1], got {value}")
        if self.mcts_iterations < 1 or self.mcts_branch < 1 or self.mcts_topk < 1:
            problems.append("tree search parameters must be >= 1")
        if not 0.0 <= self.edit_sim_merge < self.edit_sim_exclude <= 1.0:
            problems.append("need 0 <= edit_sim_merge < edit_sim_exclude <= 1")
        if self.max_iterations < 0:
            problems.append("max_iterations must be >= 0")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must fit in 64 bits")
        if self.eps_loss <= 0:
            problems.append("eps_loss must be > 0")
        if self.temperature < 0:
            problems.append("temperature must be >= 0")
        if self.gen_max_tokens < 1:
            problems.append("gen_max_tokens must be >= 1")
        if self.max_inflight < 1:
            problems.append("max_inflight must be >= 1")
        if self.trainer_timeout <= 0:
            problems.append("trainer_timeout must be > 0")
        if sorted(self.trainer_hyperparams) not in ([], ["dpo", "sft"], ["sft"], ["dpo"]):
            problems.append("trainer_hyperparams keys must be a subset of {sft, dpo}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "n_samples": self.n_samples,
            "max_turns": self.max_turns,
            "lambda_token": self.lambda_token,
            "lambda_loss": self.lambda_loss,
            "theta_init": self.theta_init,
            "theta_sft": self.theta_sft,
            "theta_dpo_filter": self.theta_dpo_filter,
            "theta_dpo_diff": self.theta_dpo_diff,
            "top_frac_sft": self.top_frac_sft,
            "top_frac_dpo": self.top_frac_dpo,
            "mcts_iterations": self.mcts_iterations,
            "mcts_branch": self.mcts_branch,
            "mcts_topk": self.mcts_topk,
            "edit_sim_exclude": self.edit_sim_exclude,
            "edit_sim_merge": self.edit_sim_merge,
            "max_iterations": self.max_iterations,
            "seed": self.seed,
            "eps_loss": self.eps_loss,
            "temperature": self.temperature,
            "gen_max_tokens": self.gen_max_tokens,
            "max_inflight": self.max_inflight,
            "trainer_timeout": self.trainer_timeout,
            "trainer_hyperparams": self.trainer_hyperparams,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        known = {
            "variant": str,
            "n_samples": int,
            "max_turns": int,
            "lambda_token": float,
            "lambda_loss": float,
            "theta_init": float,
            "theta_sft": float,
            "theta_dpo_filter": float,
            "theta_dpo_diff": float,
            "top_frac_sft": float,
            "top_frac_dpo": float,
            "mcts_iterations": int,
            "mcts_branch": int,
            "mcts_topk": int,
            "edit_sim_exclude": float,
            "edit_sim_merge": float,
            "max_iterations": int,
            "seed": int,
            "eps_loss": float,
            "temperature": float,
            "gen_max_tokens": int,
            "max_inflight": int,
            "trainer_timeout": float,
            "trainer_hyperparams": dict,
        }
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            caster = known[key]
            try:
                kwargs[key] = caster(value) if caster is not dict else dict(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
        config = cls(**kwargs)
        config.validate()
        return config

    def with_overrides(self, **kwargs: Any) -> "RunConfig":
        config = replace(self, **kwargs)
        config.validate()
        return config


def load_task_file(path: Any) -> list[TaskInstance]:
    """Read a task JSONL file, rejecting duplicate ids."""
    from .jsonio import iter_jsonl

    instances: list[TaskInstance] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(iter_jsonl(path), start=1):
        try:
            instance = TaskInstance.from_json_dict(raw)
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        if instance.id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate instance id {instance.id!r}")
        seen.add(instance.id)
        instances.append(instance)
    if not instances:
        raise DatasetError(f"{path}: no task instances")
    return instances
