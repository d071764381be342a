"""Multi-agent conversation runner.

Agents alternate in a fixed order. After every turn the runner re-extracts
each agent's latest declared answer; the moment all agents' latest answers
agree under normalization the conversation ends with consensus. Otherwise it
stops at the turn limit with no extracted answer.

Format prompts live only in system messages, so persisted turns can never
contain pool text. A continuation prefix (tree search) is preserved verbatim
at the front of the returned trajectory.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .backend import (
    Gateway,
    GenerationRequest,
    Message,
    ROLE_PARTNER,
    ROLE_SELF,
    ROLE_SYSTEM,
    ScriptKey,
)
from .exceptions import TransportError
from .jsonio import derive_seed
from .rewards import normalize_answer
from .types import FormatPrompt, ModelRef, RunConfig, TaskInstance, Trajectory, Turn

_ANSWER_TAG = re.compile(r"<A>(.*?)</A>", re.DOTALL)


@dataclass(frozen=True, slots=True)
class AgentSpec:
    name: str
    system_prompt_template: str
    order: int


@dataclass
class ConversationState:
    """Mutable in-flight view of one conversation."""

    instance: TaskInstance
    turns: list[Turn] = field(default_factory=list)
    pending_agent: str = ""
    answers_declared: dict[str, str] = field(default_factory=dict)
    last_declared: Optional[str] = None


def extract_answer(content: str) -> Optional[str]:
    """Last <A>...</A> span, stripped; None when no tag closes."""
    matches = list(_ANSWER_TAG.finditer(content))
    if not matches:
        return None
    return matches[-1].group(1).strip()


def extract_boxed(content: str) -> Optional[str]:
    """Last \\boxed{...} span with balanced braces, stripped."""
    marker = "\\boxed{"
    best: Optional[str] = None
    start = content.find(marker)
    while start != -1:
        depth = 1
        i = start + len(marker)
        while i < len(content) and depth:
            if content[i] == "{":
                depth += 1
            elif content[i] == "}":
                depth -= 1
            i += 1
        if depth == 0:
            best = content[start + len(marker) : i - 1].strip()
        start = content.find(marker, start + 1)
    return best


def declared_answer(content: str, metric: str) -> Optional[str]:
    """The answer this turn declares, if any.

    Numeric tasks accept boxed spans as well; when both forms appear the one
    occurring later in the message wins.
    """
    tag_matches = list(_ANSWER_TAG.finditer(content))
    tagged = tag_matches[-1].group(1).strip() if tag_matches else None
    if metric != "numeric_equiv":
        return tagged
    boxed = extract_boxed(content)
    if boxed is None:
        return tagged
    if tagged is None:
        return boxed
    boxed_pos = content.rfind("\\boxed{")
    return boxed if boxed_pos > tag_matches[-1].start() else tagged


# ---------------------------------------------------------------------------
# prompts

_TEMPLATE_FILES = {
    ("info_exchange", "any"): "info_exchange.txt",
    ("debate", "solver"): "debate_solver.txt",
    ("debate", "critic"): "debate_critic.txt",
}


def _load_template(name: str, templates_dir: Path | None) -> str:
    if templates_dir is not None:
        return (Path(templates_dir) / name).read_text(encoding="utf-8")
    return (
        resources.files("optima").joinpath(f"data/templates/{name}").read_text("utf-8")
    )


def agent_specs_for(
    instance: TaskInstance, templates_dir: Path | None = None
) -> tuple[AgentSpec, ...]:
    """Build the agent roster for an instance from its declared agents.

    Information exchange gives both agents the same template; debate casts the
    first agent as solver and the rest as critics.
    """
    specs = []
    for order, name in enumerate(instance.agent_names):
        if instance.setting == "info_exchange":
            filename = _TEMPLATE_FILES[("info_exchange", "any")]
        else:
            role = "solver" if order == 0 else "critic"
            filename = _TEMPLATE_FILES[("debate", role)]
        specs.append(
            AgentSpec(
                name=name,
                system_prompt_template=_load_template(filename, templates_dir),
                order=order,
            )
        )
    return tuple(specs)


def render_system_prompt(
    spec: AgentSpec,
    instance: TaskInstance,
    format_prompt: Optional[FormatPrompt] = None,
) -> str:
    partners = [n for n in instance.agent_names if n != spec.name]
    rendered = spec.system_prompt_template.format_map(
        {
            "name": spec.name,
            "partner": " and ".join(partners),
            "question": instance.question,
            "information": instance.context_for(spec.name),
        }
    )
    if format_prompt is not None:
        rendered = rendered.rstrip("\n") + "\n\n" + format_prompt.text
    return rendered


# ---------------------------------------------------------------------------
# the runner


def _validate_agents(agents: Sequence[AgentSpec], instance: TaskInstance) -> tuple[AgentSpec, ...]:
    if len(agents) < 2:
        raise ValueError("need at least two agents")
    if sorted(a.order for a in agents) != list(range(len(agents))):
        raise ValueError("agent orders must be a permutation of 0..A-1")
    ordered = tuple(sorted(agents, key=lambda a: a.order))
    known = set(instance.agent_names)
    for agent in ordered:
        if agent.name not in known:
            raise ValueError(f"agent {agent.name!r} not declared by instance {instance.id}")
    return ordered


def _validate_prefix(prefix: Sequence[Turn], ordered: tuple[AgentSpec, ...]) -> None:
    for i, turn in enumerate(prefix):
        if turn.index != i:
            raise ValueError(f"prefix turn {i} carries index {turn.index}")
        expected = ordered[i % len(ordered)].name
        if turn.agent != expected:
            raise ValueError(
                f"prefix turn {i} spoken by {turn.agent!r}, expected {expected!r}"
            )


def _consensus(state: ConversationState, agents: tuple[AgentSpec, ...]) -> bool:
    if len(state.answers_declared) < len(agents):
        return False
    normalized = {normalize_answer(a) for a in state.answers_declared.values()}
    return len(normalized) == 1


def _absorb(state: ConversationState, turn: Turn, metric: str) -> None:
    answer = declared_answer(turn.content, metric)
    if answer is not None:
        state.answers_declared[turn.agent] = answer
        state.last_declared = answer


def run_conversation(
    instance: TaskInstance,
    agents: Sequence[AgentSpec],
    model: ModelRef,
    *,
    gateway: Gateway,
    seed: int,
    max_turns: int = 8,
    config: Optional[RunConfig] = None,
    base: Optional[ModelRef] = None,
    format_prompt: Optional[FormatPrompt] = None,
    prefix: Sequence[Turn] = (),
    branch_key: str = "0",
) -> Trajectory:
    """Run (or continue) one conversation and return the finished trajectory.

    When `base` is given every generated turn is loss-scored against it right
    away, because the scripted-backend lookup needs the same key that
    produced the turn. A transport failure ends the trajectory with
    terminated_by="backend_error"; such trajectories are kept for diagnostics
    but carry no extracted answer.
    """
    config = config or RunConfig()
    ordered = _validate_agents(agents, instance)
    _validate_prefix(prefix, ordered)
    if len(prefix) >= max_turns:
        raise ValueError("prefix already at or beyond max_turns")

    state = ConversationState(instance=instance)
    state.turns.extend(prefix)
    for turn in prefix:
        _absorb(state, turn, instance.metric)

    def finish(terminated_by: str, answer: Optional[str]) -> Trajectory:
        return Trajectory(
            instance_id=instance.id,
            turns=tuple(state.turns),
            terminated_by=terminated_by,
            total_tokens=sum(t.token_count for t in state.turns),
            extracted_answer=answer,
            format_prompt_id=format_prompt.id if format_prompt else None,
        )

    # A prefix can already carry agreeing declarations; honor the boundary
    # check before generating anything new.
    if prefix and _consensus(state, ordered):
        return finish("consensus", state.last_declared)

    for t in range(len(prefix), max_turns):
        speaker = ordered[t % len(ordered)]
        state.pending_agent = speaker.name
        messages = [
            Message(ROLE_SYSTEM, render_system_prompt(speaker, instance, format_prompt))
        ]
        for turn in state.turns:
            role = ROLE_SELF if turn.agent == speaker.name else ROLE_PARTNER
            messages.append(Message(role, turn.content))
        request = GenerationRequest(
            model=model,
            messages=tuple(messages),
            temperature=config.temperature,
            seed=derive_seed(seed, "turn", t),
            max_tokens=config.gen_max_tokens,
            script_key=ScriptKey(instance.id, speaker.name, t, branch_key),
        )
        try:
            result = gateway.generate_turn(request)
            lm_loss = None
            if base is not None:
                lm_loss = gateway.score_turn_loss(
                    base,
                    [Message(ROLE_PARTNER, turn.content) for turn in state.turns],
                    result.content,
                    script_key=request.script_key,
                )
        except TransportError:
            return finish("backend_error", None)
        state.turns.append(
            Turn(
                index=t,
                agent=speaker.name,
                content=result.content,
                token_count=result.token_count,
                lm_loss=lm_loss,
            )
        )
        _absorb(state, state.turns[-1], instance.metric)
        if _consensus(state, ordered):
            return finish("consensus", state.last_declared)

    return finish("turn_limit", None)
