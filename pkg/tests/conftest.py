"""Shared helpers for the test suite: tiny task instances and a fluent
builder for scripted mock conversations."""
from __future__ import annotations

from typing import Optional

from optima.backend import MockBackend, MockScript, ScriptEntry
from optima.types import TaskInstance


def make_instance(
    instance_id: str = "t0",
    label: str = "blue lagoon",
    metric: str = "token_f1",
    setting: str = "info_exchange",
    agents: tuple[tuple[str, str], ...] = (
        ("Alice", "clue half one"),
        ("Bob", "clue half two"),
    ),
    question: str = "What is the codename?",
) -> TaskInstance:
    return TaskInstance(
        id=instance_id,
        question=question,
        agent_contexts=agents,
        label=label,
        metric=metric,
        setting=setting,
    )


class ScriptBuilder:
    """Accumulates scripted turns keyed by (instance, agent, turn, branch)."""

    def __init__(self, name: str = "test_script"):
        self.name = name
        self.entries: dict[tuple[str, str, int, str], ScriptEntry] = {}

    def turn(
        self,
        instance_id: str,
        agent: str,
        index: int,
        branch: str,
        content: str,
        token_count: Optional[int] = None,
        lm_loss: Optional[float] = 1.0,
    ) -> "ScriptBuilder":
        tokens = token_count if token_count is not None else len(content.split())
        self.entries[(instance_id, agent, index, branch)] = ScriptEntry(
            content=content, token_count=tokens, lm_loss=lm_loss
        )
        return self

    def conversation(
        self,
        instance: TaskInstance,
        branch: str,
        contents: list[str],
        lm_loss: Optional[float] = 1.0,
    ) -> "ScriptBuilder":
        """Script one alternating conversation, agent order from the instance."""
        names = instance.agent_names
        for t, content in enumerate(contents):
            self.turn(instance.id, names[t % len(names)], t, branch, content, lm_loss=lm_loss)
        return self

    def script(self) -> MockScript:
        return MockScript(self.name, dict(self.entries))

    def backend(self) -> MockBackend:
        return MockBackend(self.script())
