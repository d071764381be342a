"""Generation gateway: one interface, two backends.

The scripted mock answers every request from an explicit fixture table and is
the backbone of all tests; the HTTP backend speaks an OpenAI-compatible wire
protocol. Callers never branch on which one they hold.

Conversation roles are agent-relative: "assistant_self" is the speaking
agent's own earlier turn, "assistant_partner" the other agent's. The HTTP
backend maps these to assistant/user on the wire.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

from .exceptions import (
    BackendError,
    CapabilityError,
    DatasetError,
    MockScriptError,
    TransportError,
)
from .jsonio import iter_jsonl
from .types import ModelRef

ROLE_SYSTEM = "system"
ROLE_SELF = "assistant_self"
ROLE_PARTNER = "assistant_partner"
ROLES = (ROLE_SYSTEM, ROLE_SELF, ROLE_PARTNER)

# One initial attempt plus this many retries, with exponential backoff.
MAX_RETRIES = 3


@dataclass(frozen=True, slots=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True, slots=True)
class ScriptKey:
    """Address of one scripted completion."""

    instance_id: str
    agent: str
    turn_index: int
    branch_key: str

    def as_tuple(self) -> tuple[str, str, int, str]:
        return (self.instance_id, self.agent, self.turn_index, self.branch_key)


@dataclass(frozen=True, slots=True)
class GenerationRequest:
    model: ModelRef
    messages: tuple[Message, ...]
    temperature: float
    seed: int
    max_tokens: int
    script_key: Optional[ScriptKey] = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be nonempty")
        if self.messages[0].role != ROLE_SYSTEM:
            raise ValueError("first message must be the system prompt")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True, slots=True)
class GenerationResult:
    content: str
    token_count: int
    finish: str  # "stop" or "length"


class Gateway(Protocol):
    def generate_turn(self, request: GenerationRequest) -> GenerationResult: ...

    def count_tokens(self, model: ModelRef, text: str) -> int: ...

    def score_turn_loss(
        self,
        base: ModelRef,
        prefix: Sequence[Message],
        turn_content: str,
        script_key: Optional[ScriptKey] = None,
    ) -> float: ...


# ---------------------------------------------------------------------------
# scripted mock


@dataclass(frozen=True, slots=True)
class ScriptEntry:
    content: str
    token_count: int
    lm_loss: Optional[float] = None


class MockScript:
    """Fixture table keyed by (instance_id, agent, turn_index, branch_key)."""

    def __init__(self, name: str, entries: dict[tuple[str, str, int, str], ScriptEntry]):
        self.name = name
        self.entries = entries

    @property
    def endpoint(self) -> str:
        return f"mock:{self.name}"

    def lookup(self, key: ScriptKey) -> ScriptEntry:
        try:
            return self.entries[key.as_tuple()]
        except KeyError:
            raise MockScriptError(
                f"script {self.name!r} has no entry for instance={key.instance_id!r} "
                f"agent={key.agent!r} turn={key.turn_index} branch={key.branch_key!r}"
            ) from None


def load_mock_script(path: Path | str) -> MockScript:
    path = Path(path)
    entries: dict[tuple[str, str, int, str], ScriptEntry] = {}
    for lineno, raw in enumerate(iter_jsonl(path), start=1):
        try:
            key = (
                str(raw["instance_id"]),
                str(raw["agent"]),
                int(raw["turn_index"]),
                str(raw["branch_key"]),
            )
            loss = raw.get("lm_loss")
            entry = ScriptEntry(
                content=str(raw["content"]),
                token_count=int(raw["token_count"]),
                lm_loss=None if loss is None else float(loss),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad script entry: {exc}") from exc
        if key in entries:
            raise DatasetError(f"{path}:{lineno}: duplicate script key {key}")
        entries[key] = entry
    return MockScript(path.stem, entries)


def dump_mock_script(script: MockScript, path: Path | str) -> None:
    from .jsonio import write_jsonl

    records = []
    for key in sorted(script.entries):
        entry = script.entries[key]
        records.append(
            {
                "instance_id": key[0],
                "agent": key[1],
                "turn_index": key[2],
                "branch_key": key[3],
                "content": entry.content,
                "token_count": entry.token_count,
                "lm_loss": entry.lm_loss,
            }
        )
    write_jsonl(path, records)


class MockBackend:
    """Deterministic gateway over a MockScript. Unknown keys are fatal."""

    def __init__(self, script: MockScript):
        self.script = script

    def generate_turn(self, request: GenerationRequest) -> GenerationResult:
        if request.script_key is None:
            raise MockScriptError("mock backend needs a script_key on every request")
        entry = self.script.lookup(request.script_key)
        return GenerationResult(
            content=entry.content, token_count=entry.token_count, finish="stop"
        )

    def count_tokens(self, model: ModelRef, text: str) -> int:
        if not text:
            raise BackendError("cannot count tokens of empty text")
        return len(text.split())

    def score_turn_loss(
        self,
        base: ModelRef,
        prefix: Sequence[Message],
        turn_content: str,
        script_key: Optional[ScriptKey] = None,
    ) -> float:
        if not turn_content:
            raise BackendError("empty completion")
        if script_key is None:
            raise MockScriptError("mock loss scoring needs a script_key")
        entry = self.script.lookup(script_key)
        if entry.content != turn_content:
            raise MockScriptError(
                f"loss request content does not match script entry for {script_key}"
            )
        if entry.lm_loss is None:
            raise MockScriptError(f"script entry for {script_key} has no lm_loss")
        return entry.lm_loss


# ---------------------------------------------------------------------------
# HTTP backend

_WIRE_ROLE = {ROLE_SYSTEM: "system", ROLE_SELF: "assistant", ROLE_PARTNER: "user"}


def render_scoring_prompt(prefix: Sequence[Message], turn_content: str) -> tuple[str, str]:
    """Concatenate prefix turns and the turn under scoring into one prompt.

    Returns (full_prompt, prefix_text); completion tokens are the ones whose
    text offset falls at or after len(prefix_text).
    """
    prefix_text = "".join(message.content + "\n" for message in prefix)
    return prefix_text + turn_content, prefix_text


class HttpBackend:
    """OpenAI-compatible chat backend with bounded retries and in-flight cap."""

    def __init__(
        self,
        base_url: str,
        max_inflight: int = 4,
        timeout: float = 60.0,
        retry_base_delay: float = 0.5,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(timeout=timeout)
        self._slots = threading.Semaphore(max_inflight)
        self._retry_base_delay = retry_base_delay

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        url = self.base_url + path
        last_error: Exception | None = None
        for attempt in range(1 + MAX_RETRIES):
            if attempt:
                time.sleep(self._retry_base_delay * 2 ** (attempt - 1))
            try:
                with self._slots:
                    response = self._client.post(url, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = BackendError(
                    f"{url} returned {response.status_code}: {response.text[:200]}"
                )
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"{url} returned {response.status_code}: {response.text[:200]}"
                )
            return response.json()
        raise TransportError(
            f"{url} still failing after {MAX_RETRIES} retries: {last_error}"
        )

    def generate_turn(self, request: GenerationRequest) -> GenerationResult:
        payload = {
            "model": request.model.name,
            "messages": [
                {"role": _WIRE_ROLE[m.role], "content": m.content}
                for m in request.messages
            ],
            "temperature": request.temperature,
            "seed": request.seed,
            "max_tokens": request.max_tokens,
        }
        data = self._post("/v1/chat/completions", payload)
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"]
            finish = choice.get("finish_reason") or "stop"
            token_count = int(data["usage"]["completion_tokens"])
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat completion response: {exc}") from exc
        return GenerationResult(
            content=content,
            token_count=token_count,
            finish="length" if finish == "length" else "stop",
        )

    def count_tokens(self, model: ModelRef, text: str) -> int:
        if not text:
            raise BackendError("cannot count tokens of empty text")
        data = self._post(
            "/v1/completions",
            {
                "model": model.name,
                "prompt": text,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
            },
        )
        try:
            return int(data["usage"]["prompt_tokens"])
        except (KeyError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc

    def score_turn_loss(
        self,
        base: ModelRef,
        prefix: Sequence[Message],
        turn_content: str,
        script_key: Optional[ScriptKey] = None,
    ) -> float:
        """Mean per-token negative log-likelihood of the turn given the prefix."""
        if not turn_content:
            raise BackendError("empty completion")
        prompt, prefix_text = render_scoring_prompt(prefix, turn_content)
        data = self._post(
            "/v1/completions",
            {
                "model": base.name,
                "prompt": prompt,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
            },
        )
        try:
            logprobs = data["choices"][0]["logprobs"]
            token_logprobs = logprobs["token_logprobs"]
            offsets = logprobs["text_offset"]
        except (KeyError, IndexError, TypeError):
            raise CapabilityError(
                f"{self.base_url} cannot score losses: echo logprobs missing"
            ) from None
        span = [
            lp
            for lp, offset in zip(token_logprobs, offsets)
            # The first echoed token has no conditional logprob; skip None.
            if offset >= len(prefix_text) and lp is not None
        ]
        if not span:
            raise BackendError("no scored tokens in the completion span")
        return -sum(span) / len(span)


def build_gateway(
    backend_url: str | None = None,
    mock_script: MockScript | Path | str | None = None,
    max_inflight: int = 4,
    retry_base_delay: float = 0.5,
) -> Gateway:
    """Pick the backend from CLI-style arguments (exactly one source)."""
    if (backend_url is None) == (mock_script is None):
        raise BackendError("exactly one of backend_url and mock_script is required")
    if backend_url is not None:
        return HttpBackend(
            backend_url, max_inflight=max_inflight, retry_base_delay=retry_base_delay
        )
    if not isinstance(mock_script, MockScript):
        mock_script = load_mock_script(mock_script)
    return MockBackend(mock_script)
