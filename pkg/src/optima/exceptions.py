"""Error taxonomy.

Every failure the orchestrator raises on purpose derives from OptimaError so
callers (and the CLI exit-code mapping) can tell deliberate signals from bugs.
"""
from __future__ import annotations


class OptimaError(Exception):
    """Base class for all deliberate failures."""


class ConfigError(OptimaError):
    """Invalid or inconsistent run configuration."""


class DatasetError(OptimaError):
    """A task, pool, or dataset file violates its schema."""


class StoreError(OptimaError):
    """Run-directory misuse: config mismatch, iteration gap, double lock."""


class BackendError(OptimaError):
    """Generation backend failure that is not a transport problem."""


class TransportError(BackendError):
    """Endpoint unreachable or still failing after the retry budget."""


class CapabilityError(BackendError):
    """Backend cannot serve a required feature (e.g. echo logprobs)."""


class MockScriptError(BackendError):
    """Scripted backend asked for a key the script does not define.

    Always fatal: a missing key means a broken fixture, never a condition to
    paper over with a fallback completion.
    """


class TreeExhausted(OptimaError):
    """No node in the dialogue tree is eligible for another expansion."""


class TrainerError(OptimaError):
    """Trainer adapter failed, timed out, or returned an invalid manifest."""
