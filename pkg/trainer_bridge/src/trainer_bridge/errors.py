"""Failure types for the bridge."""


class BridgeError(Exception):
    """Bad manifest, bad dataset, or any other refusal to start training."""


class ToolchainError(BridgeError):
    """The external training command failed after validation passed."""
