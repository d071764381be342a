"""Job manifests, loss selection, and the training launch.

The run loop hands over a train_job.json manifest; the bridge validates it
and the dataset it points at, then either stubs the training step (writing
a version-bumped train_result.json so the loop can continue) or launches an
external fine-tuning command with the validated inputs. Hyperparameters
from the manifest are forwarded verbatim; the bridge computes no losses and
never reselects data.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import BridgeError, ToolchainError
from .validation import DatasetStats, validate_dataset

JOB_KINDS = ("sft", "dpo")
START_MODES = ("previous_iterate", "original_base")
LOSS_KINDS = ("sft_nll", "dpo", "rpo")
RESULT_NAME = "train_result.json"

_MANIFEST_FIELDS = frozenset({"kind", "dataset", "base_model", "start_from", "hyperparams"})
_MODEL_FIELDS = frozenset({"name", "endpoint", "version", "parent_version"})


@dataclass(frozen=True)
class ModelInfo:
    """The model reference format used on both sides of the handshake."""

    name: str
    backend_endpoint: str
    version: int
    parent_version: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.name:
            raise BridgeError("model name must be nonempty")
        if self.version < 0:
            raise BridgeError("model version must be >= 0")
        if self.parent_version is not None and self.parent_version >= self.version:
            raise BridgeError(
                f"model version {self.version} must exceed its parent "
                f"{self.parent_version}"
            )

    @classmethod
    def from_json_dict(cls, raw: Any) -> "ModelInfo":
        if not isinstance(raw, dict):
            raise BridgeError("model reference must be an object")
        unexpected = sorted(set(raw) - _MODEL_FIELDS)
        if unexpected:
            raise BridgeError(f"model reference has unexpected field {unexpected[0]!r}")
        for key in ("name", "endpoint"):
            if not isinstance(raw.get(key), str):
                raise BridgeError(f"model reference field {key!r} missing or not a string")
        version = raw.get("version")
        if isinstance(version, bool) or not isinstance(version, int):
            raise BridgeError("model reference field 'version' missing or not an integer")
        parent = raw.get("parent_version")
        if parent is not None and (isinstance(parent, bool) or not isinstance(parent, int)):
            raise BridgeError("model reference field 'parent_version' must be an integer")
        return cls(
            name=raw["name"],
            backend_endpoint=raw["endpoint"],
            version=version,
            parent_version=parent,
        )

    def to_json_dict(self) -> dict[str, Any]:
        # parent_version is omitted when absent, matching the loop's writer
        out: dict[str, Any] = {
            "name": self.name,
            "endpoint": self.backend_endpoint,
            "version": self.version,
        }
        if self.parent_version is not None:
            out["parent_version"] = self.parent_version
        return out


@dataclass(frozen=True)
class AdapterManifest:
    """One training job as described by the run loop's train_job.json."""

    kind: str
    dataset: str
    base_model: ModelInfo
    start_from: str
    hyperparams: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in JOB_KINDS:
            raise BridgeError(f"unknown job kind {self.kind!r}")
        if not self.dataset:
            raise BridgeError("dataset path must be nonempty")
        if self.start_from not in START_MODES:
            raise BridgeError(f"unknown start_from {self.start_from!r}")

    @classmethod
    def from_json_dict(cls, raw: Any) -> "AdapterManifest":
        if not isinstance(raw, dict):
            raise BridgeError("manifest must be a JSON object")
        unexpected = sorted(set(raw) - _MANIFEST_FIELDS)
        if unexpected:
            raise BridgeError(f"manifest has unexpected field {unexpected[0]!r}")
        missing = sorted(_MANIFEST_FIELDS - set(raw))
        if missing:
            raise BridgeError(f"manifest is missing field {missing[0]!r}")
        if not isinstance(raw["kind"], str) or not isinstance(raw["dataset"], str):
            raise BridgeError("manifest fields 'kind' and 'dataset' must be strings")
        if not isinstance(raw["start_from"], str):
            raise BridgeError("manifest field 'start_from' must be a string")
        hyperparams = raw["hyperparams"]
        if not isinstance(hyperparams, dict) or not all(
            isinstance(k, str) for k in hyperparams
        ):
            raise BridgeError("manifest field 'hyperparams' must be a string-keyed object")
        return cls(
            kind=raw["kind"],
            dataset=raw["dataset"],
            base_model=ModelInfo.from_json_dict(raw["base_model"]),
            start_from=raw["start_from"],
            hyperparams=dict(hyperparams),
        )


def load_manifest(path: Path | str) -> AdapterManifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise BridgeError(f"{path}: cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BridgeError(f"{path}: manifest is not valid JSON: {exc}") from exc
    try:
        return AdapterManifest.from_json_dict(raw)
    except BridgeError as exc:
        raise BridgeError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class LossSpec:
    """Which objective the external trainer should optimize.

    sft_nll is plain next-token likelihood on the selected conversations;
    dpo is the paired-preference objective with strength beta; rpo adds a
    likelihood term on the chosen response, weighted by alpha.
    """

    kind: str
    beta: float = 0.1
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise BridgeError(f"unknown loss kind {self.kind!r}")
        if self.beta < 0 or self.alpha < 0:
            raise BridgeError("loss beta and alpha must be >= 0")
        if self.kind == "rpo" and self.alpha <= 0:
            raise BridgeError("rpo loss requires alpha > 0")


def default_loss(job_kind: str) -> LossSpec:
    if job_kind == "sft":
        return LossSpec(kind="sft_nll")
    return LossSpec(kind="dpo")


def launch_arguments(
    manifest: AdapterManifest, loss: LossSpec, dataset_path: Path
) -> list[str]:
    """Flags handed to the external trainer; hyperparams pass through as-is."""
    arguments = [
        "--job", manifest.kind,
        "--loss", loss.kind,
        "--dataset", str(dataset_path),
        "--base-endpoint", manifest.base_model.backend_endpoint,
        "--base-version", str(manifest.base_model.version),
        "--start-from", manifest.start_from,
    ]
    if loss.kind in ("dpo", "rpo"):
        arguments += ["--beta", f"{loss.beta:g}"]
    if loss.kind == "rpo":
        arguments += ["--alpha", f"{loss.alpha:g}"]
    for key in sorted(manifest.hyperparams):
        value = manifest.hyperparams[key]
        rendered = value if isinstance(value, str) else json.dumps(value)
        arguments += ["--hyperparam", f"{key}={rendered}"]
    return arguments


def _write_result(path: Path, model: ModelInfo) -> None:
    text = json.dumps(
        {"new_model": model.to_json_dict()}, sort_keys=True, separators=(",", ":")
    )
    path.write_text(text + "\n", encoding="utf-8")


def _read_result_model(path: Path) -> ModelInfo:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return ModelInfo.from_json_dict(raw["new_model"])
    except (OSError, json.JSONDecodeError, KeyError, BridgeError) as exc:
        raise ToolchainError(f"{path}: malformed result manifest: {exc}") from exc


def run_training(
    manifest_path: Path | str,
    *,
    stub: bool = False,
    loss: Optional[LossSpec] = None,
    toolchain: Optional[str] = None,
    timeout: float = 3600.0,
    log=print,
) -> Path:
    """Validate a job end to end, then stub or launch it.

    Returns the path of the result manifest the caller should read. In stub
    mode the bridge writes the result itself after validation; in live mode
    the configured toolchain command must write it and exit 0.
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    dataset_path = Path(manifest.dataset)
    if not dataset_path.is_absolute():
        dataset_path = manifest_path.parent / dataset_path
    stats = validate_dataset(dataset_path, manifest.kind)

    spec = default_loss(manifest.kind) if loss is None else loss
    if (manifest.kind == "sft") != (spec.kind == "sft_nll"):
        raise BridgeError(f"loss {spec.kind!r} cannot train a {manifest.kind!r} job")

    arguments = launch_arguments(manifest, spec, dataset_path)
    result_path = manifest_path.parent / RESULT_NAME
    if result_path.exists():
        result_path.unlink()  # never let the loop read a stale result

    base = manifest.base_model
    log(
        f"{manifest.kind} job: {stats.records} records, "
        f"{stats.total_tokens} tokens, base v{base.version}"
    )
    log("trainer arguments: " + " ".join(shlex.quote(a) for a in arguments))

    if stub:
        new_model = ModelInfo(
            name=base.name,
            backend_endpoint=base.backend_endpoint,
            version=base.version + 1,
            parent_version=base.version,
        )
        _write_result(result_path, new_model)
        log(f"stub result: v{base.version} -> v{new_model.version}")
        return result_path

    if toolchain is None:
        raise BridgeError(
            "live mode needs a toolchain command; pass --toolchain or use --stub"
        )
    argv = shlex.split(toolchain) + arguments
    try:
        proc = subprocess.run(
            argv,
            capture_output=True,
            text=True,
            timeout=timeout,
            cwd=manifest_path.parent,
        )
    except subprocess.TimeoutExpired as exc:
        raise ToolchainError(f"toolchain timed out after {timeout}s") from exc
    except OSError as exc:
        raise ToolchainError(f"toolchain failed to launch: {exc}") from exc
    if proc.stdout:
        log(proc.stdout.rstrip("\n"))
    if proc.stderr:
        print(proc.stderr.rstrip("\n"), file=sys.stderr)
    if proc.returncode != 0:
        raise ToolchainError(f"toolchain exited {proc.returncode}")
    if not result_path.exists():
        raise ToolchainError(f"toolchain wrote no result manifest at {result_path}")
    new_model = _read_result_model(result_path)
    if new_model.parent_version != base.version:
        raise ToolchainError(
            f"result model parent_version {new_model.parent_version} does not "
            f"match base version {base.version}"
        )
    return result_path
