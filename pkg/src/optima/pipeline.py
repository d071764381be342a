"""The iteration loop: generate a dataset, train on it, repeat.

Variants share the shape [init, stage, stage, ...]: `isft` repeats supervised
stages, `idpo` repeats preference stages, `isft_dpo` alternates starting with
supervised. Slot 0 is always initialization; slots seal in order inside the
run store, so a killed run resumes exactly where it stopped.

Training itself is delegated to an external adapter through a manifest
handshake: the pipeline writes `train_job.json` into the slot directory,
launches the adapter with that path, and reads `train_result.json` back. The
built-in mock adapter performs the same handshake in-process.
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence

from .backend import Gateway
from .exceptions import TrainerError
from .jsonio import read_json, write_json
from .mcts import run_dpo_stage
from .sampling import run_init_stage, run_isft_stage
from .store import RunStore
from .types import FormatPrompt, ModelRef, RunConfig, TaskInstance

log = logging.getLogger(__name__)

JOB_MANIFEST_NAME = "train_job.json"
RESULT_MANIFEST_NAME = "train_result.json"
TRAINER_LOG_NAME = "trainer.log"

JOB_KINDS = ("sft", "dpo")
START_MODES = ("previous_iterate", "original_base")


def stage_plan(variant: str, iterations: int) -> list[str]:
    """Stage sequence for a variant: init plus `iterations` training stages."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if variant == "isft":
        tail = ["sft"] * iterations
    elif variant == "idpo":
        tail = ["dpo"] * iterations
    elif variant == "isft_dpo":
        tail = ["sft" if i % 2 == 0 else "dpo" for i in range(iterations)]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return ["init"] + tail


def start_from_policy(setting: str, stage_kind: str) -> str:
    """Weight-initialization policy per stage.

    Preference stages always continue from the previous iterate. Supervised
    stages restart from the original base for debate-style tasks and continue
    from the previous iterate otherwise.
    """
    if stage_kind == "dpo":
        return "previous_iterate"
    return "original_base" if setting == "debate" else "previous_iterate"


def dataset_setting(dataset: Sequence[TaskInstance]) -> str:
    return "debate" if all(i.setting == "debate" for i in dataset) else "info_exchange"


@dataclass(frozen=True, slots=True)
class TrainJob:
    kind: str
    dataset: Path
    base_model: ModelRef
    start_from: str
    hyperparams: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in JOB_KINDS:
            raise ValueError(f"unknown job kind {self.kind!r}")
        if self.start_from not in START_MODES:
            raise ValueError(f"unknown start_from {self.start_from!r}")

    def to_manifest_dict(self, relative_to: Path) -> dict[str, Any]:
        try:
            dataset = str(Path(self.dataset).relative_to(relative_to))
        except ValueError:
            dataset = str(self.dataset)
        return {
            "kind": self.kind,
            "dataset": dataset,
            "base_model": self.base_model.to_json_dict(),
            "start_from": self.start_from,
            "hyperparams": self.hyperparams,
        }


@dataclass(frozen=True, slots=True)
class TrainResult:
    new_model: ModelRef
    wall_seconds: float
    adapter_log: str = ""


class TrainerAdapter(Protocol):
    def launch(self, manifest_path: Path, timeout: float) -> None: ...


class MockTrainerAdapter:
    """In-process stand-in that still honors the manifest handshake."""

    def launch(self, manifest_path: Path, timeout: float) -> None:
        manifest = read_json(manifest_path)
        base = ModelRef.from_json_dict(manifest["base_model"])
        new_model = ModelRef(
            name=base.name,
            backend_endpoint=base.backend_endpoint,
            version=base.version + 1,
            parent_version=base.version,
        )
        workdir = manifest_path.parent
        write_json(workdir / RESULT_MANIFEST_NAME, {"new_model": new_model.to_json_dict()})
        with open(workdir / TRAINER_LOG_NAME, "w", encoding="utf-8") as fh:
            fh.write(
                f"mock trainer: {manifest['kind']} on {manifest['dataset']} "
                f"v{base.version} -> v{new_model.version}\n"
            )


class ProcessTrainerAdapter:
    """Launches an external trainer command with the job manifest path.

    The command is a template; "{manifest}" is substituted with the manifest
    path (appended when the placeholder is absent). The adapter must write
    train_result.json next to the manifest and exit 0.
    """

    def __init__(self, command: str | Sequence[str]):
        self.argv_template = (
            shlex.split(command) if isinstance(command, str) else list(command)
        )
        if not self.argv_template:
            raise TrainerError("empty trainer command")

    def launch(self, manifest_path: Path, timeout: float) -> None:
        # the child runs inside the slot directory, so the substituted path
        # must survive the cwd change
        manifest_path = Path(manifest_path).resolve()
        argv = [arg.replace("{manifest}", str(manifest_path)) for arg in self.argv_template]
        if "{manifest}" not in " ".join(self.argv_template):
            argv.append(str(manifest_path))
        try:
            proc = subprocess.run(
                argv,
                capture_output=True,
                text=True,
                timeout=timeout,
                cwd=manifest_path.parent,
            )
        except subprocess.TimeoutExpired as exc:
            raise TrainerError(f"trainer timed out after {timeout}s: {argv}") from exc
        except OSError as exc:
            raise TrainerError(f"trainer failed to launch: {exc}") from exc
        log_path = manifest_path.parent / TRAINER_LOG_NAME
        with open(log_path, "a", encoding="utf-8") as fh:
            if proc.stdout:
                fh.write(proc.stdout)
            if proc.stderr:
                fh.write(proc.stderr)
        if proc.returncode != 0:
            raise TrainerError(
                f"trainer exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )


def invoke_trainer(
    job: TrainJob, adapter: TrainerAdapter, workdir: Path, timeout: float = 600.0
) -> TrainResult:
    """Run one training job through the manifest handshake and validate the
    returned model's lineage."""
    workdir = Path(workdir)
    dataset = Path(job.dataset)
    if not dataset.exists():
        raise TrainerError(f"training dataset missing: {dataset}")
    if dataset.stat().st_size == 0:
        raise TrainerError(f"training dataset is empty: {dataset}")
    manifest_path = workdir / JOB_MANIFEST_NAME
    write_json(manifest_path, job.to_manifest_dict(workdir))
    result_path = workdir / RESULT_MANIFEST_NAME
    if result_path.exists():
        result_path.unlink()

    started = time.monotonic()
    adapter.launch(manifest_path, timeout)
    wall = time.monotonic() - started

    if not result_path.exists():
        raise TrainerError(f"trainer wrote no result manifest at {result_path}")
    try:
        raw = read_json(result_path)
        new_model = ModelRef.from_json_dict(raw["new_model"])
    except Exception as exc:
        raise TrainerError(f"malformed result manifest: {exc}") from exc
    if new_model.parent_version != job.base_model.version:
        raise TrainerError(
            f"result model parent_version {new_model.parent_version} does not "
            f"match base version {job.base_model.version}"
        )
    log_path = workdir / TRAINER_LOG_NAME
    adapter_log = log_path.read_text(encoding="utf-8") if log_path.exists() else ""
    return TrainResult(new_model=new_model, wall_seconds=wall, adapter_log=adapter_log)


def run_pipeline(
    dataset: Sequence[TaskInstance],
    config: RunConfig,
    store: RunStore,
    trainer: TrainerAdapter,
    *,
    gateway: Gateway,
    base_model: ModelRef,
    pool: Optional[Sequence[FormatPrompt]] = None,
    templates_dir: Path | None = None,
    until_slot: Optional[int] = None,
) -> ModelRef:
    """Run (or resume) the full loop and return the final model.

    Sealed slots are skipped wholesale; a trainer failure leaves its slot
    unsealed so the next invocation retries it. `until_slot` stops after the
    given slot (0 = initialization only).
    """
    config.validate()
    plan = stage_plan(config.variant, config.max_iterations)
    setting = dataset_setting(dataset)
    model = base_model
    with store.lock():
        for slot, kind in enumerate(plan):
            if until_slot is not None and slot > until_slot:
                break
            if store.is_sealed(slot):
                model = store.model_ref(slot)
                log.info("slot %d (%s): already sealed, skipping", slot, kind)
                continue
            slot_dir = store.slot_dir(slot, create=True)
            log.info("slot %d: running %s stage", slot, kind)
            if kind == "init":
                dataset_path = run_init_stage(
                    dataset,
                    pool,
                    base_model,
                    config,
                    gateway=gateway,
                    out_dir=slot_dir,
                    templates_dir=templates_dir,
                    branch_prefix="init",
                )
                job_kind = "sft"
            elif kind == "sft":
                dataset_path = run_isft_stage(
                    dataset,
                    model,
                    base_model,
                    config,
                    gateway=gateway,
                    out_dir=slot_dir,
                    templates_dir=templates_dir,
                    branch_prefix=f"sft{slot}",
                )
                job_kind = "sft"
            else:
                dataset_path = run_dpo_stage(
                    dataset,
                    model,
                    base_model,
                    config,
                    gateway=gateway,
                    out_dir=slot_dir,
                    templates_dir=templates_dir,
                    branch_prefix=f"dpo{slot}",
                )
                job_kind = "dpo"

            if dataset_path.stat().st_size == 0:
                log.warning(
                    "slot %d: empty dataset, training skipped, model unchanged", slot
                )
                new_model = model
            else:
                job = TrainJob(
                    kind=job_kind,
                    dataset=dataset_path,
                    base_model=model,
                    start_from=start_from_policy(setting, job_kind),
                    hyperparams=config.trainer_hyperparams.get(job_kind, {}),
                )
                result = invoke_trainer(
                    job, trainer, workdir=slot_dir, timeout=config.trainer_timeout
                )
                new_model = result.new_model
                log.info(
                    "slot %d: trained v%d -> v%d in %.1fs",
                    slot,
                    model.version,
                    new_model.version,
                    result.wall_seconds,
                )
            store.record_iteration(slot, [dataset_path], new_model, stage=kind)
            model = new_model
    return model
