"""On-disk run directory: config snapshot plus sealed, append-only iterations.

Layout:

    run/
      config.json          frozen copy of the RunConfig
      iter_000/            slot 0 (the initialization stage)
        sft.jsonl
        trajectories.jsonl
        model.manifest     seal: dataset digests + resulting model ref
      iter_001/            slot 1 (first training iteration)
      ...

A slot is complete exactly when its model.manifest exists. Slots seal in
order with no gaps, so "resume" is simply "skip every sealed slot".
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

from .exceptions import StoreError
from .jsonio import canonical_dumps, read_json, sha256_file, write_json
from .types import ModelRef, RunConfig

CONFIG_NAME = "config.json"
MANIFEST_NAME = "model.manifest"
LOCK_NAME = ".lock"


class RunStore:
    def __init__(self, root: Path, config: RunConfig):
        self.root = root
        self.config = config

    # -- layout ------------------------------------------------------------

    def slot_dir(self, t: int, create: bool = False) -> Path:
        if t < 0:
            raise StoreError(f"slot index must be >= 0, got {t}")
        path = self.root / f"iter_{t:03d}"
        if create:
            path.mkdir(parents=True, exist_ok=True)
        return path

    def manifest_path(self, t: int) -> Path:
        return self.slot_dir(t) / MANIFEST_NAME

    def is_sealed(self, t: int) -> bool:
        return self.manifest_path(t).exists()

    def sealed_count(self) -> int:
        count = 0
        while self.is_sealed(count):
            count += 1
        return count

    # -- sealing -----------------------------------------------------------

    def record_iteration(
        self,
        t: int,
        datasets: Sequence[Path | str],
        model: ModelRef,
        stage: str | None = None,
    ) -> dict:
        """Seal slot t with dataset digests and the slot's resulting model.

        Idempotent: re-recording an identical slot is a no-op; a conflicting
        re-record or a gap in the sequence is an error.
        """
        if t > 0 and not self.is_sealed(t - 1):
            raise StoreError(f"iteration gap: slot {t - 1} is not sealed")
        digests = {}
        for dataset in datasets:
            dataset = Path(dataset)
            if not dataset.exists():
                raise StoreError(f"dataset missing: {dataset}")
            digests[dataset.name] = sha256_file(dataset)
        manifest = {
            "iteration": t,
            "stage": stage,
            "datasets": digests,
            "model": model.to_json_dict(),
        }
        path = self.manifest_path(t)
        if path.exists():
            existing = read_json(path)
            if canonical_dumps(existing) == canonical_dumps(manifest):
                return existing
            raise StoreError(f"slot {t} already sealed with different contents")
        self.slot_dir(t, create=True)
        write_json(path, manifest)
        return manifest

    def read_manifest(self, t: int) -> dict:
        if not self.is_sealed(t):
            raise StoreError(f"slot {t} is not sealed")
        return read_json(self.manifest_path(t))

    def model_ref(self, t: int) -> ModelRef:
        return ModelRef.from_json_dict(self.read_manifest(t)["model"])

    def latest_model(self) -> ModelRef | None:
        count = self.sealed_count()
        if count == 0:
            return None
        return self.model_ref(count - 1)

    # -- exclusivity -------------------------------------------------------

    @contextmanager
    def lock(self) -> Iterator[None]:
        """Hold the run directory exclusively; a second holder errors out."""
        path = self.root / LOCK_NAME
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreError(f"run directory is locked: {path}") from None
        try:
            os.write(fd, f"{os.getpid()}\n".encode("ascii"))
            os.close(fd)
            yield
        finally:
            try:
                path.unlink()
            except FileNotFoundError:
                pass


def open_run_store(root: Path | str, config: RunConfig) -> RunStore:
    """Create or reopen a run directory for this exact config.

    Reopening with a config whose canonical serialization differs from the
    stored one fails: a run directory binds to one configuration for life.
    """
    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    config_path = root / CONFIG_NAME
    rendered = canonical_dumps(config.to_json_dict()) + "\n"
    if config_path.exists():
        existing = config_path.read_text(encoding="utf-8")
        if existing != rendered:
            raise StoreError(f"config mismatch: {config_path} differs from the given config")
    else:
        config_path.write_text(rendered, encoding="utf-8")
    return RunStore(root, config)
