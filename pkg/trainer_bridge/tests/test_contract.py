"""End-to-end handshake against a real run: the bridge must accept every
manifest and dataset the loop exports, link result versions correctly, and
refuse a corrupted preference record by line number.

The run is provisioned through the loop's own command line in a subprocess;
nothing here imports the loop package.
"""
import json
import shutil
import subprocess
import sys

import pytest

from trainer_bridge import BridgeError, run_training, validate_dataset

_PROVISION = """\
import json, sys
from pathlib import Path
from optima.fixtures import demo_config, write_demo_fixtures

root = Path(sys.argv[1])
config = demo_config(
    trainer_hyperparams={"sft": {"epochs": 2}, "dpo": {"beta": 0.5, "alpha": 1}}
)
write_demo_fixtures(root, config)
(root / "config.json").write_text(json.dumps(config.to_json_dict(), indent=2))
"""


@pytest.fixture(scope="module")
def primary_run(tmp_path_factory):
    """One sealed demo run (init + sft + dpo slots) made by the loop's CLI."""
    root = tmp_path_factory.mktemp("primary")
    subprocess.run(
        [sys.executable, "-c", _PROVISION, str(root)],
        check=True,
        capture_output=True,
        text=True,
    )
    run_dir = root / "run"
    proc = subprocess.run(
        [
            sys.executable, "-m", "optima.cli", "run",
            "--config", str(root / "config.json"),
            "--dataset", str(root / "tasks.jsonl"),
            "--mock-script", str(root / "mock_script.jsonl"),
            "--run-dir", str(run_dir),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    return run_dir


def _slots(run_dir):
    return sorted(p for p in run_dir.iterdir() if p.name.startswith("iter_"))


def _copy_slot(slot_dir, dest):
    shutil.copytree(slot_dir, dest)
    (dest / "train_result.json").unlink()
    return dest


def test_every_exported_job_runs_in_stub_mode(primary_run, tmp_path):
    slots = _slots(primary_run)
    assert len(slots) == 3
    kinds = []
    for slot_dir in slots:
        workdir = _copy_slot(slot_dir, tmp_path / slot_dir.name)
        manifest = json.loads((workdir / "train_job.json").read_text())
        kinds.append(manifest["kind"])

        dataset_path = workdir / manifest["dataset"]
        stats = validate_dataset(dataset_path, manifest["kind"])
        nonblank = [l for l in dataset_path.read_text().splitlines() if l.strip()]
        assert stats.records == len(nonblank)
        assert stats.total_tokens > 0
        assert sum(stats.reward_histogram.values()) == stats.records

        result_path = run_training(
            workdir / "train_job.json", stub=True, log=lambda *_: None
        )
        new_model = json.loads(result_path.read_text())["new_model"]
        base = manifest["base_model"]
        assert new_model["parent_version"] == base["version"]
        assert new_model["version"] == base["version"] + 1
        assert new_model["name"] == base["name"]
        assert new_model["endpoint"] == base["endpoint"]
        # byte-for-byte what the loop's own adapter wrote for this slot
        assert result_path.read_bytes() == (slot_dir / "train_result.json").read_bytes()
    assert kinds == ["sft", "sft", "dpo"]


def test_console_script_forwards_hyperparams_verbatim(primary_run, tmp_path):
    dpo_slot = _slots(primary_run)[-1]
    workdir = _copy_slot(dpo_slot, tmp_path / "dpo_slot")
    manifest = json.loads((workdir / "train_job.json").read_text())
    assert manifest["hyperparams"] == {"beta": 0.5, "alpha": 1}

    exe = shutil.which("trainer-bridge")
    assert exe is not None, "console script not installed"
    proc = subprocess.run(
        [exe, str(workdir / "train_job.json"), "--stub"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    plan = next(l for l in proc.stdout.splitlines() if "trainer arguments" in l)
    assert "--hyperparam alpha=1" in plan
    assert "--hyperparam beta=0.5" in plan
    assert proc.stdout.strip().endswith("train_result.json")
    assert (workdir / "train_result.json").exists()


def test_corrupted_preference_record_is_rejected_by_line(primary_run, tmp_path):
    dpo_slot = _slots(primary_run)[-1]
    workdir = _copy_slot(dpo_slot, tmp_path / "corrupt_slot")
    dataset_path = workdir / "dpo.jsonl"
    lines = dataset_path.read_text().splitlines()
    target = len(lines) // 2  # 0-based index; reported lineno is target + 1
    row = json.loads(lines[target])
    row["reward_chosen"], row["reward_rejected"] = (
        row["reward_rejected"],
        row["reward_chosen"],
    )
    lines[target] = json.dumps(row)
    dataset_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    with pytest.raises(BridgeError) as err:
        run_training(workdir / "train_job.json", stub=True, log=lambda *_: None)
    message = str(err.value)
    assert f":{target + 1}: field 'reward_chosen'" in message
    assert "must exceed reward_rejected" in message
    assert not (workdir / "train_result.json").exists()

    exe = shutil.which("trainer-bridge")
    proc = subprocess.run(
        [exe, str(workdir / "train_job.json"), "--stub"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert f":{target + 1}:" in proc.stderr
