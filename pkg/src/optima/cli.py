"""Command line entry point.

Subcommands:
  init    bootstrap a run directory and seal the initial sampling slot
  run     run (or resume) the full improvement loop
  eval    sample a model on a task file and write records + scaling curves
  report  summarize a run directory

Exit codes: 0 success, 2 configuration/dataset/store problems, 3 backend
problems, 4 trainer problems, 1 any other internal error.
"""
from __future__ import annotations

import argparse
import shlex
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backend import build_gateway
from .evaluation import evaluate, write_eval_outputs
from .exceptions import (
    BackendError,
    ConfigError,
    DatasetError,
    OptimaError,
    StoreError,
    TrainerError,
)
from .jsonio import read_json
from .pipeline import MockTrainerAdapter, ProcessTrainerAdapter, run_pipeline
from .sampling import default_format_pool, load_format_pool
from .store import open_run_store
from .types import ModelRef, RunConfig, load_task_file


def _add_backend_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--backend-url", help="OpenAI-compatible server base URL")
    group.add_argument(
        "--mock-script", type=Path, help="scripted completions file (JSONL)"
    )


def _add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run configuration JSON")
    parser.add_argument("--dataset", type=Path, required=True, help="task file (JSONL)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument(
        "--templates-dir", type=Path, help="directory with prompt template overrides"
    )
    parser.add_argument("--model-name", default="base", help="name for the base model")
    _add_backend_args(parser)


def _add_loop_args(parser: argparse.ArgumentParser) -> None:
    _add_common_args(parser)
    parser.add_argument("--run-dir", type=Path, required=True)
    parser.add_argument(
        "--trainer-cmd",
        help="external trainer command; receives the job manifest path",
    )
    parser.add_argument(
        "--format-pool",
        type=Path,
        help="format requirement pool (JSONL); defaults to the packaged pool",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optima", description="iterative sampling, ranking, and training loop"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="seal the initial sampling slot only")
    _add_loop_args(p_init)

    p_run = sub.add_parser("run", help="run or resume the full loop")
    _add_loop_args(p_run)

    p_eval = sub.add_parser("eval", help="evaluate a model on a task file")
    _add_common_args(p_eval)
    p_eval.add_argument(
        "--run-dir", type=Path, help="use the newest trained model from this run"
    )
    p_eval.add_argument("--n-samples", type=int, help="samples per instance")
    p_eval.add_argument(
        "--out-dir", type=Path, required=True, help="where to write records + curves"
    )

    p_report = sub.add_parser("report", help="summarize a run directory")
    p_report.add_argument("--run-dir", type=Path, required=True)
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        config = RunConfig.from_json_dict(read_json(args.config))
    else:
        config = RunConfig()
    if getattr(args, "seed", None) is not None:
        config = config.with_overrides(seed=args.seed)
    config.validate()
    return config


def _base_endpoint(args: argparse.Namespace) -> str:
    if args.backend_url is not None:
        return args.backend_url
    return f"mock:{Path(args.mock_script).stem}"


def _make_gateway(args: argparse.Namespace, config: RunConfig):
    return build_gateway(
        backend_url=args.backend_url,
        mock_script=args.mock_script,
        max_inflight=config.max_inflight,
    )


def _run_loop(args: argparse.Namespace, until_slot: Optional[int]) -> int:
    config = _load_config(args)
    dataset = load_task_file(args.dataset)
    gateway = _make_gateway(args, config)
    pool = (
        load_format_pool(args.format_pool)
        if args.format_pool is not None
        else default_format_pool()
    )
    trainer = (
        ProcessTrainerAdapter(shlex.split(args.trainer_cmd))
        if args.trainer_cmd
        else MockTrainerAdapter()
    )
    base = ModelRef(name=args.model_name, backend_endpoint=_base_endpoint(args), version=0)
    store = open_run_store(args.run_dir, config)
    model = run_pipeline(
        dataset,
        config,
        store,
        trainer,
        gateway=gateway,
        base_model=base,
        pool=pool,
        templates_dir=args.templates_dir,
        until_slot=until_slot,
    )
    print(f"sealed {store.sealed_count()} slot(s); model version {model.version}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dataset = load_task_file(args.dataset)
    gateway = _make_gateway(args, config)
    model = ModelRef(
        name=args.model_name, backend_endpoint=_base_endpoint(args), version=0
    )
    if args.run_dir is not None:
        store = open_run_store(args.run_dir, config)
        latest = store.latest_model()
        if latest is not None:
            model = latest
    records, report = evaluate(
        dataset,
        model,
        config,
        args.n_samples,
        gateway=gateway,
        templates_dir=args.templates_dir,
    )
    records_path, csv_path = write_eval_outputs(args.out_dir, records, report)
    final_n, voted, coverage, tokens = report.rows[-1]
    print(f"wrote {records_path} and {csv_path}")
    print(
        f"n={final_n} voted={voted:.4f} coverage={coverage:.4f} "
        f"tokens/instance={tokens:.1f}"
    )
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    config_path = run_dir / "config.json"
    if not config_path.is_file():
        raise StoreError(f"not a run directory: {run_dir}")
    config = RunConfig.from_json_dict(read_json(config_path))
    store = open_run_store(run_dir, config)
    count = store.sealed_count()
    print(f"run: {run_dir}")
    print(f"variant: {config.variant}  iterations: {config.max_iterations}")
    print(f"sealed slots: {count}")
    for t in range(count):
        manifest = store.read_manifest(t)
        model = manifest["model"]
        datasets = ", ".join(sorted(manifest["datasets"])) or "-"
        print(
            f"  slot {t:3d}  stage={manifest['stage'] or 'init':4s}  "
            f"model={model['name']} v{model['version']}  datasets: {datasets}"
        )
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "init":
            return _run_loop(args, until_slot=0)
        if args.command == "run":
            return _run_loop(args, until_slot=None)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_report(args)
    except (ConfigError, DatasetError, StoreError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except TrainerError as exc:
        print(f"trainer error: {exc}", file=sys.stderr)
        return 4
    except OptimaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
