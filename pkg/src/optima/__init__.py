"""Iterative generate, rank, select, and train loop for two-agent tasks."""

from .backend import (
    GenerationRequest,
    GenerationResult,
    HttpBackend,
    Message,
    MockBackend,
    MockScript,
    ScriptEntry,
    ScriptKey,
    build_gateway,
    dump_mock_script,
    load_mock_script,
)
from .dialogue import agent_specs_for, declared_answer, extract_answer, run_conversation
from .evaluation import (
    EvalRecord,
    EvalSample,
    ScalingReport,
    evaluate,
    majority_vote_exact,
    majority_vote_f1,
    write_eval_outputs,
)
from .exceptions import (
    BackendError,
    CapabilityError,
    ConfigError,
    DatasetError,
    MockScriptError,
    OptimaError,
    StoreError,
    TrainerError,
    TransportError,
    TreeExhausted,
)
from .jsonio import canonical_dumps, derive_seed, read_jsonl, write_jsonl
from .mcts import (
    DialogueTree,
    PreferencePair,
    TreeNode,
    extract_pairs,
    generate_tree,
    node_similarity,
    read_dpo_dataset,
    run_dpo_stage,
)
from .pipeline import (
    MockTrainerAdapter,
    ProcessTrainerAdapter,
    TrainJob,
    TrainResult,
    invoke_trainer,
    run_pipeline,
    stage_plan,
)
from .rewards import (
    RewardBreakdown,
    best_of_batch,
    combined_reward,
    exact_match,
    normalize_answer,
    numeric_equiv,
    rank_select,
    reward_batch,
    score_answer,
    token_f1,
)
from .sampling import (
    SftRecord,
    default_format_pool,
    load_format_pool,
    read_sft_dataset,
    run_init_stage,
    run_isft_stage,
    select_sft_records,
)
from .store import RunStore, open_run_store
from .types import (
    FormatPrompt,
    ModelRef,
    RunConfig,
    TaskInstance,
    Trajectory,
    Turn,
    load_task_file,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "CapabilityError",
    "ConfigError",
    "DatasetError",
    "DialogueTree",
    "EvalRecord",
    "EvalSample",
    "FormatPrompt",
    "GenerationRequest",
    "GenerationResult",
    "HttpBackend",
    "Message",
    "MockBackend",
    "MockScript",
    "MockScriptError",
    "MockTrainerAdapter",
    "ModelRef",
    "OptimaError",
    "PreferencePair",
    "ProcessTrainerAdapter",
    "RewardBreakdown",
    "RunConfig",
    "RunStore",
    "ScalingReport",
    "ScriptEntry",
    "ScriptKey",
    "SftRecord",
    "StoreError",
    "TaskInstance",
    "TrainJob",
    "TrainResult",
    "TrainerError",
    "Trajectory",
    "TransportError",
    "TreeExhausted",
    "TreeNode",
    "Turn",
    "agent_specs_for",
    "best_of_batch",
    "build_gateway",
    "canonical_dumps",
    "combined_reward",
    "declared_answer",
    "default_format_pool",
    "derive_seed",
    "dump_mock_script",
    "evaluate",
    "exact_match",
    "extract_answer",
    "extract_pairs",
    "generate_tree",
    "invoke_trainer",
    "load_format_pool",
    "load_mock_script",
    "load_task_file",
    "majority_vote_exact",
    "majority_vote_f1",
    "node_similarity",
    "normalize_answer",
    "numeric_equiv",
    "open_run_store",
    "rank_select",
    "read_dpo_dataset",
    "read_jsonl",
    "read_sft_dataset",
    "reward_batch",
    "run_conversation",
    "run_dpo_stage",
    "run_init_stage",
    "run_isft_stage",
    "run_pipeline",
    "score_answer",
    "select_sft_records",
    "stage_plan",
    "token_f1",
    "write_eval_outputs",
    "write_jsonl",
]
