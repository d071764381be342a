"""Tree search over conversations for preference-pair generation.

Each round: pick one promising non-terminal node (softmax over estimated
rewards of the top candidates), branch K fresh continuations from it, attach
the new turns as child chains, and refresh rewards. The token component of
every trajectory reward is normalized against the longest trajectory seen in
the tree so far, so all terminal rewards are recomputed after every round.

Candidate filtering keeps the tree diverse: nodes too close (normalized edit
distance below `edit_sim_exclude`) to anything already expanded are skipped,
and near-identical sibling turns (distance below `edit_sim_merge`) collapse
into one node whose subtrees merge.
"""
from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Callable, Optional, Sequence

from .backend import Gateway
from .dialogue import agent_specs_for, run_conversation
from .exceptions import TreeExhausted
from .jsonio import canonical_dumps, derive_seed, sha256_text
from .rewards import reward_batch
from .types import ModelRef, RewardBreakdown, RunConfig, TaskInstance, Trajectory, Turn

log = logging.getLogger(__name__)

DPO_DATASET_NAME = "dpo.jsonl"


def levenshtein(a: str, b: str) -> int:
    """Character-level edit distance, two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,  # deletion
                    current[j - 1] + 1,  # insertion
                    previous[j - 1] + (ca != cb),  # substitution
                )
            )
        previous = current
    return previous[-1]


def node_similarity(a: str, b: str) -> float:
    """Normalized edit distance: 0.0 for identical strings, 1.0 for disjoint.

    Two empty strings are identical by definition (0.0).
    """
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


@dataclass
class TreeNode:
    id: int
    parent_id: Optional[int]
    turn: Optional[Turn]  # None only for the root
    children: list[int] = field(default_factory=list)
    estimated_reward: float = 0.0
    visit_count: int = 0
    is_terminal: bool = False

    @property
    def content(self) -> str:
        return "" if self.turn is None else self.turn.content


@dataclass
class DialogueTree:
    instance_id: str
    nodes: dict[int, TreeNode]
    root_id: int = 0
    completed_trajectories: list[Trajectory] = field(default_factory=list)
    trajectory_rewards: list[RewardBreakdown] = field(default_factory=list)
    trajectory_leaves: list[int] = field(default_factory=list)
    failed_trajectories: list[Trajectory] = field(default_factory=list)
    expanded_ids: set[int] = field(default_factory=set)
    expansion_order: list[int] = field(default_factory=list)
    _next_id: int = 1

    @classmethod
    def new(cls, instance_id: str) -> "DialogueTree":
        root = TreeNode(id=0, parent_id=None, turn=None)
        return cls(instance_id=instance_id, nodes={0: root})

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def add_node(self, parent_id: int, turn: Turn, is_terminal: bool) -> TreeNode:
        parent = self.nodes[parent_id]
        if parent.is_terminal:
            raise ValueError(f"cannot attach under terminal node {parent_id}")
        node = TreeNode(
            id=self._next_id, parent_id=parent_id, turn=turn, is_terminal=is_terminal
        )
        self._next_id += 1
        self.nodes[node.id] = node
        parent.children.append(node.id)
        return node

    def path_to(self, node_id: int) -> list[int]:
        """Node ids from the root down to node_id, inclusive."""
        path = []
        current: Optional[int] = node_id
        while current is not None:
            path.append(current)
            current = self.nodes[current].parent_id
        path.reverse()
        if path[0] != self.root_id:
            raise ValueError(f"node {node_id} is not attached to the root")
        return path

    def history(self, node_id: int) -> list[Turn]:
        """Turns along the root-to-node path; the root contributes none."""
        return [
            self.nodes[nid].turn  # type: ignore[misc]
            for nid in self.path_to(node_id)
            if self.nodes[nid].turn is not None
        ]

    def to_debug_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "nodes": [
                {
                    "id": node.id,
                    "parent": node.parent_id,
                    "children": list(node.children),
                    "agent": None if node.turn is None else node.turn.agent,
                    "content": node.content,
                    "token_count": 0 if node.turn is None else node.turn.token_count,
                    "terminal": node.is_terminal,
                    "estimated_reward": node.estimated_reward,
                    "visit_count": node.visit_count,
                }
                for node in sorted(self.nodes.values(), key=lambda n: n.id)
            ],
            "expanded": sorted(self.expanded_ids),
            "completed": len(self.completed_trajectories),
        }


def tree_digest(tree: DialogueTree) -> str:
    return sha256_text(canonical_dumps(tree.to_debug_dict()))


def structural_problems(tree: DialogueTree) -> list[str]:
    """Invariant sweep used by tests; empty list means the tree is sound."""
    problems = []
    root = tree.nodes.get(tree.root_id)
    if root is None or root.parent_id is not None or root.turn is not None:
        problems.append("root is missing or malformed")
        return problems
    seen: set[int] = set()
    stack = [tree.root_id]
    while stack:
        nid = stack.pop()
        if nid in seen:
            problems.append(f"cycle through node {nid}")
            return problems
        seen.add(nid)
        node = tree.nodes[nid]
        for child_id in node.children:
            child = tree.nodes.get(child_id)
            if child is None:
                problems.append(f"node {nid} lists missing child {child_id}")
            elif child.parent_id != nid:
                problems.append(f"node {child_id} disagrees about its parent")
            else:
                stack.append(child_id)
        if node.is_terminal and node.children:
            problems.append(f"terminal node {nid} has children")
    unreachable = set(tree.nodes) - seen
    if unreachable:
        problems.append(f"unreachable nodes: {sorted(unreachable)}")
    for leaf in tree.trajectory_leaves:
        if not tree.nodes[leaf].is_terminal:
            problems.append(f"trajectory ends at non-terminal node {leaf}")
    return problems


def mean_consistency_gap(tree: DialogueTree) -> float:
    """Largest |estimated_reward - mean(children)| over internal nodes."""
    gap = 0.0
    for node in tree.nodes.values():
        if node.children:
            expected = fmean(tree.nodes[c].estimated_reward for c in node.children)
            gap = max(gap, abs(node.estimated_reward - expected))
    return gap


# ---------------------------------------------------------------------------
# per-round operations


def backpropagate(tree: DialogueTree, leaf_id: int) -> None:
    """Bump visit counts along the leaf's path and restore the mean-of-children
    property for every ancestor, bottom-up."""
    path = tree.path_to(leaf_id)
    for nid in path:
        tree.nodes[nid].visit_count += 1
    for nid in reversed(path[:-1]):
        node = tree.nodes[nid]
        node.estimated_reward = fmean(
            tree.nodes[c].estimated_reward for c in node.children
        )


def refresh_tree_rewards(
    tree: DialogueTree,
    instance: TaskInstance,
    base: ModelRef,
    config: RunConfig,
    gateway: Optional[Gateway] = None,
) -> None:
    """Re-score every completed trajectory against the tree-wide token
    maximum, push the means onto terminal nodes, then up the whole tree."""
    if not tree.completed_trajectories:
        return
    tree.trajectory_rewards = reward_batch(
        tree.completed_trajectories, instance, base, config, gateway
    )
    by_leaf: dict[int, list[float]] = {}
    for leaf_id, reward in zip(tree.trajectory_leaves, tree.trajectory_rewards):
        by_leaf.setdefault(leaf_id, []).append(reward.combined)
    for leaf_id, rewards in by_leaf.items():
        tree.nodes[leaf_id].estimated_reward = fmean(rewards)
    # Bottom-up: deepest first so every parent sees refreshed children.
    depth = {nid: len(tree.path_to(nid)) for nid in tree.nodes}
    for nid in sorted(tree.nodes, key=lambda n: -depth[n]):
        node = tree.nodes[nid]
        if node.children:
            node.estimated_reward = fmean(
                tree.nodes[c].estimated_reward for c in node.children
            )


def softmax_weights(values: Sequence[float]) -> list[float]:
    """Temperature-1 softmax with max subtraction for stability."""
    peak = max(values)
    exps = [math.exp(v - peak) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def select_node_to_expand(
    tree: DialogueTree, config: RunConfig, rng: random.Random
) -> int:
    """Pick the next node to branch from and mark it expanded.

    Eligible nodes are internal, not yet expanded, not sitting directly above
    an all-terminal child set, and far enough (normalized edit distance >=
    edit_sim_exclude) from every previously expanded node. The bare root is
    the seed case: with no children at all it is the only legal pick.
    """
    root = tree.root
    if not root.children and root.id not in tree.expanded_ids:
        tree.expanded_ids.add(root.id)
        tree.expansion_order.append(root.id)
        return root.id

    expanded_contents = [tree.nodes[nid].content for nid in tree.expanded_ids]
    candidates = []
    for node in tree.nodes.values():
        if node.is_terminal or not node.children:
            continue
        if node.id in tree.expanded_ids:
            continue
        if all(tree.nodes[c].is_terminal for c in node.children):
            continue  # expanding here could only restate finished endings
        if any(
            node_similarity(node.content, content) < config.edit_sim_exclude
            for content in expanded_contents
        ):
            continue
        candidates.append(node)
    if not candidates:
        raise TreeExhausted(f"tree for {tree.instance_id}: no expandable node left")

    candidates.sort(key=lambda n: (-n.estimated_reward, n.id))
    pool = candidates[: config.mcts_topk]
    weights = softmax_weights([n.estimated_reward for n in pool])
    draw = rng.random()
    cumulative = 0.0
    chosen = pool[-1]
    for node, weight in zip(pool, weights):
        cumulative += weight
        if draw < cumulative:
            chosen = node
            break
    tree.expanded_ids.add(chosen.id)
    tree.expansion_order.append(chosen.id)
    return chosen.id


def _attach(tree: DialogueTree, start_id: int, new_turns: Sequence[Turn], config: RunConfig) -> int:
    """Attach a simulated continuation under start_id, merging near-identical
    siblings (same terminality only), and return the terminal node id."""
    current = start_id
    for position, turn in enumerate(new_turns):
        is_last = position == len(new_turns) - 1
        merged = None
        for child_id in tree.nodes[current].children:
            child = tree.nodes[child_id]
            if child.is_terminal != is_last:
                continue
            if node_similarity(child.content, turn.content) < config.edit_sim_merge:
                merged = child
                break
        if merged is not None:
            current = merged.id
        else:
            current = tree.add_node(current, turn, is_terminal=is_last).id
    return current


def expand_and_simulate(
    tree: DialogueTree,
    node_id: int,
    instance: TaskInstance,
    model: ModelRef,
    base: ModelRef,
    config: RunConfig,
    *,
    gateway: Gateway,
    agents=None,
    branch_keys: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
    templates_dir: Path | None = None,
) -> list[Trajectory]:
    """Branch K continuations from node_id and fold them into the tree.

    Returns the completed trajectories; transport-failed branches are kept on
    tree.failed_trajectories and never attached.
    """
    agents = agents or agent_specs_for(instance, templates_dir)
    k = config.mcts_branch
    ordinal = len(tree.expansion_order) - 1 if tree.expansion_order else 0
    if branch_keys is None:
        branch_keys = [f"dpo.e{ordinal}.b{j}" for j in range(k)]
    if seeds is None:
        seeds = [
            derive_seed(config.seed, "dpo", instance.id, "sim", ordinal, j)
            for j in range(k)
        ]
    prefix = tree.history(node_id)
    completed = []
    for j in range(k):
        trajectory = run_conversation(
            instance,
            agents,
            model,
            gateway=gateway,
            seed=seeds[j],
            max_turns=config.max_turns,
            config=config,
            base=base,
            prefix=prefix,
            branch_key=branch_keys[j],
        )
        if trajectory.terminated_by == "backend_error":
            log.warning(
                "instance %s branch %s: backend error, branch dropped",
                instance.id,
                branch_keys[j],
            )
            tree.failed_trajectories.append(trajectory)
            continue
        leaf_id = _attach(tree, node_id, trajectory.turns[len(prefix):], config)
        tree.completed_trajectories.append(trajectory)
        tree.trajectory_leaves.append(leaf_id)
        backpropagate(tree, leaf_id)
        completed.append(trajectory)
    refresh_tree_rewards(tree, instance, base, config, gateway)
    return completed


def generate_tree(
    instance: TaskInstance,
    model: ModelRef,
    base: ModelRef,
    config: RunConfig,
    *,
    gateway: Gateway,
    templates_dir: Path | None = None,
    branch_prefix: str = "dpo",
    on_round: Optional[Callable[[int, DialogueTree], None]] = None,
) -> DialogueTree:
    """Grow a full dialogue tree: mcts_iterations rounds of select + branch."""
    agents = agent_specs_for(instance, templates_dir)
    tree = DialogueTree.new(instance.id)
    for round_index in range(config.mcts_iterations):
        rng = random.Random(
            derive_seed(config.seed, branch_prefix, instance.id, "select", round_index)
        )
        try:
            node_id = select_node_to_expand(tree, config, rng)
        except TreeExhausted:
            log.warning(
                "instance %s: tree exhausted after %d rounds", instance.id, round_index
            )
            break
        ordinal = len(tree.expansion_order) - 1
        expand_and_simulate(
            tree,
            node_id,
            instance,
            model,
            base,
            config,
            gateway=gateway,
            agents=agents,
            branch_keys=[
                f"{branch_prefix}.e{ordinal}.b{j}" for j in range(config.mcts_branch)
            ],
            seeds=[
                derive_seed(config.seed, branch_prefix, instance.id, "sim", ordinal, j)
                for j in range(config.mcts_branch)
            ],
        )
        if on_round is not None:
            on_round(round_index, tree)
    return tree


# ---------------------------------------------------------------------------
# preference pairs


@dataclass(frozen=True, slots=True)
class PreferencePair:
    """Two sibling responses to the same conversation prefix, one preferred."""

    instance_id: str
    prompt_turns: tuple[tuple[str, str], ...]
    chosen: str
    rejected: str
    reward_chosen: float
    reward_rejected: float

    def __post_init__(self) -> None:
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")
        if self.reward_chosen <= self.reward_rejected:
            raise ValueError("chosen reward must exceed rejected reward")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "prompt_turns": [
                {"agent": agent, "content": content} for agent, content in self.prompt_turns
            ],
            "chosen": self.chosen,
            "rejected": self.rejected,
            "reward_chosen": self.reward_chosen,
            "reward_rejected": self.reward_rejected,
        }

    @classmethod
    def from_json_dict(cls, raw: dict[str, Any]) -> "PreferencePair":
        return cls(
            instance_id=str(raw["instance_id"]),
            prompt_turns=tuple(
                (str(m["agent"]), str(m["content"])) for m in raw["prompt_turns"]
            ),
            chosen=str(raw["chosen"]),
            rejected=str(raw["rejected"]),
            reward_chosen=float(raw["reward_chosen"]),
            reward_rejected=float(raw["reward_rejected"]),
        )


def extract_pairs(tree: DialogueTree, config: RunConfig) -> list[PreferencePair]:
    """Harvest same-parent sibling pairs whose rewards separate cleanly.

    A pair qualifies when the better sibling clears theta_dpo_filter and the
    reward gap exceeds theta_dpo_diff (both strict). Qualifying pairs are
    ranked by their better reward and cut to the top half (rounded up); ties
    resolve toward fewer response tokens, then discovery order.
    """
    raw: list[tuple[float, int, int, PreferencePair]] = []
    for parent in sorted(tree.nodes.values(), key=lambda n: n.id):
        children = [tree.nodes[c] for c in parent.children]
        for i in range(len(children)):
            for j in range(i + 1, len(children)):
                first, second = children[i], children[j]
                high, low = (
                    (first, second)
                    if first.estimated_reward >= second.estimated_reward
                    else (second, first)
                )
                if high.estimated_reward <= config.theta_dpo_filter:
                    continue
                if high.estimated_reward - low.estimated_reward <= config.theta_dpo_diff:
                    continue
                if high.content == low.content:
                    continue
                pair = PreferencePair(
                    instance_id=tree.instance_id,
                    prompt_turns=tuple(
                        (turn.agent, turn.content) for turn in tree.history(parent.id)
                    ),
                    chosen=high.content,
                    rejected=low.content,
                    reward_chosen=high.estimated_reward,
                    reward_rejected=low.estimated_reward,
                )
                token_cost = (
                    high.turn.token_count + low.turn.token_count  # type: ignore[union-attr]
                )
                raw.append((pair.reward_chosen, token_cost, len(raw), pair))
    raw.sort(key=lambda entry: (-entry[0], entry[1], entry[2]))
    keep = math.ceil(config.top_frac_dpo * len(raw))
    return [entry[3] for entry in raw[:keep]]


def run_dpo_stage(
    dataset: Sequence[TaskInstance],
    model: ModelRef,
    base: ModelRef,
    config: RunConfig,
    *,
    gateway: Gateway,
    out_dir: Path,
    templates_dir: Path | None = None,
    branch_prefix: str = "dpo",
) -> Path:
    """Grow one tree per instance and export the qualifying pairs.

    Records are grouped by instance id (ascending) and keep their extraction
    rank inside each group. Debug dumps of every tree go to trees.jsonl.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .jsonio import write_jsonl

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(instance: TaskInstance) -> DialogueTree:
        return generate_tree(
            instance,
            model,
            base,
            config,
            gateway=gateway,
            templates_dir=templates_dir,
            branch_prefix=branch_prefix,
        )

    with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
        trees = list(pool.map(job, dataset))

    write_jsonl(out_dir / "trees.jsonl", [tree.to_debug_dict() for tree in trees])

    by_instance = sorted(
        ((instance.id, extract_pairs(tree, config)) for instance, tree in zip(dataset, trees)),
        key=lambda entry: entry[0],
    )
    records = [pair.to_json_dict() for _, pairs in by_instance for pair in pairs]
    if not records:
        log.warning("stage %s: no preference pairs extracted", branch_prefix)
    path = out_dir / DPO_DATASET_NAME
    write_jsonl(path, records)
    return path


def read_dpo_dataset(path: Path | str) -> list[PreferencePair]:
    from .jsonio import iter_jsonl

    return [PreferencePair.from_json_dict(raw) for raw in iter_jsonl(path)]
