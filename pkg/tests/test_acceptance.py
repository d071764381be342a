"""Whole-system acceptance gates, one test per shipping criterion.

Each criterion gets exactly one test function, so `pytest -v` prints one
pass/fail line per criterion: hand-checked reward arithmetic, brute-force
oracles for selection, pair extraction, similarity, and voting, coverage
scaling, byte-level run determinism, selection pressure, and scheduling.
"""

import itertools
import math
import random
from collections import Counter
from statistics import fmean

import pytest

from conftest import ScriptBuilder, make_instance
from optima.backend import MockBackend, load_mock_script
from optima.evaluation import evaluate, majority_vote_f1
from optima.exceptions import TreeExhausted
from optima.fixtures import write_demo_fixtures
from optima.jsonio import read_jsonl
from optima.mcts import (
    DialogueTree,
    _attach,
    extract_pairs,
    generate_tree,
    node_similarity,
    select_node_to_expand,
    structural_problems,
)
from optima.pipeline import MockTrainerAdapter, run_pipeline, stage_plan
from optima.rewards import reward_batch, score_answer
from optima.sampling import read_sft_dataset, run_init_stage, select_sft_records
from optima.store import open_run_store
from optima.types import ModelRef, RunConfig, Trajectory, Turn, load_task_file

BASE = ModelRef(name="base", backend_endpoint="mock:acceptance", version=0)


# -----------------------------------------------------------------------
# criterion 1: reward arithmetic on hand-computed fixtures
# -----------------------------------------------------------------------


def _traj(instance_id, per_turn, answer, agents=("Alice", "Bob")):
    """Build a consensus trajectory from (token_count, lm_loss) pairs."""
    turns = tuple(
        Turn(
            index=i,
            agent=agents[i % len(agents)],
            content=f"turn {i}",
            token_count=count,
            lm_loss=loss,
        )
        for i, (count, loss) in enumerate(per_turn)
    )
    return Trajectory(
        instance_id=instance_id,
        turns=turns,
        terminated_by="consensus",
        total_tokens=sum(count for count, _ in per_turn),
        extracted_answer=answer,
    )


def test_criterion_01_reward_arithmetic_matches_hand_fixtures():
    """Combined reward reproduces five worked examples to 1e-9."""
    cases = []

    # batch-relative token normalization: tokens [50, 100], r_task 1.0,
    # r_loss 2.0, lambda_token 0.6, lambda_loss 1.0 -> [1.2, 0.9]
    cases.append(
        (
            RunConfig(lambda_token=0.6, lambda_loss=1.0),
            make_instance("r0", label="42", metric="exact_match"),
            [_traj("r0", [(50, 2.0)], "42"), _traj("r0", [(100, 2.0)], "42")],
            [1.2, 0.9],
        )
    )
    # half-credit F1 answer: 0.5 - 0.55*1.0 + 0.5/2.5 = 0.15
    cases.append(
        (
            RunConfig(lambda_token=0.55, lambda_loss=0.5),
            make_instance("r1", label="alpha gamma", metric="token_f1"),
            [_traj("r1", [(10, 1.0), (20, 2.5)], "alpha beta")],
            [0.15],
        )
    )
    # both lambdas zero: combined collapses to the bare task score
    cases.append(
        (
            RunConfig(lambda_token=0.0, lambda_loss=0.0),
            make_instance("r2", label="age of dragons", metric="token_f1"),
            [
                _traj("r2", [(10, None)], "age of dragons"),
                _traj("r2", [(20, None)], "dragons age"),
                _traj("r2", [(5, None)], "granite"),
            ],
            [1.0, 0.8, 0.0],
        )
    )
    # mixed batch, loss taken as the per-turn maximum:
    #   1 - 0.4*0.5  + 0.9/1.0 = 1.7
    #   1 - 0.4*1.0  + 0.9/0.5 = 2.4
    #   0 - 0.4*0.25 + 0.9/3.0 = 0.2
    cases.append(
        (
            RunConfig(lambda_token=0.4, lambda_loss=0.9),
            make_instance("r3", label="yes", metric="exact_match"),
            [
                _traj("r3", [(12, 0.25), (8, 1.0)], "yes"),
                _traj("r3", [(40, 0.5)], "yes"),
                _traj("r3", [(6, 3.0), (4, 1.5)], "no"),
            ],
            [1.7, 2.4, 0.2],
        )
    )
    # zero measured loss hits the epsilon guard: 0 - 0.6 + 1/1e-6
    cases.append(
        (
            RunConfig(lambda_token=0.6, lambda_loss=1.0, eps_loss=1e-6),
            make_instance("r4", label="yes", metric="exact_match"),
            [_traj("r4", [(25, 0.0), (25, 0.0)], "no")],
            [999999.4],
        )
    )

    for config, instance, trajectories, expected in cases:
        rewards = reward_batch(trajectories, instance, BASE, config)
        got = [r.combined for r in rewards]
        assert got == pytest.approx(expected, abs=1e-9)

    # component spot check on the first fixture
    config, instance, trajectories, _ = cases[0]
    first, second = reward_batch(trajectories, instance, BASE, config)
    assert (first.r_task, first.r_token, first.r_loss) == (1.0, 0.5, 2.0)
    assert (second.r_task, second.r_token, second.r_loss) == (1.0, 1.0, 2.0)


# -----------------------------------------------------------------------
# criterion 2: supervised selection vs. a brute-force oracle
# -----------------------------------------------------------------------


def test_criterion_02_selection_matches_brute_force_oracle():
    """1000 random batches: argmax -> threshold -> top-ceil(0.7m) oracle."""
    rng = random.Random(20240822)
    for trial in range(1000):
        config = RunConfig(
            lambda_token=rng.choice([0.0, 0.4, 0.6]),
            lambda_loss=rng.choice([0.0, 0.5, 1.0]),
        )
        theta = rng.choice([0.0, 0.3, 0.5, 0.8])
        top_frac = 0.7
        ids = [f"i{k:02d}" for k in range(rng.randint(1, 20))]
        rng.shuffle(ids)

        batches = []
        for instance_id in ids:
            instance = make_instance(instance_id, label="yes", metric="exact_match")
            count = rng.randint(0, 8)
            if count == 0:
                batches.append((instance, []))
                continue
            trajectories = [
                _traj(
                    instance_id,
                    [(rng.randint(1, 40), rng.choice([0.5, 1.0, 1.0, 2.0]))],
                    "yes" if rng.random() < 0.6 else "no",
                )
                for _ in range(count)
            ]
            rewards = reward_batch(trajectories, instance, BASE, config)
            batches.append((instance, list(zip(trajectories, rewards))))

        records = select_sft_records(batches, theta, top_frac)

        # independent reference: per-instance argmax with the tie chain,
        # strict threshold, then the ceiling cut over survivors
        winners = []
        for instance, scored in batches:
            if not scored:
                continue
            best = min(
                range(len(scored)),
                key=lambda i: (
                    -scored[i][1].combined,
                    scored[i][0].total_tokens,
                    i,
                ),
            )
            winners.append(scored[best])
        passing = [
            (pos, trajectory, reward)
            for pos, (trajectory, reward) in enumerate(winners)
            if reward.r_task > theta
        ]
        passing.sort(key=lambda e: (-e[2].combined, e[1].total_tokens, e[0]))
        keep = math.ceil(top_frac * len(passing))
        expected = {
            (
                trajectory.instance_id,
                tuple((turn.agent, turn.content) for turn in trajectory.turns),
                reward,
            )
            for _, trajectory, reward in passing[:keep]
        }

        got = {(r.instance_id, r.messages, r.reward) for r in records}
        assert len(records) == len(expected), f"trial {trial}"
        assert got == expected, f"trial {trial}"
        assert [r.instance_id for r in records] == sorted(r.instance_id for r in records)


# -----------------------------------------------------------------------
# criterion 3: tree growth count law and structural invariants
# -----------------------------------------------------------------------


def _deep_tree_script(instance, config):
    """Distinct long conversations for every (round, branch) continuation."""
    vocab = "ember quartz harbor violet meadow lantern cicada drift saffron".split()
    builder = ScriptBuilder()
    for e in range(config.mcts_iterations):
        for j in range(config.mcts_branch):
            salad = random.Random(4000 + 29 * e + j)
            declare_from = 4 + (e + j) % 3
            contents = []
            for t in range(config.max_turns):
                words = " ".join(salad.choice(vocab) for _ in range(6 + (t + j) % 3))
                if t >= declare_from:
                    answer = "blue lagoon" if (e + j) % 3 else "red canyon"
                    contents.append(f"{words} <A>{answer}</A>")
                else:
                    contents.append(words)
            builder.conversation(instance, f"dpo.e{e}.b{j}", contents)
    return builder


def _check_tree_structure(tree):
    """Independent recompute: links, acyclicity, and node reward estimates."""
    roots = [n for n in tree.nodes.values() if n.parent_id is None]
    assert [n.id for n in roots] == [tree.root_id]
    for node in tree.nodes.values():
        for child_id in node.children:
            assert tree.nodes[child_id].parent_id == node.id
        if node.parent_id is not None:
            assert node.id in tree.nodes[node.parent_id].children
        seen = set()
        current = node.id
        while current is not None:
            assert current not in seen, f"cycle through node {current}"
            seen.add(current)
            current = tree.nodes[current].parent_id
        assert tree.root_id in seen

    rewards_by_leaf = {}
    for leaf_id, breakdown in zip(tree.trajectory_leaves, tree.trajectory_rewards):
        rewards_by_leaf.setdefault(leaf_id, []).append(breakdown.combined)

    depth = {nid: len(tree.path_to(nid)) for nid in tree.nodes}
    expected = {}
    for nid in sorted(tree.nodes, key=lambda n: -depth[n]):
        node = tree.nodes[nid]
        if node.is_terminal:
            assert not node.children
            expected[nid] = fmean(rewards_by_leaf[nid])
        else:
            assert node.children, f"dangling open node {nid}"
            expected[nid] = fmean(expected[c] for c in node.children)
    for nid, value in expected.items():
        assert abs(value - tree.nodes[nid].estimated_reward) < 1e-9


def test_criterion_03_tree_count_law_and_invariants():
    """8 rounds x 3 branches, fault-free: 24 completed walks per instance."""
    config = RunConfig(mcts_iterations=8, mcts_branch=3, max_turns=8)
    for qid in ("q0", "q1"):
        instance = make_instance(qid)
        builder = _deep_tree_script(instance, config)
        rounds = []

        def on_round(index, tree):
            assert structural_problems(tree) == []
            _check_tree_structure(tree)
            rounds.append(index)

        tree = generate_tree(
            instance,
            BASE,
            BASE,
            config,
            gateway=builder.backend(),
            on_round=on_round,
        )
        assert rounds == list(range(8))
        assert len(tree.completed_trajectories) == 24
        assert tree.failed_trajectories == []
        assert len(tree.expansion_order) == 8


# -----------------------------------------------------------------------
# criterion 4: preference-pair extraction vs. a brute-force oracle
# -----------------------------------------------------------------------


def _random_reward_tree(rng):
    tree = DialogueTree.new(f"q{rng.randint(0, 99)}")
    size = rng.randint(2, 30)
    contents = []
    while len(tree.nodes) < size:
        open_ids = [n.id for n in tree.nodes.values() if not n.is_terminal]
        parent = tree.nodes[rng.choice(open_ids)]
        if contents and rng.random() < 0.15:
            text = rng.choice(contents)  # duplicates exercise the content guard
        else:
            text = f"utterance {len(tree.nodes)} {rng.randint(0, 999)}"
        contents.append(text)
        depth = len(tree.path_to(parent.id)) - 1
        node = tree.add_node(
            parent.id,
            Turn(
                index=depth,
                agent="Alice" if depth % 2 == 0 else "Bob",
                content=text,
                token_count=rng.randint(1, 30),
            ),
            is_terminal=rng.random() < 0.3,
        )
        node.estimated_reward = rng.randrange(0, 65) / 64.0
    return tree


def _reference_pairs(tree, config):
    raw = []
    for parent in sorted(tree.nodes.values(), key=lambda n: n.id):
        kids = [tree.nodes[c] for c in parent.children]
        prompt = []
        walk = parent.id
        while walk is not None:
            node = tree.nodes[walk]
            if node.turn is not None:
                prompt.append((node.turn.agent, node.turn.content))
            walk = node.parent_id
        prompt = tuple(reversed(prompt))
        for i in range(len(kids)):
            for j in range(i + 1, len(kids)):
                hi, lo = (
                    (kids[i], kids[j])
                    if kids[i].estimated_reward >= kids[j].estimated_reward
                    else (kids[j], kids[i])
                )
                if hi.estimated_reward <= config.theta_dpo_filter:
                    continue
                if hi.estimated_reward - lo.estimated_reward <= config.theta_dpo_diff:
                    continue
                if hi.content == lo.content:
                    continue
                raw.append(
                    (
                        hi.estimated_reward,
                        hi.turn.token_count + lo.turn.token_count,
                        len(raw),
                        (
                            tree.instance_id,
                            prompt,
                            hi.content,
                            lo.content,
                            hi.estimated_reward,
                            lo.estimated_reward,
                        ),
                    )
                )
    raw.sort(key=lambda entry: (-entry[0], entry[1], entry[2]))
    keep = math.ceil(config.top_frac_dpo * len(raw))
    return [entry[3] for entry in raw[:keep]]


def test_criterion_04_pair_extraction_matches_brute_force_oracle():
    """500 random trees under filter 0.4 / gap 0.2 / top-half cut."""
    config = RunConfig(theta_dpo_filter=0.4, theta_dpo_diff=0.2, top_frac_dpo=0.5)
    rng = random.Random(20240804)
    nonempty = 0
    for trial in range(500):
        tree = _random_reward_tree(rng)
        expected = _reference_pairs(tree, config)
        got = [
            (
                p.instance_id,
                p.prompt_turns,
                p.chosen,
                p.rejected,
                p.reward_chosen,
                p.reward_rejected,
            )
            for p in extract_pairs(tree, config)
        ]
        assert got == expected, f"trial {trial}"
        nonempty += bool(expected)
    assert nonempty > 100  # the generator must actually produce pairs


# -----------------------------------------------------------------------
# criterion 5: similarity oracle, retention and merge rules
# -----------------------------------------------------------------------


def _reference_levenshtein(a, b):
    rows = len(a) + 1
    cols = len(b) + 1
    table = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        table[i][0] = i
    for j in range(cols):
        table[0][j] = j
    for i in range(1, rows):
        for j in range(1, cols):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
                table[i - 1][j - 1] + cost,
            )
    return table[-1][-1]


def _retention_tree(candidate_text):
    """Root and one hub already expanded; one open candidate node left."""
    tree = DialogueTree.new("q0")
    hub = tree.add_node(
        0, Turn(index=0, agent="Alice", content="a" * 20, token_count=4), False
    )
    tree.add_node(
        hub.id, Turn(index=1, agent="Bob", content="hub tail", token_count=2), False
    )
    candidate = tree.add_node(
        0, Turn(index=0, agent="Alice", content=candidate_text, token_count=4), False
    )
    tree.add_node(
        candidate.id,
        Turn(index=1, agent="Bob", content="candidate tail", token_count=2),
        False,
    )
    for nid in (tree.root_id, hub.id):
        tree.expanded_ids.add(nid)
        tree.expansion_order.append(nid)
    return tree, candidate


def test_criterion_05_similarity_rules():
    """Distance oracle plus the 0.25 retention and 0.1 merge boundaries."""
    assert node_similarity("same text", "same text") == 0.0
    assert node_similarity("abcd", "wxyz") == 1.0
    assert node_similarity("", "") == 0.0

    rng = random.Random(20240805)
    for _ in range(1000):
        a = "".join(rng.choice("abcde") for _ in range(rng.randint(0, 12)))
        b = "".join(rng.choice("abcde") for _ in range(rng.randint(0, 12)))
        longest = max(len(a), len(b))
        expected = 0.0 if longest == 0 else _reference_levenshtein(a, b) / longest
        assert node_similarity(a, b) == expected

    # distance exactly 0.25 from every expanded node: still a legal pick
    config = RunConfig()
    tree, candidate = _retention_tree("a" * 15 + "b" * 5)
    assert node_similarity("a" * 20, candidate.content) == 0.25
    assert select_node_to_expand(tree, config, random.Random(1)) == candidate.id

    # distance 0.2 from the expanded hub: filtered out, nothing else is open
    tree, candidate = _retention_tree("a" * 16 + "b" * 4)
    assert node_similarity("a" * 20, candidate.content) == 0.2
    with pytest.raises(TreeExhausted):
        select_node_to_expand(tree, config, random.Random(1))

    # sibling merge: distance under 0.1 folds into the existing node,
    # exactly 0.1 stays separate
    merge_tree = DialogueTree.new("q1")
    first = _attach(
        merge_tree,
        0,
        [Turn(index=0, agent="Alice", content="c" * 20, token_count=4)],
        config,
    )
    near = _attach(
        merge_tree,
        0,
        [Turn(index=0, agent="Alice", content="c" * 19 + "d", token_count=4)],
        config,
    )
    assert node_similarity("c" * 20, "c" * 19 + "d") == 0.05
    assert near == first
    assert len(merge_tree.root.children) == 1
    far = _attach(
        merge_tree,
        0,
        [Turn(index=0, agent="Alice", content="c" * 18 + "dd", token_count=4)],
        config,
    )
    assert node_similarity("c" * 20, "c" * 18 + "dd") == 0.1
    assert far != first
    assert len(merge_tree.root.children) == 2


# -----------------------------------------------------------------------
# criterion 6: F1-grouped voting vs. an exhaustive oracle
# -----------------------------------------------------------------------

_VOTE_A = "alpha beta gamma delta epsilon"
_VOTE_B = _VOTE_A + " zeta"
_VOTE_C = _VOTE_B + " eta"
_VOTE_D = "omega psi chi"
_VOTE_E = "omega psi chi phi upsilon"
_VOTE_SYMBOLS = (_VOTE_A, _VOTE_B, _VOTE_C, _VOTE_D, _VOTE_E)
_VOTE_LABEL = _VOTE_C + " theta"


def _bag_f1(a, b):
    left = a.split()
    right = b.split()
    overlap = sum((Counter(left) & Counter(right)).values())
    if overlap == 0:
        return 0.0
    return 2.0 * overlap / (len(left) + len(right))


def _reference_vote(indices, edge, pair_value, label_value):
    if not indices:
        return 0.0
    n = len(indices)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(i + 1, n):
            if indices[i] == indices[j] or edge[indices[i]][indices[j]]:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[ra] = rb
    groups = {}
    for position in range(n):
        groups.setdefault(find(position), []).append(position)

    def intra(members):
        if len(members) == 1:
            return 1.0
        values = []
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                ua, ub = indices[members[a]], indices[members[b]]
                values.append(1.0 if ua == ub else pair_value[ua][ub])
        return fmean(values)

    best = min(groups.values(), key=lambda ms: (-len(ms), -intra(ms), ms[0]))
    return fmean(label_value[indices[p]] for p in best)


def test_criterion_06_f1_vote_matches_exhaustive_oracle():
    """Every answer list of length <= 8 over a five-string alphabet."""
    k = len(_VOTE_SYMBOLS)
    pair_value = [[_bag_f1(a, b) for b in _VOTE_SYMBOLS] for a in _VOTE_SYMBOLS]
    edge = [[pair_value[i][j] > 0.9 for j in range(k)] for i in range(k)]
    label_value = [_bag_f1(a, _VOTE_LABEL) for a in _VOTE_SYMBOLS]

    # the alphabet must exercise a transitive chain: A-B and B-C link,
    # A-C does not, and the two omega variants stay under the threshold
    linked = {(i, j) for i in range(k) for j in range(k) if i != j and edge[i][j]}
    assert linked == {(0, 1), (1, 0), (1, 2), (2, 1)}

    checked = 0
    for length in range(0, 9):
        for combo in itertools.product(range(k), repeat=length):
            answers = [_VOTE_SYMBOLS[i] for i in combo]
            got = majority_vote_f1(answers, _VOTE_LABEL)
            want = _reference_vote(combo, edge, pair_value, label_value)
            if abs(got - want) > 1e-12:
                raise AssertionError(f"vote mismatch for {combo}: {got} vs {want}")
            checked += 1
    assert checked == 488281


# -----------------------------------------------------------------------
# criterion 7: coverage scaling behavior
# -----------------------------------------------------------------------


def test_criterion_07_coverage_monotonic_with_late_hit():
    """Coverage never drops with n; a lone third hit lifts it at n=3."""
    instance = make_instance("c0", label="yes", metric="exact_match")
    builder = ScriptBuilder()
    for j in range(8):
        answer = "yes" if j == 2 else "no"
        builder.conversation(
            instance,
            f"eval.s{j}",
            [f"claim <A>{answer}</A>", f"agree <A>{answer}</A>"],
        )
    config = RunConfig()
    records, scaling = evaluate(
        [instance], BASE, config, n_samples=8, gateway=builder.backend()
    )

    record = records[0]
    assert [s.score for s in record.samples] == [0, 0, 1, 0, 0, 0, 0, 0]
    assert record.voted_score == 0.0
    assert record.coverage_score == 1.0
    coverage_by_n = [row[2] for row in scaling.rows]
    voted_by_n = [row[1] for row in scaling.rows]
    assert coverage_by_n == [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]
    assert voted_by_n == [0.0] * 8


def test_criterion_07b_coverage_monotonic_across_demo_instances(tmp_path):
    """Prefix coverage is nondecreasing for every demo instance."""
    tasks_path, script_path, config = write_demo_fixtures(tmp_path)
    dataset = load_task_file(tasks_path)
    gateway = MockBackend(load_mock_script(script_path))
    records, scaling = evaluate(dataset, BASE, config, n_samples=8, gateway=gateway)

    per_instance = []
    for record in records:
        scores = [s.score for s in record.samples]
        prefix_best = [max(scores[: n + 1]) for n in range(8)]
        assert prefix_best == sorted(prefix_best)
        per_instance.append(prefix_best)
    for n, row in enumerate(scaling.rows):
        assert row[0] == n + 1
        want = fmean(prefix[n] for prefix in per_instance)
        assert abs(row[2] - want) < 1e-12
    coverage_by_n = [row[2] for row in scaling.rows]
    assert coverage_by_n == sorted(coverage_by_n)


# -----------------------------------------------------------------------
# criterion 8: byte-level determinism of full runs
# -----------------------------------------------------------------------


def test_criterion_08_full_runs_are_byte_identical(tmp_path):
    """Two isft_dpo runs from one script produce identical artifacts."""
    tasks_path, script_path, config = write_demo_fixtures(tmp_path / "fixtures")
    assert config.variant == "isft_dpo" and config.max_iterations == 2
    dataset = load_task_file(tasks_path)
    script = load_mock_script(script_path)

    finals = []
    for name in ("first", "second"):
        store = open_run_store(tmp_path / name, config)
        finals.append(
            run_pipeline(
                dataset,
                config,
                store,
                MockTrainerAdapter(),
                gateway=MockBackend(script),
                base_model=BASE,
            )
        )
    assert finals[0] == finals[1]

    datasets_by_slot = {0: "sft.jsonl", 1: "sft.jsonl", 2: "dpo.jsonl"}
    compared = []
    for slot, dataset_name in datasets_by_slot.items():
        for rel in (dataset_name, "model.manifest"):
            path = f"iter_{slot:03d}/{rel}"
            first = (tmp_path / "first" / path).read_bytes()
            second = (tmp_path / "second" / path).read_bytes()
            assert first, f"{path} is empty"
            assert first == second, f"{path} differs between runs"
            compared.append(path)
    assert len(compared) == 6
    first_config = (tmp_path / "first" / "config.json").read_bytes()
    second_config = (tmp_path / "second" / "config.json").read_bytes()
    assert first_config == second_config


# -----------------------------------------------------------------------
# criterion 9: selection pressure toward shorter passing conversations
# -----------------------------------------------------------------------


def test_criterion_09_selection_prefers_shorter_passing_runs(tmp_path):
    """Selected records pass the threshold and average fewer tokens than
    the passing conversations that were left behind."""
    instances = [
        make_instance(f"p{i}", label="yes", metric="exact_match") for i in range(5)
    ]
    # per instance: three correct conversations of 8/12/16 tokens plus a
    # short wrong one whose high loss keeps it out of contention
    ladder = [(8, "yes", 1.0), (12, "yes", 1.0), (16, "yes", 1.0), (6, "no", 4.0)]
    builder = ScriptBuilder()
    for instance in instances:
        for j, (total, answer, loss) in enumerate(ladder):
            half = total // 2
            text = "pad " * (half - 1) + f"<A>{answer}</A>"
            builder.conversation(
                instance, f"init.s{j}", [text.strip(), text.strip()], lm_loss=loss
            )

    config = RunConfig(n_samples=4)
    out_dir = tmp_path / "stage"
    run_init_stage(
        instances, None, BASE, config, gateway=builder.backend(), out_dir=out_dir
    )

    records = read_sft_dataset(out_dir / "sft.jsonl")
    assert [r.instance_id for r in records] == ["p0", "p1", "p2", "p3"]
    assert all(r.reward.r_task > config.theta_init for r in records)
    selected_tokens = [
        sum(len(content.split()) for _, content in r.messages) for r in records
    ]
    assert selected_tokens == [8, 8, 8, 8]

    by_id = {instance.id: instance for instance in instances}
    selected_keys = {(r.instance_id, r.messages) for r in records}
    passing_rejected = []
    for row in read_jsonl(out_dir / "trajectories.jsonl"):
        trajectory = Trajectory.from_json_dict(row)
        if score_answer(trajectory.extracted_answer, by_id[trajectory.instance_id]) <= config.theta_init:
            continue
        key = (
            trajectory.instance_id,
            tuple((turn.agent, turn.content) for turn in trajectory.turns),
        )
        if key in selected_keys:
            continue
        passing_rejected.append(trajectory.total_tokens)
    assert len(passing_rejected) == 11  # 5x two longer winners' peers + one cut
    assert fmean(selected_tokens) <= fmean(passing_rejected)


# -----------------------------------------------------------------------
# criterion 10: stage scheduling table
# -----------------------------------------------------------------------


def test_criterion_10_stage_schedule_table():
    """All variants, zero through four training stages."""
    table = {
        "isft": {
            0: ["init"],
            1: ["init", "sft"],
            2: ["init", "sft", "sft"],
            3: ["init", "sft", "sft", "sft"],
            4: ["init", "sft", "sft", "sft", "sft"],
        },
        "idpo": {
            0: ["init"],
            1: ["init", "dpo"],
            2: ["init", "dpo", "dpo"],
            3: ["init", "dpo", "dpo", "dpo"],
            4: ["init", "dpo", "dpo", "dpo", "dpo"],
        },
        "isft_dpo": {
            0: ["init"],
            1: ["init", "sft"],
            2: ["init", "sft", "dpo"],
            3: ["init", "sft", "dpo", "sft"],
            4: ["init", "sft", "dpo", "sft", "dpo"],
        },
    }
    for variant, by_iterations in table.items():
        for iterations, expected in by_iterations.items():
            assert stage_plan(variant, iterations) == expected

    with pytest.raises(ValueError):
        stage_plan("sft_only", 1)
    with pytest.raises(ValueError):
        stage_plan("isft", -1)
