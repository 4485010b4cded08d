import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atpo import model as M
from atpo.credit import decompose, traceback
from atpo.runner.report import branching_histogram, emit_tree_report
from atpo.tree import (Candidate, ConfigError, TreeConfig, TreeNode, UncertaintyStats, combined_uncertainty,
                       expand_or_prune, grow_chain, grow_tree, propose_candidates, q_lookahead, u1, u2, zscore)

from helpers import ConstantCritic, HashCritic, RandomAgent, small_env, small_scenarios

GOLDEN = Path(__file__).parent / "data" / "golden_tree.json"


class GreedyAgent:
    def __init__(self, env):
        self.env = env

    def act(self, state, rng):
        return self.env.ask(0)


def _root(env, scenario):
    return TreeNode(id=0, parent=None, depth=0, state=env.reset(scenario), path=())


def test_propose_counts_and_replay():
    env = small_env()
    s = small_scenarios(1)[0]
    agent = RandomAgent(env)
    assert len(propose_candidates(_root(env, s), 1, agent, env, np.random.default_rng(0))) == 1
    a = propose_candidates(_root(env, s), 4, agent, env, np.random.default_rng(5))
    b = propose_candidates(_root(env, s), 4, agent, env, np.random.default_rng(5))
    assert [c.action for c in a] == [c.action for c in b]
    same = propose_candidates(_root(env, s), 3, GreedyAgent(env), env, np.random.default_rng(1))
    assert len({c.action for c in same}) == 1


def test_q_lookahead_examples():
    env = small_env()
    s = small_scenarios(1)[0]
    state = env.reset(s)
    nxt, r, _ = env.step(state, env.ask(0))
    cand = Candidate(env.ask(0), nxt, 0.0)
    assert q_lookahead(cand, ConstantCritic(1.7), 1.0) == pytest.approx(1.7)
    assert q_lookahead(Candidate(env.ask(0), nxt, 0.5), ConstantCritic(9.0), 0.0) == 0.5
    done, r, _ = env.step(state, env.answer(s.correct_option))
    assert q_lookahead(Candidate(env.answer(s.correct_option), done, r), ConstantCritic(9.0), 1.0) == 3.0


def test_uncertainty_examples():
    assert u1(2.0, [1.0, 3.0]) == 0.0
    assert u1(1.0, [3.0, 3.0]) == 2.0
    assert u2([1.5, 1.5, 1.5]) == 0.0
    assert u2([0.0, 2.0]) == 1.0
    assert combined_uncertainty(1.0, 2.0, 0.3) == pytest.approx(1.7)
    assert combined_uncertainty(0.7, 5.0, 1.0) == 0.7
    assert combined_uncertainty(0.0, 0.0, 0.42) == 0.0
    with pytest.raises(ConfigError):
        combined_uncertainty(1.0, 1.0, 1.5)


def test_zscore_examples():
    stats = UncertaintyStats()
    assert zscore(stats, 5.0) == 0.0  # cold start
    stats = UncertaintyStats(256, [0.0, 2.0])
    assert zscore(stats, 2.0) == pytest.approx(1.0)
    stats = UncertaintyStats(256, [1.0, 3.0, 2.0])
    assert zscore(stats, 2.0) == 0.0
    stats = UncertaintyStats(256, [4.0, 4.0])
    assert zscore(stats, 4.0 + 1e-6) == pytest.approx(1e-6 / 1e-4)  # std floor


def test_zscore_window_slides():
    stats = UncertaintyStats(3)
    for x in range(10):
        zscore(stats, float(x))
    assert list(stats.history) == [7.0, 8.0, 9.0]


def _node_with(n):
    env = small_env()
    node = _root(env, small_scenarios(1)[0])
    node.candidates = [None] * n
    return node


def test_expand_or_prune_examples():
    rng = np.random.default_rng(0)
    assert expand_or_prune(_node_with(4), 2.0, 1.5, 0.1, rng) == [0, 1, 2, 3]
    for _ in range(20):
        assert len(expand_or_prune(_node_with(4), 0.1, 1.5, 0.0, rng)) == 1
        node = _node_with(4)
        assert expand_or_prune(node, -5.0, 1.5, 1.0, rng) == [0, 1, 2, 3] and node.bypass


def test_prune_choice_uniform():
    rng = np.random.default_rng(1)
    picks = [expand_or_prune(_node_with(4), 0.0, 1.0, 0.0, rng)[0] for _ in range(4000)]
    counts = np.bincount(picks, minlength=4)
    assert counts.min() > 900


def test_budget_below_one_rejected():
    env = small_env()
    with pytest.raises(ConfigError):
        grow_tree(small_scenarios(1)[0], RandomAgent(env), ConstantCritic(0.0), env, TreeConfig(leaf_budget=0), 0)


def test_budget_one_is_single_rollout():
    env = small_env()
    s = small_scenarios(3)[2]
    tree = grow_tree(s, RandomAgent(env), HashCritic(), env, TreeConfig(leaf_budget=1), seed=9)
    chain = grow_chain(s, RandomAgent(env), HashCritic(), env, seed=9)
    assert len(tree.leaves()) == 1
    assert [n.incoming_action for n in tree.nodes.values()] == [n.incoming_action for n in chain.nodes.values()]


def test_binary_expansion_until_budget():
    env = small_env(turn_limit=30)
    agent = GreedyAgent(env)  # never terminates before the turn limit
    cfg = TreeConfig(N=2, tau=-math.inf, bypass_p=0.0, leaf_budget=8)
    tree = grow_tree(small_scenarios(1)[0], agent, HashCritic(), env, cfg, seed=0)
    assert len(tree.leaves()) == 8
    assert branching_histogram(tree)[:3] == [1, 2, 4]
    assert all(n.B in (0, 1, 2) for n in tree.nodes.values())


@settings(max_examples=60, deadline=None)
@given(N=st.integers(1, 5), budget=st.integers(1, 40), tau=st.floats(-3, 3), bypass=st.floats(0, 1),
       alpha=st.floats(0, 1), seed=st.integers(0, 2 ** 31), p_answer=st.floats(0.05, 0.6))
def test_budget_and_branching_properties(N, budget, tau, bypass, alpha, seed, p_answer):
    env = small_env()
    s = small_scenarios(4)[seed % 4]
    cfg = TreeConfig(N=N, tau=tau, alpha=alpha, bypass_p=bypass, leaf_budget=budget)
    tree = grow_tree(s, RandomAgent(env, p_answer), HashCritic(), env, cfg, seed=seed)
    assert len(tree.leaves()) <= budget
    for n in tree.nodes.values():
        if n.candidates:
            assert n.B in (1, N)
    assert all(leaf.terminal for leaf in tree.leaves())


@settings(max_examples=30, deadline=None)
@given(N=st.integers(2, 5), budget=st.integers(1, 40), seed=st.integers(0, 2 ** 31))
def test_infinite_threshold_gives_chain(N, budget, seed):
    env = small_env()
    cfg = TreeConfig(N=N, tau=math.inf, bypass_p=0.0, leaf_budget=budget)
    tree = grow_tree(small_scenarios(2)[seed % 2], RandomAgent(env, 0.2), HashCritic(), env, cfg, seed=seed)
    assert len(tree.leaves()) == 1
    assert all(n.B <= 1 for n in tree.nodes.values())


def test_generated_turns_count_all_candidates():
    env = small_env()
    cfg = TreeConfig(N=3, leaf_budget=9)
    tree = grow_tree(small_scenarios(1)[0], RandomAgent(env, 0.2), HashCritic(), env, cfg, seed=4)
    processed = sum(len(n.candidates) for n in tree.nodes.values())
    rolled = sum(1 for n in tree.nodes.values() if n.rollout)
    assert tree.generated_turns == processed + rolled


def test_grow_is_deterministic():
    env = small_env()
    args = (small_scenarios(1)[0], RandomAgent(env), HashCritic(), env, TreeConfig(leaf_budget=12))
    assert grow_tree(*args, seed=3).dumps() == grow_tree(*args, seed=3).dumps()


def test_stats_updated_in_place():
    env = small_env()
    stats = UncertaintyStats()
    tree = grow_tree(small_scenarios(1)[0], RandomAgent(env, 0.2), HashCritic(), env, TreeConfig(leaf_budget=16),
                     seed=3, stats=stats)
    assert list(stats.history) == tree.u2_samples


def test_golden_tree():
    env = small_env()
    golden = json.loads(GOLDEN.read_text())
    tree = grow_tree(small_scenarios(5)[3], RandomAgent(env, 0.2), HashCritic(), env,
                     TreeConfig(N=4, leaf_budget=16), seed=3,
                     stats=UncertaintyStats(256, [0.0, 0.5, 1.0, 0.2]))
    assert len(tree.leaves()) == golden["leaves"]
    assert len(tree.nodes) == golden["nodes"]
    assert tree.generated_turns == golden["generated_turns"]
    assert branching_histogram(tree) == golden["histogram"]
    paths = sorted(t.node_ids for t in decompose(tree, traceback(tree)))
    assert paths == golden["paths"]
    report = emit_tree_report(tree)
    assert report["branching"] == golden["histogram"]


def test_token_policy_tree_runs():
    env = small_env()
    pol = M.init_policy(env.vocab.size, 8, seed=0)
    pol["out_b"][env.vocab.ASK] = 4.0
    pol["out_b"][env.vocab.EOT] = 2.0
    tree = grow_tree(small_scenarios(1)[0], M.TokenPolicy(pol, env), M.Critic(M.init_critic(pol)), env,
                     TreeConfig(N=2, leaf_budget=4), seed=0)
    assert all(leaf.terminal for leaf in tree.leaves())
    assert tree.value_calls > 0
