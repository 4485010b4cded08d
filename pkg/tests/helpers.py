"""Shared builders for the test suite: small environments, stub agents, hand-made trees."""
from __future__ import annotations

from dataclasses import replace
from itertools import product

import numpy as np

from atpo import model as M
from atpo.credit import decompose, traceback, visit_counts
from atpo.env import DialogueEnv, Vocabulary, generate_scenarios
from atpo.tree import DialogueTree, TreeConfig, TreeNode, grow_tree


def small_env(turn_limit: int = 8, max_macro_len: int = 4, key_space: int = 8, num_options: int = 4):
    return DialogueEnv(Vocabulary(key_space, 2, num_options), turn_limit, max_macro_len)


def small_scenarios(count: int = 10, seed: int = 0, **kw):
    return generate_scenarios(seed, count=count, **kw)


class RandomAgent:
    """Well-formed random turns: answers with probability ``p_answer``, else asks a random key."""

    def __init__(self, env: DialogueEnv, p_answer: float = 0.3, p_invalid: float = 0.0):
        self.env = env
        self.p_answer = p_answer
        self.p_invalid = p_invalid

    def act(self, state, rng):
        u = rng.random()
        if u < self.p_invalid:
            return self.env.parse((self.env.vocab.EOT,))
        if u < self.p_invalid + self.p_answer:
            return self.env.answer(int(rng.integers(self.env.vocab.num_options)))
        return self.env.ask(int(rng.integers(self.env.vocab.key_space)))


class HashCritic:
    """Deterministic pseudo-random state values in [lo, hi)."""

    def __init__(self, lo: float = -1.0, hi: float = 3.0, salt: int = 0):
        self.lo, self.hi, self.salt = lo, hi, salt
        self.calls = 0

    def value(self, state) -> float:
        self.calls += 1
        seed = abs(hash((self.salt,) + tuple(state.tokens))) % (2 ** 32)
        return float(np.random.default_rng(seed).uniform(self.lo, self.hi))


class ConstantCritic:
    def __init__(self, v: float):
        self.v = v
        self.calls = 0

    def value(self, state) -> float:
        self.calls += 1
        return self.v


def _base_state():
    env = small_env()
    return env.reset(small_scenarios(1)[0])


def hand_tree(parents, rewards, values=None, terminal=None, N: int = 2) -> DialogueTree:
    """Tree from a parent list (node 0 is the root, ``parents[0]`` ignored).

    ``rewards[i]`` is the reward on the edge into node ``i``; leaves are
    terminal unless ``terminal`` says otherwise.
    """
    n = len(parents)
    values = values if values is not None else [0.0] * n
    children = {i: [j for j in range(1, n) if parents[j] == i] for i in range(n)}
    if terminal is None:
        terminal = [not children[i] for i in range(n)]
    base = _base_state()
    nodes = {}
    for i in range(n):
        state = replace(base, k=0, tokens=base.tokens + (i,), terminal=bool(terminal[i]),
                        terminal_reason="answered" if terminal[i] else None)
        parent = None if i == 0 else parents[i]
        depth = 0 if i == 0 else nodes[parent].depth + 1
        path = () if i == 0 else nodes[parent].path + (children[parent].index(i),)
        nodes[i] = TreeNode(id=i, parent=parent, depth=depth, state=state, path=path,
                            incoming_reward=float(rewards[i]), cached_value=float(values[i]),
                            retained_children=list(children[i]),
                            status="terminal_leaf" if terminal[i] else "expanded")
    for i in range(1, n):
        nodes[i].incoming_action = _action_for(i)
    return DialogueTree(root=0, nodes=nodes, leaf_budget=n, rng_seed=0, N=N)


def _action_for(i: int):
    env = small_env()
    a = env.ask(i % env.vocab.key_space)
    return replace(a, logprobs=(-1.0, -1.0, -1.0))


def random_tree_parents(rng: np.random.Generator, max_nodes: int = 50, N: int = 3) -> list[int]:
    """Random parent list in which every internal node has 1 or N children."""
    parents = [-1]
    frontier = [0]
    while frontier:
        node = frontier.pop(0)
        room = max_nodes - len(parents)
        depth_guard = rng.random() < 0.25 or room < 1
        if depth_guard and node != 0:
            continue
        B = N if (rng.random() < 0.5 and room >= N) else 1
        if room < 1:
            continue
        for _ in range(B):
            parents.append(node)
            frontier.append(len(parents) - 1)
    return parents


def enumerate_paths(tree: DialogueTree, gamma: float = 1.0) -> float:
    """Expected discounted return from the root when each retained child is taken with probability 1/B."""

    def walk(nid: int, prob: float, ret: float, disc: float) -> float:
        node = tree.nodes[nid]
        if not node.retained_children:
            return prob * ret
        kids = node.retained_children
        total = 0.0
        for c in kids:
            child = tree.nodes[c]
            total += walk(c, prob / len(kids), ret + disc * child.incoming_reward, disc * gamma)
        return total

    return walk(tree.root, 1.0, 0.0, 1.0)


def all_macro_actions(env: DialogueEnv):
    v = env.vocab
    acts = [env.ask(k) for k in range(v.key_space)] + [env.answer(o) for o in range(v.num_options)]
    # every one-token turn plus malformed three-token ones
    acts += [env.parse((t,)) for t in range(v.size)]
    acts += [env.parse(toks) for toks in product((v.ASK, v.ANSWER, v.EOT), (v.BOS, v.EOT), (v.EOT,))]
    return acts


def tiny_setup(seed=0, d=6):
    env = DialogueEnv(Vocabulary(4, 2, 3), turn_limit=4, max_macro_len=4)
    scenarios = generate_scenarios(seed, key_space=4, num_keys=3, num_relevant=2, num_options=3, count=4)
    pol = M.init_policy(env.vocab.size, d, seed=seed)
    # lean towards well-formed turns so trees have some depth
    pol["out_b"][env.vocab.ASK] = 2.5
    pol["out_b"][env.vocab.EOT] = 1.5
    crit = M.init_critic(pol, seed=seed + 1)
    return env, scenarios, pol, crit


def tree_batch(seed=0, N=3, budget=6, d=6, n_trees=2, use_targets=False):
    env, scenarios, pol, crit = tiny_setup(seed, d)
    trajs = []
    for i in range(n_trees):
        tree = grow_tree(scenarios[i], M.TokenPolicy(pol, env), M.Critic(crit, 2), env,
                         TreeConfig(N=N, leaf_budget=budget, tau=0.0), seed=seed * 10 + i)
        trajs += decompose(tree, traceback(tree), tree_id=i, use_targets=use_targets)
    return env, pol, crit, trajs, visit_counts(trajs)


def perturbed(params, scale, seed):
    rng = np.random.default_rng(seed)
    return {k: v + scale * rng.normal(size=v.shape) for k, v in params.items()}
