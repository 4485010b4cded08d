"""Uncertainty-gated tree expansion over dialogue states."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import DialogueEnv, DialogueState, MacroAction, Scenario

STATUSES = ("frontier", "expanded", "pruned_single", "terminal_leaf")
STD_FLOOR = 1e-4  # sqrt of the 1e-8 variance floor


class ConfigError(ValueError):
    pass


@dataclass
class TreeConfig:
    N: int = 4
    tau: float = 1.5
    alpha: float = 0.3
    bypass_p: float = 0.10
    leaf_budget: int = 16
    gamma: float = 1.0
    normalize_u1: bool = False

    def validate(self) -> "TreeConfig":
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.leaf_budget < 1:
            raise ConfigError("leaf_budget must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.bypass_p <= 1.0:
            raise ConfigError(f"bypass_p must be in [0, 1], got {self.bypass_p}")
        return self


@dataclass
class Candidate:
    action: MacroAction
    state: DialogueState
    reward: float
    value: float = 0.0
    q: float = 0.0


@dataclass
class TreeNode:
    id: int
    parent: Optional[int]
    depth: int
    state: DialogueState
    path: tuple[int, ...]
    incoming_action: Optional[MacroAction] = None
    incoming_reward: float = 0.0
    cached_value: float = 0.0
    candidates: list[Candidate] = field(default_factory=list)
    retained_children: list[int] = field(default_factory=list)
    u1: Optional[float] = None
    u2_raw: Optional[float] = None
    u2_norm: Optional[float] = None
    u: Optional[float] = None
    bypass: bool = False
    rollout: bool = False
    status: str = "frontier"

    @property
    def B(self) -> int:
        return len(self.retained_children)

    @property
    def terminal(self) -> bool:
        return self.state.terminal


@dataclass
class DialogueTree:
    root: int
    nodes: dict[int, TreeNode]
    leaf_budget: int
    rng_seed: int
    N: int = 4
    generated_turns: int = 0
    value_calls: int = 0
    u2_samples: list[float] = field(default_factory=list)
    u1_samples: list[float] = field(default_factory=list)
    targets: dict = field(default_factory=dict)

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes.values() if not n.retained_children]

    def children(self, node_id: int) -> list[TreeNode]:
        return [self.nodes[c] for c in self.nodes[node_id].retained_children]

    def to_json(self) -> dict:
        nodes = []
        for n in self.nodes.values():
            nodes.append({
                "id": n.id, "parent": n.parent, "depth": n.depth, "B": n.B, "status": n.status,
                "u1": n.u1, "u2_raw": n.u2_raw, "u2_norm": n.u2_norm, "u": n.u,
                "reward": n.incoming_reward, "value": n.cached_value, "bypass": n.bypass,
                "rollout": n.rollout, "n_candidates": len(n.candidates),
                "action": None if n.incoming_action is None else list(n.incoming_action.tokens),
            })
        edges = [[n.parent, n.id] for n in self.nodes.values() if n.parent is not None]
        return {"root": self.root, "leaf_budget": self.leaf_budget, "rng_seed": self.rng_seed,
                "N": self.N, "generated_turns": self.generated_turns, "nodes": nodes, "edges": edges}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


class UncertaintyStats:
    """Sliding window of raw samples for Z-score normalisation."""

    def __init__(self, window: int = 256, samples=()):
        self.window = window
        self.history: deque[float] = deque(samples, maxlen=window)
        self.u1_stats: Optional[UncertaintyStats] = None

    def copy(self) -> "UncertaintyStats":
        out = UncertaintyStats(self.window, self.history)
        if self.u1_stats is not None:
            out.u1_stats = self.u1_stats.copy()
        return out

    @property
    def mean(self) -> float:
        return float(np.mean(self.history)) if self.history else 0.0

    @property
    def var(self) -> float:
        return float(np.var(self.history)) if len(self.history) >= 2 else 0.0

    def extend(self, samples) -> None:
        self.history.extend(samples)


def zscore(stats: UncertaintyStats, raw: float) -> float:
    """Normalise ``raw`` against the window, then push it into the window.

    With fewer than two samples in the window the output is 0.
    """
    if len(stats.history) < 2:
        z = 0.0
    else:
        z = (raw - stats.mean) / max(math.sqrt(stats.var), STD_FLOOR)
    stats.history.append(raw)
    return z


def node_rng(tree_seed: int, path: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tree_seed, spawn_key=tuple(path)))


def propose_candidates(node: TreeNode, N: int, policy, env: DialogueEnv, rng) -> list[Candidate]:
    if node.state.terminal:
        raise ValueError("cannot propose from a terminal node")
    cands = []
    for _ in range(N):
        action = policy.act(node.state, rng)
        nxt, reward, _ = env.step(node.state, action)
        cands.append(Candidate(action, nxt, reward))
    node.candidates = cands
    return cands


def q_lookahead(candidate: Candidate, critic, gamma: float) -> float:
    v = 0.0 if candidate.state.terminal else critic.value(candidate.state)
    candidate.value = v
    candidate.q = candidate.reward + gamma * v
    return candidate.q


def u1(node_value: float, q_values) -> float:
    return abs(node_value - float(np.mean(q_values)))


def u2(q_values) -> float:
    q = np.asarray(q_values, dtype=float)
    return float(np.mean((q - q.mean()) ** 2))


def combined_uncertainty(u1_value: float, u2_norm: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * u1_value + (1.0 - alpha) * u2_norm


def expand_or_prune(node: TreeNode, U: float, tau: float, bypass_p: float, rng) -> list[int]:
    """Candidate indices to keep: all of them above ``tau``, else one at random unless bypassed."""
    n = len(node.candidates)
    if U > tau:
        return list(range(n))
    if bypass_p > 0 and rng.random() < bypass_p:
        node.bypass = True
        return list(range(n))
    return [int(rng.integers(n))]


class _Builder:
    def __init__(self, tree: DialogueTree, critic):
        self.tree = tree
        self.critic = critic

    def add(self, parent: TreeNode, index: int, cand: Candidate, value: Optional[float] = None) -> TreeNode:
        nid = len(self.tree.nodes)
        if value is None:
            value = 0.0 if cand.state.terminal else self.critic.value(cand.state)
        node = TreeNode(id=nid, parent=parent.id, depth=parent.depth + 1, state=cand.state,
                        path=parent.path + (index,), incoming_action=cand.action,
                        incoming_reward=cand.reward, cached_value=value,
                        status="terminal_leaf" if cand.state.terminal else "frontier")
        self.tree.nodes[nid] = node
        parent.retained_children.append(nid)
        return node


def rollout(tree: DialogueTree, node: TreeNode, policy, env: DialogueEnv, critic) -> TreeNode:
    """Single-sample chain from ``node`` to termination; returns the terminal leaf."""
    builder = _Builder(tree, critic)
    while not node.state.terminal:
        rng = node_rng(tree.rng_seed, node.path)
        action = policy.act(node.state, rng)
        nxt, reward, _ = env.step(node.state, action)
        tree.generated_turns += 1
        node.rollout = True
        node.status = "pruned_single"
        node = builder.add(node, 0, Candidate(action, nxt, reward))
    return node


def start_tree(scenario: Scenario, env: DialogueEnv, critic, cfg_budget: int, seed: int, N: int) -> DialogueTree:
    state = env.reset(scenario)
    root = TreeNode(id=0, parent=None, depth=0, state=state, path=(),
                    cached_value=0.0 if state.terminal else critic.value(state))
    return DialogueTree(root=0, nodes={0: root}, leaf_budget=cfg_budget, rng_seed=int(seed), N=N)


def grow_tree(scenario: Scenario, policy, critic, env: DialogueEnv, config: TreeConfig, seed: int,
              stats: Optional[UncertaintyStats] = None) -> DialogueTree:
    """Breadth-first uncertainty-gated expansion, then linear rollout of the remaining leaves.

    A frontier node is admitted for expansion only while
    ``leaves - 1 + N <= leaf_budget``; the first refusal ends the expansion
    phase. ``stats`` (the run's U2 window) is updated in place.
    """
    cfg = config.validate()
    stats = stats if stats is not None else UncertaintyStats()
    calls0 = getattr(critic, "calls", 0)
    tree = start_tree(scenario, env, critic, cfg.leaf_budget, seed, cfg.N)
    builder = _Builder(tree, critic)
    frontier = deque(n for n in tree.nodes.values() if not n.terminal)
    leaves = 1
    while frontier:
        if leaves - 1 + cfg.N > cfg.leaf_budget:
            break
        node = frontier.popleft()
        rng = node_rng(tree.rng_seed, node.path)
        cands = propose_candidates(node, cfg.N, policy, env, rng)
        tree.generated_turns += len(cands)
        qs = [q_lookahead(c, critic, cfg.gamma) for c in cands]
        node.u1 = u1(node.cached_value, qs)
        node.u2_raw = u2(qs)
        node.u2_norm = zscore(stats, node.u2_raw)
        tree.u2_samples.append(node.u2_raw)
        u1_term = node.u1
        if cfg.normalize_u1:
            u1_term = zscore(_u1_stats(stats), node.u1)
            tree.u1_samples.append(node.u1)
        node.u = combined_uncertainty(u1_term, node.u2_norm, cfg.alpha)
        keep = expand_or_prune(node, node.u, cfg.tau, cfg.bypass_p, rng)
        node.status = "expanded" if len(keep) > 1 or cfg.N == 1 else "pruned_single"
        for i in keep:
            child = builder.add(node, i, cands[i], value=cands[i].value)
            if not child.terminal:
                frontier.append(child)
        leaves += len(keep) - 1
    for node in list(frontier):
        rollout(tree, node, policy, env, critic)
    tree.value_calls = getattr(critic, "calls", 0) - calls0
    return tree


def _u1_stats(stats: UncertaintyStats) -> UncertaintyStats:
    # U1 gets its own window, hung off the U2 stats so callers pass one object.
    if stats.u1_stats is None:
        stats.u1_stats = UncertaintyStats(stats.window)
    return stats.u1_stats


def grow_chain(scenario: Scenario, policy, critic, env: DialogueEnv, seed: int) -> DialogueTree:
    """One plain rollout, stored as a single-branch tree."""
    calls0 = getattr(critic, "calls", 0)
    tree = start_tree(scenario, env, critic, 1, seed, 1)
    rollout(tree, tree.nodes[tree.root], policy, env, critic)
    tree.value_calls = getattr(critic, "calls", 0) - calls0
    return tree
