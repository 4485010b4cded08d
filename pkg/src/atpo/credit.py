"""Value traceback, one-step TD advantages, trajectory decomposition and visit counts."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .env import DialogueState, MacroAction
from .tree import DialogueTree, TreeNode


class TracebackError(ValueError):
    pass


@dataclass
class Turn:
    node_id: int  # state x_k the action was taken in
    child_id: int
    state: DialogueState
    action: MacroAction
    reward: float
    advantage: float
    effective: Optional[bool] = None

    @property
    def logprobs(self):
        return self.action.logprobs


@dataclass
class Trajectory:
    turns: list[Turn]
    leaf_id: int
    tree_id: int = 0
    targets: list[float] = field(default_factory=list)  # V-hat of each turn's state

    @property
    def K(self) -> int:
        return len(self.turns)

    @property
    def ret(self) -> float:
        return sum(t.reward for t in self.turns)

    @property
    def node_ids(self) -> list[int]:
        return [t.node_id for t in self.turns] + [self.leaf_id]

    def to_json(self) -> dict:
        return {
            "tree_id": self.tree_id, "leaf_id": self.leaf_id, "K": self.K, "return": self.ret,
            "turns": [{"node": t.node_id, "child": t.child_id, "tokens": list(t.action.tokens),
                       "kind": t.action.kind, "reward": t.reward, "advantage": t.advantage,
                       "logprobs": list(t.action.logprobs), "effective": t.effective}
                      for t in self.turns],
            "targets": self.targets,
        }


def _successor_target(child: TreeNode, targets: dict[int, float]) -> float:
    return 0.0 if child.terminal else targets[child.id]


def traceback(tree: DialogueTree, gamma: float = 1.0) -> dict[int, float]:
    """Backward pass: mean over retained children of ``r_i + gamma * V_hat(child_i)``.

    Terminal leaves store their incoming reward; the value after a terminal
    state is zero, so a parent sees ``r_i`` alone from a terminal child.
    """
    targets: dict[int, float] = {}
    for node in sorted(tree.nodes.values(), key=lambda n: -n.depth):
        if not node.retained_children:
            if not node.terminal:
                raise TracebackError(f"leaf {node.id} is not terminal; finish growth first")
            targets[node.id] = node.incoming_reward
            continue
        children = [tree.nodes[c] for c in node.retained_children]
        total = sum(c.incoming_reward + gamma * _successor_target(c, targets) for c in children)
        targets[node.id] = total / len(children)
    return targets


def advantage(parent: TreeNode, child: TreeNode, gamma: float = 1.0) -> float:
    """``r + gamma * V(child) - V(parent)`` from critic values cached during growth."""
    v_next = 0.0 if child.terminal else child.cached_value
    return child.incoming_reward + gamma * v_next - parent.cached_value


def target_advantage(parent: TreeNode, child: TreeNode, targets: dict[int, float], gamma: float = 1.0) -> float:
    """Same formula with traceback targets in place of the critic (critic-free tree baseline)."""
    return child.incoming_reward + gamma * _successor_target(child, targets) - targets[parent.id]


def decompose(tree: DialogueTree, targets: dict[int, float], gamma: float = 1.0, tree_id: int = 0,
              use_targets: bool = False) -> list[Trajectory]:
    """One trajectory per leaf, in leaf-id order, each turn annotated with its advantage."""
    out = []
    for leaf in sorted(tree.leaves(), key=lambda n: n.id):
        chain = [leaf]
        while chain[-1].parent is not None:
            chain.append(tree.nodes[chain[-1].parent])
        chain.reverse()
        turns = []
        for parent, child in zip(chain, chain[1:]):
            adv = (target_advantage(parent, child, targets, gamma) if use_targets
                   else advantage(parent, child, gamma))
            reply = child.state.last_reply
            turns.append(Turn(node_id=parent.id, child_id=child.id, state=parent.state,
                              action=child.incoming_action, reward=child.incoming_reward, advantage=adv,
                              effective=None if reply is None else reply.effective))
        out.append(Trajectory(turns=turns, leaf_id=leaf.id, tree_id=tree_id,
                              targets=[targets[n.id] for n in chain[:-1]]))
    return out


def visit_counts(trajectories) -> Counter:
    """Keyed by ``(tree_id, node_id)``: number of trajectories passing through the node."""
    counts: Counter = Counter()
    for traj in trajectories:
        for nid in traj.node_ids:
            counts[(traj.tree_id, nid)] += 1
    return counts


def export_trajectories(trajectories, path) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_json(), sort_keys=True) + "\n")
