"""Policy and critic objectives, baseline updates, and parameter application.

Every objective is assembled from ``PolicyItem``/``StateItem`` records: one
per distinct (state, action) edge or state, carrying the summed weight of all
trajectories that pass through it. Shared prefixes in a tree are therefore
differentiated once.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as M
from .credit import Trajectory


class NumericError(FloatingPointError):
    pass


@dataclass
class UpdateConfig:
    eps: float = 0.2
    beta: float = 0.01
    policy_lr: float = 1e-6
    critic_lr: float = 1e-5
    visit_downweight_policy: bool = True
    visit_downweight_value: bool = False
    critic_warmup_steps: int = 5
    ratio_denominator: str = "reference"  # "reference" (as printed) or "behavior"
    optimizer: str = "sgd"
    epochs: int = 1
    h: int = 4
    gamma: float = 1.0
    gae_lambda: float = 0.95
    max_grad_norm: Optional[float] = None

    def validate(self) -> "UpdateConfig":
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.policy_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.ratio_denominator not in ("reference", "behavior"):
            raise ValueError(f"unknown ratio_denominator {self.ratio_denominator!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        return self


@dataclass
class UpdateReport:
    policy_loss: float = 0.0
    critic_loss: float = 0.0
    mean_kl: float = 0.0
    clip_fraction: float = 0.0
    mean_entropy: float = 0.0
    policy_grad_norm: float = 0.0
    critic_grad_norm: float = 0.0
    policy_updated: bool = False

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PolicyItem:
    state_tokens: tuple
    action_tokens: tuple
    behavior_logprobs: np.ndarray
    advantages: np.ndarray  # one per sampled token
    weight: float
    ref_logp: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.behavior_logprobs)


@dataclass
class StateItem:
    tokens: tuple
    target: float
    weight: float


# -- item builders -----------------------------------------------------------

def _visit(visit_counts, traj: Trajectory, node_id: int) -> int:
    key = (traj.tree_id, node_id)
    if key not in visit_counts:
        raise KeyError(f"no visit count for node {node_id} of tree {traj.tree_id}")
    return visit_counts[key]


def turn_items(trajectories: Sequence[Trajectory], visit_counts=None, downweight: bool = True) -> list[PolicyItem]:
    """Per-edge items with the turn-level weight ``sum_j 1 / (M K_j C L)``."""
    M_ = len(trajectories)
    acc: dict = {}
    for traj in trajectories:
        for turn in traj.turns:
            n = turn.action.n_sampled
            if n == 0:
                continue
            C = _visit(visit_counts, traj, turn.node_id) if downweight else 1
            w = 1.0 / (M_ * traj.K * C * n)
            key = (traj.tree_id, turn.node_id, turn.child_id)
            if key in acc:
                acc[key].weight += w
            else:
                acc[key] = PolicyItem(turn.state.tokens, turn.action.tokens,
                                      np.asarray(turn.action.logprobs, dtype=float),
                                      np.full(n, float(turn.advantage)), w)
    return list(acc.values())


def trajectory_items(trajectories: Sequence[Trajectory], advantages: Sequence[float]) -> list[PolicyItem]:
    """One advantage per trajectory, every sampled token weighted ``1 / (M L_j)``."""
    M_ = len(trajectories)
    items = []
    for traj, adv in zip(trajectories, advantages):
        L = sum(t.action.n_sampled for t in traj.turns)
        for turn in traj.turns:
            n = turn.action.n_sampled
            if n == 0:
                continue
            items.append(PolicyItem(turn.state.tokens, turn.action.tokens,
                                    np.asarray(turn.action.logprobs, dtype=float),
                                    np.full(n, float(adv)), 1.0 / (M_ * L)))
    return items


def state_items(trajectories: Sequence[Trajectory], visit_counts=None, downweight: bool = False) -> list[StateItem]:
    """Critic regression items: weight ``sum_j 1 / (M K_j)`` (optionally also ``/ C``)."""
    M_ = len(trajectories)
    acc: dict = {}
    for traj in trajectories:
        for turn, target in zip(traj.turns, traj.targets):
            C = _visit(visit_counts, traj, turn.node_id) if downweight else 1
            w = 1.0 / (M_ * traj.K * C)
            key = (traj.tree_id, turn.node_id)
            if key in acc:
                acc[key].weight += w
            else:
                acc[key] = StateItem(turn.state.tokens, float(target), w)
    return list(acc.values())


# -- objectives --------------------------------------------------------------

def _action_rows(item: PolicyItem) -> np.ndarray:
    start = len(item.state_tokens) - 1
    return np.arange(start, start + item.n)


def attach_reference(items: Sequence[PolicyItem], ref_params: M.Params) -> None:
    for item in items:
        if item.ref_logp is None:
            logits, _ = M.policy_logits(ref_params, item.state_tokens + item.action_tokens)
            item.ref_logp = M.log_softmax(logits[_action_rows(item)])


def clipped_policy_loss(items: Sequence[PolicyItem], params: M.Params, ref_params: M.Params,
                        cfg: UpdateConfig) -> tuple[float, M.Params, dict]:
    """``-(sum_w min(rho A, clip(rho) A)) + beta * mean KL(pi || pi_ref)`` and its exact gradient."""
    attach_reference(items, ref_params)
    grads = M.zeros_like(params)
    n_tok = sum(item.n for item in items)
    if n_tok == 0:
        return 0.0, grads, {"clip_fraction": 0.0, "mean_kl": 0.0, "mean_entropy": 0.0}
    objective = kl_sum = ent_sum = 0.0
    clipped = 0
    lo, hi = 1.0 - cfg.eps, 1.0 + cfg.eps
    for item in items:
        seq = item.state_tokens + item.action_tokens
        logits, cache = M.policy_logits(params, seq)
        rows = _action_rows(item)
        logp = M.log_softmax(logits[rows])
        p = np.exp(logp)
        toks = np.asarray(item.action_tokens[:item.n])
        idx = np.arange(item.n)
        new = logp[idx, toks]
        old = item.ref_logp[idx, toks] if cfg.ratio_denominator == "reference" else item.behavior_logprobs
        ratio = np.exp(new - old)
        A = item.advantages
        unclipped = ratio * A
        clip_val = np.clip(ratio, lo, hi) * A
        surr = np.minimum(unclipped, clip_val)
        active = (clip_val < unclipped) & ((ratio < lo) | (ratio > hi))
        clipped += int(active.sum())
        objective += item.weight * surr.sum()
        dsurr_dlogp = np.where(active, 0.0, ratio * A)
        onehot = np.zeros_like(p)
        onehot[idx, toks] = 1.0
        dlogits_rows = -(item.weight * dsurr_dlogp)[:, None] * (onehot - p)
        kl = (p * (logp - item.ref_logp)).sum(axis=1)
        kl_sum += kl.sum()
        ent_sum += float(-(p * logp).sum())
        if cfg.beta:
            dlogits_rows += (cfg.beta / n_tok) * p * (logp - item.ref_logp - kl[:, None])
        dlogits = np.zeros_like(logits)
        dlogits[rows] = dlogits_rows
        M.policy_backward(params, cache, dlogits, grads)
    mean_kl = kl_sum / n_tok
    loss = -objective + cfg.beta * mean_kl
    stats = {"clip_fraction": clipped / n_tok, "mean_kl": mean_kl, "mean_entropy": ent_sum / n_tok}
    return float(loss), M.check_finite(grads), stats


def atpo_policy_loss(trajectories: Sequence[Trajectory], params: M.Params, ref_params: M.Params,
                     visit_counts, cfg: UpdateConfig) -> tuple[float, M.Params, dict]:
    items = turn_items(trajectories, visit_counts, cfg.visit_downweight_policy)
    return clipped_policy_loss(items, params, ref_params, cfg)


def value_regression_loss(items: Sequence[StateItem], params: M.Params, h: int) -> tuple[float, M.Params]:
    """``sum_w (1/h) sum over the final h positions of 0.5 (V - target)^2``."""
    grads = M.zeros_like(params)
    loss = 0.0
    for item in items:
        preds, cache = M.value_predictions(params, item.tokens, h)
        err = preds - item.target
        loss += item.weight * 0.5 * float(err @ err) / h
        M.value_backward(params, cache, item.weight * err / h, grads)
    return loss, M.check_finite(grads)


def critic_loss(trajectories: Sequence[Trajectory], params: M.Params, visit_counts,
                cfg: UpdateConfig) -> tuple[float, M.Params]:
    items = state_items(trajectories, visit_counts, cfg.visit_downweight_value)
    return value_regression_loss(items, params, cfg.h)


# -- advantages for baselines -----------------------------------------------

def group_advantages(returns: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("group-relative advantages need at least 2 rollouts")
    return (r - r.mean()) / (r.std() + eps)


def gae(rewards: Sequence[float], values: Sequence[float], gamma: float = 1.0, lam: float = 0.95) -> np.ndarray:
    """Generalised advantage estimates for one episode; the value after the last step is 0."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(rewards.size - 1, -1, -1):
        nxt = values[t + 1] if t + 1 < values.size else 0.0
        delta = rewards[t] + gamma * nxt - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def discounted_returns(rewards: Sequence[float], gamma: float = 1.0) -> np.ndarray:
    out = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def token_episode(traj: Trajectory, critic_params: M.Params) -> tuple[list, np.ndarray, np.ndarray]:
    """Per-token (turn index, token offset) list, token rewards and token values for one trajectory."""
    index, rewards, values = [], [], []
    for k, turn in enumerate(traj.turns):
        n = turn.action.n_sampled
        if n == 0:
            continue
        vals, _ = M.all_position_values(critic_params, turn.state.tokens + turn.action.tokens)
        start = len(turn.state.tokens) - 1
        for t in range(n):
            index.append((k, t))
            rewards.append(turn.reward if t == n - 1 else 0.0)
            values.append(vals[start + t])
    return index, np.asarray(rewards), np.asarray(values)


def token_items(trajectories: Sequence[Trajectory], critic_params: M.Params, gamma: float,
                lam: float) -> tuple[list[PolicyItem], list[tuple]]:
    """Token-level GAE advantages (policy items) and return targets (critic rows)."""
    M_ = len(trajectories)
    items, value_rows = [], []
    for traj in trajectories:
        index, rewards, values = token_episode(traj, critic_params)
        if not index:
            continue
        adv = gae(rewards, values, gamma, lam)
        rets = discounted_returns(rewards, gamma)
        L = len(index)
        per_turn = defaultdict(list)
        for (k, t), a, g in zip(index, adv, rets):
            per_turn[k].append((a, g))
        for k, rows in per_turn.items():
            turn = traj.turns[k]
            items.append(PolicyItem(turn.state.tokens, turn.action.tokens,
                                    np.asarray(turn.action.logprobs, dtype=float),
                                    np.asarray([a for a, _ in rows]), 1.0 / (M_ * L)))
            value_rows.append((turn.state.tokens + turn.action.tokens, len(turn.state.tokens) - 1,
                               np.asarray([g for _, g in rows]), 1.0 / (M_ * L)))
    return items, value_rows


def token_value_loss(rows, params: M.Params) -> tuple[float, M.Params]:
    grads = M.zeros_like(params)
    loss = 0.0
    for seq, start, targets, w in rows:
        vals, cache = M.all_position_values(params, seq)
        sl = slice(start, start + targets.size)
        err = vals[sl] - targets
        loss += w * 0.5 * float(err @ err)
        dv = np.zeros_like(vals)
        dv[sl] = w * err
        M.all_position_values_backward(params, cache, dv, grads)
    return loss, M.check_finite(grads)


# -- parameter application ----------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def grad_norm(grads: M.Params) -> float:
    # scaled by the largest entry so huge but finite gradients do not overflow
    peak = max((float(np.max(np.abs(g))) for g in grads.values() if g.size), default=0.0)
    if peak == 0.0 or not np.isfinite(peak):
        return peak
    return peak * float(np.sqrt(sum(float(((g / peak) ** 2).sum()) for g in grads.values())))


def apply_update(params: M.Params, grads: M.Params, lr: float, state: Optional[OptimizerState] = None,
                 max_grad_norm: Optional[float] = None) -> M.Params:
    """One optimizer step; returns new parameter arrays and advances ``state``."""
    state = state or OptimizerState()
    norm = grad_norm(grads)
    if not np.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericError(f"non-finite gradient in blocks {bad}")
    scale = 1.0
    if max_grad_norm is not None and norm > max_grad_norm:
        scale = max_grad_norm / norm
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported below
        new = _step(params, grads, lr, scale, state)
    for k, p in new.items():
        if not np.all(np.isfinite(p)):
            raise NumericError(f"update produced non-finite values in block {k!r} (grad norm {norm:.3g})")
    return new


def _step(params: M.Params, grads: M.Params, lr: float, scale: float, state: OptimizerState) -> M.Params:
    new = {}
    if state.kind == "sgd":
        for k, p in params.items():
            new[k] = p - lr * scale * grads[k]
    elif state.kind == "adam":
        state.t += 1
        b1, b2 = state.beta1, state.beta2
        for k, p in params.items():
            g = scale * grads[k]
            m = state.m.get(k, np.zeros_like(p)) * b1 + (1 - b1) * g
            v = state.v.get(k, np.zeros_like(p)) * b2 + (1 - b2) * g * g
            state.m[k], state.v[k] = m, v
            mhat = m / (1 - b1 ** state.t)
            vhat = v / (1 - b2 ** state.t)
            new[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")
    return new


# -- learner and update rules -------------------------------------------------

@dataclass
class Learner:
    policy: M.Params
    reference: M.Params
    critic: Optional[M.Params]
    cfg: UpdateConfig
    policy_opt: OptimizerState = None
    critic_opt: OptimizerState = None

    def __post_init__(self):
        self.cfg.validate()
        if self.policy_opt is None:
            self.policy_opt = OptimizerState(kind=self.cfg.optimizer)
        if self.critic_opt is None:
            self.critic_opt = OptimizerState(kind=self.cfg.optimizer)


def _policy_step(learner: Learner, items: Sequence[PolicyItem], report: UpdateReport) -> None:
    cfg = learner.cfg
    clip, kl, ent, loss, gn = [], [], [], [], []
    for _ in range(cfg.epochs):
        l, g, stats = clipped_policy_loss(items, learner.policy, learner.reference, cfg)
        gn.append(grad_norm(g))
        learner.policy = apply_update(learner.policy, g, cfg.policy_lr, learner.policy_opt, cfg.max_grad_norm)
        loss.append(l)
        clip.append(stats["clip_fraction"])
        kl.append(stats["mean_kl"])
        ent.append(stats["mean_entropy"])
    report.policy_loss = float(np.mean(loss))
    report.clip_fraction = float(np.mean(clip))
    report.mean_kl = float(np.mean(kl))
    report.mean_entropy = float(np.mean(ent))
    report.policy_grad_norm = float(np.mean(gn))
    report.policy_updated = True


def _critic_step(learner: Learner, loss_fn, report: UpdateReport) -> None:
    cfg = learner.cfg
    losses, gn = [], []
    for _ in range(cfg.epochs):
        l, g = loss_fn(learner.critic)
        gn.append(grad_norm(g))
        learner.critic = apply_update(learner.critic, g, cfg.critic_lr, learner.critic_opt, cfg.max_grad_norm)
        losses.append(l)
    report.critic_loss = float(losses[0])
    report.critic_grad_norm = float(np.mean(gn))


def _policy_stats_only(learner: Learner, items, report: UpdateReport) -> None:
    _, _, stats = clipped_policy_loss(items, learner.policy, learner.reference, learner.cfg)
    report.clip_fraction = stats["clip_fraction"]
    report.mean_kl = stats["mean_kl"]
    report.mean_entropy = stats["mean_entropy"]


def atpo_update(learner: Learner, trajectories: Sequence[Trajectory], visit_counts,
                warmup: bool = False) -> UpdateReport:
    """Visit-weighted policy step (skipped during warmup) and final-h critic regression."""
    cfg = learner.cfg
    report = UpdateReport()
    items = turn_items(trajectories, visit_counts, cfg.visit_downweight_policy)
    if warmup:
        _policy_stats_only(learner, items, report)
    else:
        _policy_step(learner, items, report)
    sitems = state_items(trajectories, visit_counts, cfg.visit_downweight_value)
    _critic_step(learner, lambda p: value_regression_loss(sitems, p, cfg.h), report)
    return report


def ppo_hmdp_update(learner: Learner, trajectories: Sequence[Trajectory], warmup: bool = False) -> UpdateReport:
    """Chains only: turn-level TD advantages, critic on per-turn Monte Carlo returns."""
    from .credit import visit_counts as _vc
    return atpo_update(learner, trajectories, _vc(trajectories), warmup)


def treepo_update(learner: Learner, trajectories: Sequence[Trajectory], visit_counts) -> UpdateReport:
    """Critic-free: trajectories must carry target-based advantages (``decompose(use_targets=True)``)."""
    report = UpdateReport()
    items = turn_items(trajectories, visit_counts, learner.cfg.visit_downweight_policy)
    _policy_step(learner, items, report)
    return report


def grpo_update(learner: Learner, groups: Sequence[Sequence[Trajectory]]) -> UpdateReport:
    """Group-normalised trajectory advantage shared by every token of the trajectory."""
    trajs, advs = [], []
    for group in groups:
        if len(group) < 2:
            raise ValueError("GRPO needs groups of at least 2 rollouts")
        advs.extend(group_advantages([t.ret for t in group]))
        trajs.extend(group)
    report = UpdateReport()
    _policy_step(learner, trajectory_items(trajs, advs), report)
    return report


def ppo_mdp_update(learner: Learner, trajectories: Sequence[Trajectory], warmup: bool = False) -> UpdateReport:
    """Token-level critic, GAE advantages per token, token value regression."""
    cfg = learner.cfg
    report = UpdateReport()
    items, rows = token_items(trajectories, learner.critic, cfg.gamma, cfg.gae_lambda)
    if warmup:
        _policy_stats_only(learner, items, report)
    else:
        _policy_step(learner, items, report)
    _critic_step(learner, lambda p: token_value_loss(rows, p), report)
    return report


def nll_loss(items: Sequence[PolicyItem], params: M.Params) -> tuple[float, M.Params]:
    """Weighted negative log-likelihood of the item tokens (behaviour cloning)."""
    grads = M.zeros_like(params)
    loss = 0.0
    for item in items:
        logits, cache = M.policy_logits(params, item.state_tokens + item.action_tokens)
        rows = _action_rows(item)
        logp = M.log_softmax(logits[rows])
        idx = np.arange(item.n)
        toks = np.asarray(item.action_tokens[:item.n])
        loss -= item.weight * float(logp[idx, toks].sum())
        onehot = np.zeros_like(logp)
        onehot[idx, toks] = 1.0
        dlogits = np.zeros_like(logits)
        dlogits[rows] = -item.weight * (onehot - np.exp(logp))
        M.policy_backward(params, cache, dlogits, grads)
    return loss, M.check_finite(grads)
