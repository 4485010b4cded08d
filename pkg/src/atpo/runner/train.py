"""Training and evaluation loops for every algorithm variant."""
from __future__ import annotations

import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import model as M
from ..credit import Trajectory, decompose, traceback, visit_counts
from ..env import DialogueEnv, Scenario, ScenarioParams, Vocabulary, effective_question_rate, generate_scenarios
from ..optim import (Learner, NumericError, PolicyItem, UpdateConfig, UpdateReport, apply_update, atpo_update,
                     grpo_update, nll_loss, ppo_hmdp_update, ppo_mdp_update, treepo_update)
from ..tree import DialogueTree, TreeConfig, UncertaintyStats, grow_chain, grow_tree
from .config import CRITIC_BASED, RunConfig
from .ingest import ingest_scenarios
from .report import branching_histogram, merge_histograms, returns_by_depth

log = logging.getLogger(__name__)


class NullCritic:
    """Stand-in for critic-free methods: every state is worth 0."""

    calls = 0

    def value(self, state) -> float:
        return 0.0


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class Setup:
    vocab: Vocabulary
    env: DialogueEnv
    train: list[Scenario]
    eval: list[Scenario]


def build_setup(cfg: RunConfig) -> Setup:
    vocab = Vocabulary(cfg.key_space, cfg.values_per_key, cfg.num_options)
    env = DialogueEnv(vocab, cfg.turn_limit, cfg.max_macro_len)
    if cfg.scenario_file:
        scenarios = ingest_scenarios(cfg.scenario_file)
        n_eval = min(cfg.eval_scenarios, len(scenarios) // 5)
        train, evals = scenarios[n_eval:], scenarios[:n_eval]
    else:
        params = ScenarioParams(num_keys=cfg.num_keys, num_relevant=cfg.num_relevant, num_options=cfg.num_options,
                                key_space=cfg.key_space, values_per_key=cfg.values_per_key,
                                question_types=cfg.question_types)
        train = generate_scenarios(derive_seed(cfg.seed, 1), params, count=cfg.train_scenarios)
        evals = generate_scenarios(derive_seed(cfg.seed, 2), params, count=cfg.eval_scenarios)
    for s in train + evals:
        env.check_scenario(s)
    return Setup(vocab, env, train, evals)


# -- behaviour-cloning warm start -------------------------------------------

def demonstration(env: DialogueEnv, scenario: Scenario, rng: np.random.Generator, answer_prob: float,
                  mode: str = "format", noise: float = 0.5) -> list[tuple]:
    """Well-formed dialogue used for the warm start.

    ``format``: asks and answers with content chosen uniformly at random.
    ``noisy_oracle``: the scripted oracle, except that each turn is replaced
    by a random format-valid turn with probability ``noise``.
    """
    state = env.reset(scenario)
    pairs = []
    oracle = M.OraclePolicy(env)
    while not state.terminal:
        if mode == "noisy_oracle" and rng.random() >= noise:
            action = oracle.act(state)
        elif rng.random() < answer_prob:
            action = env.answer(int(rng.integers(env.vocab.num_options)))
        else:
            action = env.ask(int(rng.integers(env.vocab.key_space)))
        pairs.append((state.tokens, action.tokens))
        state, _, _ = env.step(state, action)
    return pairs


def sft_warmstart(params: M.Params, setup: Setup, cfg: RunConfig) -> M.Params:
    if cfg.sft_steps == 0:
        return params
    from ..optim import OptimizerState
    opt = OptimizerState(kind="adam")
    rng = np.random.default_rng(derive_seed(cfg.seed, 3))
    for _ in range(cfg.sft_steps):
        pairs = []
        for idx in rng.integers(len(setup.train), size=cfg.sft_batch):
            pairs.extend(demonstration(setup.env, setup.train[idx], rng, cfg.sft_answer_prob, cfg.sft_mode,
                                       cfg.sft_noise))
        n_tok = sum(len(a) for _, a in pairs)
        items = [PolicyItem(s, a, np.zeros(len(a)), np.zeros(len(a)), 1.0 / n_tok) for s, a in pairs]
        _, grads = nll_loss(items, params)
        params = apply_update(params, grads, cfg.sft_lr, opt)
    return params


# -- evaluation --------------------------------------------------------------

def run_episode(agent, env: DialogueEnv, scenario: Scenario, rng) -> tuple[float, int]:
    state = env.reset(scenario)
    total, turns = 0.0, 0
    while not state.terminal:
        state, r, _ = env.step(state, agent.act(state, rng))
        total += r
        turns += 1
    return total, turns


def evaluate(policy, scenarios, env: DialogueEnv, runs: int = 5, temperature: float = 1.0,
             seed: int = 0) -> tuple[float, float]:
    """Accuracy (fraction of episodes answered correctly) as mean and std over ``runs``.

    ``policy`` is either policy parameters or any object with ``act(state, rng)``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    agent = M.TokenPolicy(policy, env, temperature) if isinstance(policy, dict) else policy
    accs = []
    for run in range(runs):
        rng = np.random.default_rng(derive_seed(seed, run))
        correct = 0
        for scenario in scenarios:
            total, _ = run_episode(agent, env, scenario, rng)
            correct += total > 0
        accs.append(correct / max(len(scenarios), 1))
    return float(np.mean(accs)), float(np.std(accs))


# -- sampling ------------------------------------------------------------------

@dataclass
class Batch:
    trees: list[DialogueTree]
    trajectories: list[Trajectory]
    groups: list[list[Trajectory]]
    generated_turns: int
    visits: object = None


def tree_config(cfg: RunConfig) -> TreeConfig:
    return TreeConfig(N=cfg.N, tau=cfg.tau, alpha=cfg.alpha, bypass_p=cfg.bypass_p,
                      leaf_budget=cfg.leaf_budget, gamma=cfg.gamma, normalize_u1=cfg.normalize_u1)


def sample_batch(cfg: RunConfig, setup: Setup, learner: Learner, stats: UncertaintyStats, step: int,
                 scenarios: list[Scenario]) -> Batch:
    agent = M.TokenPolicy(learner.policy, setup.env, 1.0)
    tcfg = tree_config(cfg)
    tree_algo = cfg.algorithm in ("atpo_u1", "atpo_u1u2", "treepo")

    def job(i: int):
        critic = M.Critic(learner.critic, cfg.h) if learner.critic is not None else NullCritic()
        scenario = scenarios[i]
        if tree_algo:
            return [grow_tree(scenario, agent, critic, setup.env, tcfg, derive_seed(cfg.seed, step, i),
                              stats.copy())]
        reps = cfg.grpo_group if cfg.algorithm == "grpo" else cfg.chains_per_scenario
        return [grow_chain(scenario, agent, critic, setup.env, derive_seed(cfg.seed, step, i, c))
                for c in range(reps)]

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            per_scenario = list(pool.map(job, range(len(scenarios))))
    else:
        per_scenario = [job(i) for i in range(len(scenarios))]

    trees, trajs, groups = [], [], []
    for group_trees in per_scenario:
        group = []
        for tree in group_trees:
            tid = len(trees)
            trees.append(tree)
            stats.extend(tree.u2_samples)
            if tree.u1_samples:
                from ..tree import _u1_stats
                _u1_stats(stats).extend(tree.u1_samples)
            targets = traceback(tree, cfg.gamma)
            tree.targets = targets
            group.extend(decompose(tree, targets, cfg.gamma, tree_id=tid,
                                   use_targets=cfg.algorithm == "treepo"))
        groups.append(group)
        trajs.extend(group)
    return Batch(trees, trajs, groups, sum(t.generated_turns for t in trees), visit_counts(trajs))


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    config: RunConfig
    learner: Learner
    metrics: list[dict] = field(default_factory=list)
    initial_policy: Optional[M.Params] = None


def make_learner(cfg: RunConfig, setup: Setup) -> Learner:
    policy = M.init_policy(setup.vocab.size, cfg.d, derive_seed(cfg.seed, 4), cfg.init_scale)
    policy = sft_warmstart(policy, setup, cfg)
    critic = M.init_critic(policy, derive_seed(cfg.seed, 5)) if cfg.algorithm in CRITIC_BASED else None
    ucfg = UpdateConfig(eps=cfg.eps, beta=cfg.beta, policy_lr=cfg.policy_lr, critic_lr=cfg.critic_lr,
                        visit_downweight_policy=cfg.visit_downweight_policy,
                        visit_downweight_value=cfg.visit_downweight_value,
                        critic_warmup_steps=cfg.critic_warmup_steps, ratio_denominator=cfg.ratio_denominator,
                        optimizer=cfg.optimizer, epochs=cfg.epochs, h=cfg.h, gamma=cfg.gamma,
                        gae_lambda=cfg.gae_lambda, max_grad_norm=cfg.max_grad_norm)
    return Learner(policy=policy, reference=M.copy_params(policy), critic=critic, cfg=ucfg)


def update(cfg: RunConfig, learner: Learner, batch: Batch, warmup: bool) -> UpdateReport:
    algo = cfg.algorithm
    if algo in ("atpo_u1", "atpo_u1u2"):
        return atpo_update(learner, batch.trajectories, batch.visits, warmup)
    if algo == "treepo":
        return treepo_update(learner, batch.trajectories, batch.visits)
    if algo == "ppo_hmdp":
        return ppo_hmdp_update(learner, batch.trajectories, warmup)
    if algo == "ppo_mdp":
        return ppo_mdp_update(learner, batch.trajectories, warmup)
    return grpo_update(learner, batch.groups)


def _round(x):
    return None if x is None else float(f"{x:.10g}")


def checkpoint_blocks(learner: Learner) -> dict:
    blocks = {"policy": learner.policy, "reference": learner.reference}
    if learner.critic is not None:
        blocks["critic"] = learner.critic
    return blocks


def train(config: RunConfig, on_row: Optional[Callable[[dict], None]] = None,
          stop_when: Optional[Callable[[dict], bool]] = None) -> TrainResult:
    """Run ``config.steps`` sample/update steps; one metrics row per step.

    ``stop_when`` may end the run early after any row.
    """
    cfg = config.resolved()
    setup = build_setup(cfg)
    learner = make_learner(cfg, setup)
    result = TrainResult(cfg, learner, initial_policy=M.copy_params(learner.policy))
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    metrics_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
    stats = UncertaintyStats(cfg.zscore_window)
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, 6))
    recent_var: deque = deque(maxlen=cfg.return_variance_window)
    cumulative_turns = 0
    last_eval = (None, None)
    try:
        for step in range(cfg.steps):
            idx = batch_rng.integers(len(setup.train), size=cfg.batch_size)
            scenarios = [setup.train[i] for i in idx]
            batch = sample_batch(cfg, setup, learner, stats, step, scenarios)
            cumulative_turns += batch.generated_turns
            warmup = step < cfg.critic_warmup_steps
            try:
                rep = update(cfg, learner, batch, warmup)
            except (NumericError, M.NonFiniteGradientError) as exc:
                if out_dir:
                    M.save_checkpoint(out_dir / "diagnostic.json", checkpoint_blocks(learner),
                                      {"step": step, "error": str(exc)})
                raise NumericError(f"step {step}: {exc}") from exc
            if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
                last_eval = evaluate(learner.policy, setup.eval, setup.env, cfg.eval_runs,
                                     cfg.eval_temperature, derive_seed(cfg.seed, 7))
            returns = [t.ret for t in batch.trajectories]
            recent_var.append(float(np.var(returns)))
            hist = merge_histograms(branching_histogram(t) for t in batch.trees)
            depth_rows = [returns_by_depth(t, t.targets) for t in batch.trees]
            row = {
                "step": step,
                "generated_turns": cumulative_turns,
                "eval_accuracy": _round(last_eval[0]),
                "eval_accuracy_std": _round(last_eval[1]),
                "mean_return": _round(float(np.mean(returns))),
                "return_variance": _round(float(np.mean(recent_var))),
                "batch_return_variance": _round(recent_var[-1]),
                "critic_loss": _round(rep.critic_loss),
                "policy_loss": _round(rep.policy_loss),
                "entropy": _round(rep.mean_entropy),
                "clip_fraction": _round(rep.clip_fraction),
                "mean_kl": _round(rep.mean_kl),
                "effective_question_rate": _round(effective_question_rate(batch.trajectories)),
                "num_trajectories": len(batch.trajectories),
                "value_calls": sum(t.value_calls for t in batch.trees),
                "policy_updated": rep.policy_updated,
                "branching_by_depth": hist,
                "returns_by_depth": _merge_depth_rows(depth_rows),
            }
            result.metrics.append(row)
            if metrics_fh:
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_fh.flush()
            if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                M.save_checkpoint(out_dir / f"checkpoint_{step + 1:05d}.json", checkpoint_blocks(learner),
                                  {"step": step + 1, "config": cfg.to_text()})
            if on_row:
                on_row(row)
            if stop_when and stop_when(row):
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir:
        M.save_checkpoint(out_dir / "final.json", checkpoint_blocks(learner),
                          {"step": len(result.metrics), "config": cfg.to_text(), "vocab": setup.vocab.spec()})
    return result


def _merge_depth_rows(rows_per_tree: list[list[dict]]) -> list[dict]:
    acc: dict[int, list[tuple]] = {}
    for rows in rows_per_tree:
        for r in rows:
            acc.setdefault(r["depth"], []).append((r["count"], r["mean"], r["var"]))
    out = []
    for depth, parts in sorted(acc.items()):
        n = sum(c for c, _, _ in parts)
        mean = sum(c * m for c, m, _ in parts) / n
        var = sum(c * (v + (m - mean) ** 2) for c, m, v in parts) / n
        out.append({"depth": depth, "count": n, "mean": _round(mean), "var": _round(var)})
    return out
