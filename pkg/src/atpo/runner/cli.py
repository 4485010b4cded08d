"""Command-line entry point: ``atpo train|evaluate|sample-tree|flops``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import model as M
from ..env import DialogueEnv, ScenarioError, Vocabulary
from ..optim import NumericError
from ..tree import ConfigError, UncertaintyStats, grow_tree
from .config import load_config, parse_config
from .flops import ComputeProfile, summary
from .ingest import ingest_scenarios
from .report import emit_tree_report
from .train import build_setup, derive_seed, evaluate, make_learner, tree_config, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("atpo")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out

    def show(row):
        if row["eval_accuracy"] is not None and cfg.eval_every and (row["step"] + 1) % cfg.eval_every == 0:
            log.info("step %d turns %d eval %.3f", row["step"] + 1, row["generated_turns"], row["eval_accuracy"])

    result = train(cfg, on_row=show)
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"steps": len(result.metrics), "generated_turns": last.get("generated_turns", 0),
                      "eval_accuracy": last.get("eval_accuracy"), "out_dir": cfg.out_dir}))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    blocks, meta = M.load_checkpoint(args.checkpoint)
    if "policy" not in blocks:
        raise ConfigError(f"{args.checkpoint}: no policy parameters")
    cfg = parse_config(meta.get("config", "")).resolved()
    vocab = Vocabulary(**meta["vocab"]) if "vocab" in meta else Vocabulary(cfg.key_space, cfg.values_per_key,
                                                                           cfg.num_options)
    env = DialogueEnv(vocab, cfg.turn_limit, cfg.max_macro_len)
    scenarios = ingest_scenarios(args.scenarios)
    for s in scenarios:
        env.check_scenario(s)
    mean, std = evaluate(blocks["policy"], scenarios, env, args.runs, args.temperature, args.seed)
    print(json.dumps({"accuracy_mean": mean, "accuracy_std": std, "runs": args.runs,
                      "scenarios": len(scenarios)}))
    return EXIT_OK


def _cmd_sample_tree(args) -> int:
    cfg = load_config(args.config).resolved()
    setup = build_setup(cfg)
    learner = make_learner(cfg, setup)
    agent = M.TokenPolicy(learner.policy, setup.env, 1.0)
    critic = M.Critic(learner.critic, cfg.h) if learner.critic is not None else None
    scenario = setup.train[args.seed % len(setup.train)]
    if critic is None:
        from .train import NullCritic
        critic = NullCritic()
    tree = grow_tree(scenario, agent, critic, setup.env, tree_config(cfg), derive_seed(cfg.seed, args.seed),
                     UncertaintyStats(cfg.zscore_window))
    doc = tree.to_json()
    doc["report"] = emit_tree_report(tree, gamma=cfg.gamma)
    Path(args.out).write_text(json.dumps(doc, sort_keys=True))
    print(json.dumps({"out": args.out, "nodes": len(tree.nodes), "leaves": len(tree.leaves()),
                      "generated_turns": tree.generated_turns}))
    return EXIT_OK


def _cmd_flops(args) -> int:
    profile = ComputeProfile(phi=args.phi, theta=args.theta, x=args.x, y=args.y, N=args.n)
    print(json.dumps(summary(profile)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on a scenario file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("sample-tree", help="grow one tree with the warm-started policy and dump it as JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample_tree)

    p = sub.add_parser("flops", help="prefix-sharing compute model")
    p.add_argument("--phi", type=int, required=True)
    p.add_argument("--theta", type=int, required=True)
    p.add_argument("--x", type=int, required=True)
    p.add_argument("--y", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(fn=_cmd_flops)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ScenarioError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, M.NonFiniteGradientError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
