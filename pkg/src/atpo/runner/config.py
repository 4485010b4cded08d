"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, get_type_hints

from ..tree import ConfigError

ALGORITHMS = ("atpo_u1", "atpo_u1u2", "treepo", "grpo", "ppo_mdp", "ppo_hmdp")
CRITIC_BASED = ("atpo_u1", "atpo_u1u2", "ppo_mdp", "ppo_hmdp")


@dataclass
class RunConfig:
    algorithm: str = "atpo_u1u2"
    seed: int = 0
    steps: int = 200
    batch_size: int = 8

    # tree expansion
    N: int = 4
    leaf_budget: int = 16
    tau: Optional[float] = None  # None: 0.5 for atpo_u1, 1.5 for atpo_u1u2
    alpha: Optional[float] = None  # None: 1.0 for atpo_u1, 0.3 for atpo_u1u2
    bypass_p: float = 0.10
    normalize_u1: bool = False
    zscore_window: int = 256

    # baselines
    grpo_group: int = 32
    chains_per_scenario: int = 4
    gae_lambda: float = 0.95

    # objective
    gamma: float = 1.0
    beta: float = 0.01
    eps: float = 0.2
    h: int = 4
    ratio_denominator: str = "reference"
    visit_downweight_policy: bool = True
    visit_downweight_value: bool = False
    epochs: int = 2
    optimizer: str = "adam"
    policy_lr: float = 3e-3
    critic_lr: float = 1e-2
    max_grad_norm: Optional[float] = None
    critic_warmup_steps: int = 5

    # model
    d: int = 32
    init_scale: float = 0.3
    sft_steps: int = 300
    sft_batch: int = 32
    sft_lr: float = 1e-2
    sft_answer_prob: float = 0.3
    sft_mode: str = "noisy_oracle"
    sft_noise: float = 0.3

    # environment
    turn_limit: int = 8
    max_macro_len: int = 4
    num_keys: int = 6
    num_relevant: int = 3
    num_options: int = 4
    key_space: int = 8
    values_per_key: int = 2
    question_types: int = 1
    train_scenarios: int = 2000
    eval_scenarios: int = 200
    scenario_file: Optional[str] = None

    # evaluation and output
    eval_every: int = 10
    eval_runs: int = 1
    eval_temperature: float = 1.0
    return_variance_window: int = 10
    checkpoint_every: int = 0
    out_dir: Optional[str] = None
    workers: int = 1

    def resolved(self) -> "RunConfig":
        """Copy with algorithm-dependent defaults filled in; validates."""
        cfg = dataclasses.replace(self)
        if cfg.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {cfg.algorithm!r}; choose from {ALGORITHMS}")
        if cfg.algorithm == "atpo_u1":
            cfg.alpha = 1.0
            cfg.tau = 0.5 if cfg.tau is None else cfg.tau
        elif cfg.algorithm == "atpo_u1u2":
            cfg.alpha = 0.3 if cfg.alpha is None else cfg.alpha
            cfg.tau = 1.5 if cfg.tau is None else cfg.tau
        elif cfg.algorithm == "treepo":
            cfg.N, cfg.tau, cfg.bypass_p, cfg.alpha = 2, -math.inf, 0.0, 1.0
        else:
            cfg.alpha = 1.0 if cfg.alpha is None else cfg.alpha
            cfg.tau = 0.0 if cfg.tau is None else cfg.tau
        if cfg.algorithm not in CRITIC_BASED:
            cfg.critic_warmup_steps = 0
        if not 0.0 <= cfg.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {cfg.alpha}")
        if not 0.0 <= cfg.bypass_p <= 1.0:
            raise ConfigError("bypass_p must be in [0, 1]")
        for name in ("N", "leaf_budget", "batch_size", "h", "turn_limit", "max_macro_len", "d", "epochs",
                     "eval_runs", "zscore_window", "chains_per_scenario"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if cfg.algorithm == "grpo" and cfg.grpo_group < 2:
            raise ConfigError("grpo_group must be >= 2")
        if cfg.eps <= 0 or cfg.beta < 0 or cfg.policy_lr <= 0 or cfg.critic_lr <= 0:
            raise ConfigError("need eps > 0, beta >= 0 and positive learning rates")
        if cfg.ratio_denominator not in ("reference", "behavior"):
            raise ConfigError(f"unknown ratio_denominator {cfg.ratio_denominator!r}")
        if cfg.sft_mode not in ("format", "noisy_oracle"):
            raise ConfigError(f"unknown sft_mode {cfg.sft_mode!r}")
        if not 0.0 <= cfg.sft_noise <= 1.0:
            raise ConfigError("sft_noise must be in [0, 1]")
        if cfg.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
        if cfg.steps < 0 or cfg.critic_warmup_steps < 0 or cfg.sft_steps < 0:
            raise ConfigError("steps, warmup and sft_steps must be >= 0")
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


def smoke_config(**overrides) -> RunConfig:
    """Desk-scale setup used by the learning smoke tests.

    Six fact keys, three relevant, four options, turn limit 8, leaf budget 16,
    PPO-style behaviour-policy ratios and a sampled evaluation every 10 steps.
    """
    base = dict(leaf_budget=16, ratio_denominator="behavior", eval_every=10, eval_scenarios=200, steps=400,
                num_keys=6, num_relevant=3, num_options=4, turn_limit=8)
    base.update(overrides)
    return RunConfig(**base)


def _coerce(name: str, raw: str, typ) -> object:
    text = raw.strip()
    optional = "Optional" in str(typ) or "None" in str(typ)
    if optional and text.lower() in ("none", "null", ""):
        return None
    base = str(typ)
    try:
        if "bool" in base:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if "int" in base:
            return int(text)
        if "float" in base:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return text


def parse_config(text: str) -> RunConfig:
    hints = get_type_hints(RunConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split(sep, 1))
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, hints[key])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
