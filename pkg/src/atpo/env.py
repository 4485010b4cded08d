"""Hidden-facts quiz environment.

A scenario hides a handful of atomic facts. The assistant asks for facts one
key at a time and eventually commits to one of the answer options. Everything
is symbolic: one token per grammar symbol.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

REWARD_CORRECT = 3.0
REWARD_INCORRECT = 0.0
REWARD_INVALID = -1.0

ANSWER_RULES = ("sum_mod", "given")
TERMINAL_REASONS = ("answered", "invalid_format", "turn_limit")


class ScenarioError(ValueError):
    """A scenario violates one of its invariants."""


class EnvUsageError(RuntimeError):
    pass


class Vocabulary:
    """Dense token ids for the action grammar.

    Layout: BOS, ASK, ANSWER, EOT, CANNOT_ANSWER, then ``key_space`` key
    tokens, ``key_space * values_per_key`` key-scoped value tokens and
    ``num_options`` option tokens.
    """

    BOS = 0
    ASK = 1
    ANSWER = 2
    EOT = 3
    CANNOT_ANSWER = 4
    _N_SPECIAL = 5

    def __init__(self, key_space: int = 8, values_per_key: int = 2, num_options: int = 4):
        if key_space < 1 or values_per_key < 1 or num_options < 2:
            raise ValueError("vocabulary needs key_space >= 1, values_per_key >= 1, num_options >= 2")
        self.key_space = key_space
        self.values_per_key = values_per_key
        self.num_options = num_options
        self._key0 = self._N_SPECIAL
        self._val0 = self._key0 + key_space
        self._opt0 = self._val0 + key_space * values_per_key
        self.size = self._opt0 + num_options

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.spec() == other.spec()

    def spec(self) -> dict:
        return {"key_space": self.key_space, "values_per_key": self.values_per_key,
                "num_options": self.num_options}

    def key_token(self, key: int) -> int:
        if not 0 <= key < self.key_space:
            raise ValueError(f"key {key} outside key space {self.key_space}")
        return self._key0 + key

    def value_token(self, key: int, value: int) -> int:
        if not 0 <= value < self.values_per_key:
            raise ValueError(f"value {value} outside 0..{self.values_per_key - 1}")
        self.key_token(key)
        return self._val0 + key * self.values_per_key + value

    def option_token(self, option: int) -> int:
        if not 0 <= option < self.num_options:
            raise ValueError(f"option {option} outside 0..{self.num_options - 1}")
        return self._opt0 + option

    def token_key(self, token: int) -> Optional[int]:
        if self._key0 <= token < self._val0:
            return token - self._key0
        return None

    def token_option(self, token: int) -> Optional[int]:
        if self._opt0 <= token < self.size:
            return token - self._opt0
        return None

    def token_value(self, token: int) -> Optional[tuple[int, int]]:
        if self._val0 <= token < self._opt0:
            return divmod(token - self._val0, self.values_per_key)
        return None

    def describe(self, token: int) -> str:
        names = {self.BOS: "BOS", self.ASK: "ASK", self.ANSWER: "ANSWER", self.EOT: "EOT",
                 self.CANNOT_ANSWER: "CANNOT_ANSWER"}
        if token in names:
            return names[token]
        if (k := self.token_key(token)) is not None:
            return f"K{k}"
        if (kv := self.token_value(token)) is not None:
            return f"V{kv[0]}={kv[1]}"
        if (o := self.token_option(token)) is not None:
            return f"O{o}"
        raise ValueError(f"token {token} outside vocabulary of size {self.size}")


@dataclass(frozen=True)
class Scenario:
    """One task instance. ``facts`` maps fact key -> fact value."""

    id: str
    facts: Mapping[int, int]
    context_keys: tuple[int, ...]
    relevant_keys: tuple[int, ...]
    options: tuple[int, ...]
    correct_option: int
    answer_rule: str = "sum_mod"
    labels: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "facts", dict(sorted((int(k), int(v)) for k, v in dict(self.facts).items())))
        object.__setattr__(self, "context_keys", tuple(int(k) for k in self.context_keys))
        object.__setattr__(self, "relevant_keys", tuple(int(k) for k in self.relevant_keys))
        object.__setattr__(self, "options", tuple(int(o) for o in self.options))
        if len(self.facts) < 1:
            raise ScenarioError(f"{self.id}: scenario needs at least one fact")
        if len(self.options) < 2:
            raise ScenarioError(f"{self.id}: need at least 2 options, got {len(self.options)}")
        if len(set(self.options)) != len(self.options):
            raise ScenarioError(f"{self.id}: duplicate options")
        if self.correct_option not in self.options:
            raise ScenarioError(f"{self.id}: correct_option {self.correct_option} not among options")
        missing = [k for k in (*self.relevant_keys, *self.context_keys) if k not in self.facts]
        if missing:
            raise ScenarioError(f"{self.id}: keys {missing} not in facts")
        if self.answer_rule not in ANSWER_RULES:
            raise ScenarioError(f"{self.id}: unknown answer_rule {self.answer_rule!r}")
        derived = apply_answer_rule(self.answer_rule, self.facts, self.relevant_keys,
                                    self.options, self.correct_option)
        if derived != self.correct_option:
            raise ScenarioError(f"{self.id}: answer_rule gives {derived}, correct_option is {self.correct_option}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "context": [[k, self.facts[k]] for k in self.context_keys],
            "atomic_facts": [[k, v] for k, v in self.facts.items() if k not in self.context_keys],
            "question": {"relevant_keys": list(self.relevant_keys), "rule": self.answer_rule},
            "options": list(self.options),
            "answer": self.correct_option,
        }


def apply_answer_rule(rule: str, facts: Mapping[int, int], relevant_keys: Sequence[int],
                      options: Sequence[int], given: Optional[int] = None) -> int:
    if rule == "sum_mod":
        return options[sum(facts[k] for k in relevant_keys) % len(options)]
    if rule == "given":
        return given
    raise ScenarioError(f"unknown answer_rule {rule!r}")


@dataclass(frozen=True)
class UserReply:
    tokens: tuple[int, ...]
    effective: bool


@dataclass(frozen=True)
class MacroAction:
    """One assistant turn.

    ``logprobs`` holds one entry per policy-sampled token; a forcibly appended
    EOT (``forced=True``) has none.
    """

    tokens: tuple[int, ...]
    kind: str
    arg: Optional[int] = None
    logprobs: tuple[float, ...] = ()
    forced: bool = False

    @property
    def n_sampled(self) -> int:
        return len(self.tokens) - int(self.forced)


@dataclass(frozen=True)
class DialogueState:
    scenario: Scenario = field(repr=False)
    k: int
    tokens: tuple[int, ...]
    revealed_keys: frozenset
    terminal: bool = False
    terminal_reason: Optional[str] = None
    last_reply: Optional[UserReply] = None

    @property
    def scenario_id(self) -> str:
        return self.scenario.id


class DialogueEnv:
    """Scripted user plus the action grammar. Holds no per-episode state."""

    def __init__(self, vocab: Vocabulary, turn_limit: int = 8, max_macro_len: int = 4):
        if turn_limit < 1:
            raise ValueError("turn_limit must be >= 1")
        if max_macro_len < 1:
            raise ValueError("max_macro_len must be >= 1")
        self.vocab = vocab
        self.turn_limit = turn_limit
        self.max_macro_len = max_macro_len

    def check_scenario(self, scenario: Scenario) -> None:
        v = self.vocab
        if max(scenario.facts) >= v.key_space:
            raise ScenarioError(f"{scenario.id}: fact key outside vocabulary key space {v.key_space}")
        if max(scenario.facts.values()) >= v.values_per_key or min(scenario.facts.values()) < 0:
            raise ScenarioError(f"{scenario.id}: fact value outside 0..{v.values_per_key - 1}")
        if max(scenario.options) >= v.num_options or min(scenario.options) < 0:
            raise ScenarioError(f"{scenario.id}: option outside vocabulary")

    def encode_prompt(self, scenario: Scenario) -> tuple[int, ...]:
        v = self.vocab
        toks = [v.BOS]
        for key in scenario.context_keys:
            toks += [v.key_token(key), v.value_token(key, scenario.facts[key])]
        toks += [v.key_token(k) for k in scenario.relevant_keys]
        toks += [v.option_token(o) for o in scenario.options]
        return tuple(toks)

    def reset(self, scenario: Scenario) -> DialogueState:
        self.check_scenario(scenario)
        return DialogueState(scenario=scenario, k=0, tokens=self.encode_prompt(scenario),
                             revealed_keys=frozenset(scenario.context_keys))

    def parse(self, tokens: Sequence[int], logprobs: Sequence[float] = (), forced: bool = False) -> MacroAction:
        """Classify a token sequence: [ASK key EOT], [ANSWER option EOT] or invalid."""
        v = self.vocab
        tokens = tuple(int(t) for t in tokens)
        kind, arg = "invalid", None
        if len(tokens) == 3 and tokens[2] == v.EOT:
            if tokens[0] == v.ASK and (key := v.token_key(tokens[1])) is not None:
                kind, arg = "ask", key
            elif tokens[0] == v.ANSWER and (opt := v.token_option(tokens[1])) is not None:
                kind, arg = "answer", opt
        return MacroAction(tokens=tokens, kind=kind, arg=arg, logprobs=tuple(logprobs), forced=forced)

    def ask(self, key: int) -> MacroAction:
        return self.parse((self.vocab.ASK, self.vocab.key_token(key), self.vocab.EOT))

    def answer(self, option: int) -> MacroAction:
        return self.parse((self.vocab.ANSWER, self.vocab.option_token(option), self.vocab.EOT))

    def simulate_user(self, state: DialogueState, key: int) -> UserReply:
        facts = state.scenario.facts
        if key in facts:
            return UserReply((self.vocab.value_token(key, facts[key]),), True)
        return UserReply((self.vocab.CANNOT_ANSWER,), False)

    def step(self, state: DialogueState, action: MacroAction) -> tuple[DialogueState, float, bool]:
        if state.terminal:
            raise EnvUsageError("step() called on a terminal state")
        scenario = state.scenario
        tokens = state.tokens + action.tokens
        k = state.k + 1
        if action.kind == "answer":
            reward = REWARD_CORRECT if action.arg == scenario.correct_option else REWARD_INCORRECT
            nxt = replace(state, k=k, tokens=tokens, terminal=True, terminal_reason="answered", last_reply=None)
            return nxt, reward, True
        if action.kind != "ask":
            nxt = replace(state, k=k, tokens=tokens, terminal=True, terminal_reason="invalid_format",
                          last_reply=None)
            return nxt, REWARD_INVALID, True
        reply = self.simulate_user(state, action.arg)
        revealed = state.revealed_keys | {action.arg} if reply.effective else state.revealed_keys
        done = k >= self.turn_limit
        nxt = replace(state, k=k, tokens=tokens + reply.tokens, revealed_keys=revealed, terminal=done,
                      terminal_reason="turn_limit" if done else None, last_reply=reply)
        return nxt, 0.0, done


@dataclass(frozen=True)
class ScenarioParams:
    num_keys: int = 6
    num_relevant: int = 3
    num_options: int = 4
    count: int = 100
    key_space: int = 8
    values_per_key: int = 2
    context_size: int = 2
    question_types: int = 1
    type_seed: int = 0  # shared by every split drawn with the same params


def generate_scenarios(seed: int, params: ScenarioParams | Mapping | None = None, **overrides) -> list[Scenario]:
    """Deterministic synthetic scenarios; the answer always needs at least one query."""
    if params is None:
        params = ScenarioParams()
    elif isinstance(params, Mapping):
        params = ScenarioParams(**params)
    if overrides:
        params = replace(params, **overrides)
    p = params
    if p.num_relevant < 1:
        raise ValueError("num_relevant must be >= 1: with no relevant keys the answer needs no queries")
    if p.num_relevant > p.num_keys:
        raise ValueError("num_relevant must not exceed num_keys")
    if p.num_keys > p.key_space:
        raise ValueError("num_keys must not exceed key_space")
    if p.num_options < 2:
        raise ValueError("num_options must be >= 2")
    if not 0 <= p.context_size <= 2:
        raise ValueError("context_size must be in 0..2")
    if p.count < 0:
        raise ValueError("count must be >= 0")
    if p.question_types < 1:
        raise ValueError("question_types must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    options = tuple(range(p.num_options))
    # each question type fixes which keys decide the answer
    type_rng = np.random.default_rng(p.type_seed)
    types = [tuple(sorted(int(k) for k in type_rng.choice(p.key_space, size=p.num_relevant, replace=False)))
             for _ in range(p.question_types)]
    while len(out) < p.count:
        relevant = types[int(rng.integers(len(types)))]
        others = [k for k in range(p.key_space) if k not in relevant]
        extra = rng.choice(others, size=p.num_keys - p.num_relevant, replace=False) if others else []
        keys = sorted(list(relevant) + [int(k) for k in extra])
        values = rng.integers(0, p.values_per_key, size=p.num_keys)
        facts = dict(zip(keys, (int(x) for x in values)))
        n_ctx = min(p.context_size, p.num_keys)
        context = tuple(sorted(int(k) for k in rng.choice(keys, size=n_ctx, replace=False)))
        if set(relevant) <= set(context):
            continue
        correct = apply_answer_rule("sum_mod", facts, relevant, options)
        out.append(Scenario(id=f"syn-{seed}-{len(out)}", facts=facts, context_keys=context,
                            relevant_keys=relevant, options=options, correct_option=correct))
    return out


def scenario_digest(scenarios: Iterable[Scenario]) -> str:
    blob = json.dumps([s.to_json() for s in scenarios], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def effective_question_rate(trajectories) -> float:
    asks = effective = 0
    for traj in trajectories:
        for turn in traj.turns:
            if turn.action.kind != "ask":
                continue
            asks += 1
            effective += bool(turn.effective)
    return 1.0 if asks == 0 else effective / asks
