import pytest

from atpo.credit import Trajectory, Turn
from atpo.env import (REWARD_CORRECT, REWARD_INCORRECT, REWARD_INVALID, DialogueEnv, EnvUsageError, Scenario,
                      ScenarioError, ScenarioParams, Vocabulary, apply_answer_rule, effective_question_rate,
                      generate_scenarios, scenario_digest)

from helpers import small_env, small_scenarios


@pytest.fixture
def env():
    return small_env()


@pytest.fixture
def scenario():
    return small_scenarios(1)[0]


def test_vocabulary_round_trip():
    v = Vocabulary(8, 2, 4)
    assert v.size == 5 + 8 + 16 + 4
    seen = set()
    for k in range(8):
        assert v.token_key(v.key_token(k)) == k
        for val in range(2):
            assert v.token_value(v.value_token(k, val)) == (k, val)
            seen.add(v.value_token(k, val))
    assert len(seen) == 16
    for o in range(4):
        assert v.token_option(v.option_token(o)) == o
    assert {v.describe(t) for t in range(v.size)} >= {"BOS", "ASK", "ANSWER", "EOT", "CANNOT_ANSWER"}
    with pytest.raises(ValueError):
        v.describe(v.size)


def test_reset_reveals_exactly_context(env, scenario):
    state = env.reset(scenario)
    assert len(scenario.context_keys) == 2
    assert state.revealed_keys == frozenset(scenario.context_keys)
    assert state.k == 0 and not state.terminal
    assert state.tokens[0] == env.vocab.BOS


def test_answer_rule_outside_options_rejected():
    with pytest.raises(ScenarioError, match="correct_option"):
        Scenario(id="x", facts={0: 1, 1: 1}, context_keys=(), relevant_keys=(0, 1), options=(0, 1, 2, 3),
                 correct_option=7)
    # rule says option 2, file says option 1
    with pytest.raises(ScenarioError, match="answer_rule"):
        Scenario(id="x", facts={0: 1, 1: 1}, context_keys=(), relevant_keys=(0, 1), options=(0, 1, 2, 3),
                 correct_option=1)


def test_correct_answer_rewarded(env, scenario):
    state = env.reset(scenario)
    nxt, r, done = env.step(state, env.answer(scenario.correct_option))
    assert (r, done, nxt.terminal_reason) == (REWARD_CORRECT, True, "answered")
    wrong = next(o for o in scenario.options if o != scenario.correct_option)
    _, r, done = env.step(state, env.answer(wrong))
    assert (r, done) == (REWARD_INCORRECT, True)


@pytest.mark.parametrize("tokens", [(3,), (1, 1, 3), (2, 5, 3), (1, 5, 5), (1, 5)])
def test_grammar_violation_penalised(env, scenario, tokens):
    action = env.parse(tokens)
    assert action.kind == "invalid"
    nxt, r, done = env.step(env.reset(scenario), action)
    assert (r, done, nxt.terminal_reason) == (REWARD_INVALID, True, "invalid_format")


def test_turn_limit_boundary(scenario):
    env = small_env(turn_limit=3)
    state = env.reset(scenario)
    for _ in range(2):
        state, r, done = env.step(state, env.ask(0))
        assert (r, done) == (0.0, False)
    assert state.k == env.turn_limit - 1
    state, r, done = env.step(state, env.ask(0))
    assert (r, done, state.terminal_reason) == (0.0, True, "turn_limit")
    with pytest.raises(EnvUsageError):
        env.step(state, env.ask(0))


def test_ask_appends_action_and_reply(env, scenario):
    state = env.reset(scenario)
    key = next(k for k in scenario.facts if k not in scenario.context_keys)
    nxt, _, _ = env.step(state, env.ask(key))
    reply = (env.vocab.value_token(key, scenario.facts[key]),)
    assert nxt.tokens == state.tokens + env.ask(key).tokens + reply
    assert nxt.revealed_keys == state.revealed_keys | {key}
    assert nxt.k == 1


def test_simulate_user(env, scenario):
    state = env.reset(scenario)
    present = next(iter(scenario.facts))
    absent = next(k for k in range(env.vocab.key_space) if k not in scenario.facts)
    yes = env.simulate_user(state, present)
    assert yes.effective and yes.tokens == (env.vocab.value_token(present, scenario.facts[present]),)
    no = env.simulate_user(state, absent)
    assert not no.effective and no.tokens == (env.vocab.CANNOT_ANSWER,)
    nxt, _, _ = env.step(state, env.ask(absent))
    assert absent not in nxt.revealed_keys
    assert env.simulate_user(state, present) == env.simulate_user(nxt, present)


def test_generator_deterministic():
    a = generate_scenarios(5, count=30)
    b = generate_scenarios(5, count=30)
    assert scenario_digest(a) == scenario_digest(b)
    assert scenario_digest(a) != scenario_digest(generate_scenarios(6, count=30))


def test_generator_rejects_degenerate_params():
    with pytest.raises(ValueError, match="num_relevant"):
        generate_scenarios(0, num_relevant=0)
    with pytest.raises(ValueError):
        generate_scenarios(0, num_relevant=7, num_keys=6)
    with pytest.raises(ValueError):
        generate_scenarios(0, num_keys=9, key_space=8)


def test_generator_hundred_valid_scenarios():
    params = ScenarioParams(num_keys=6, num_relevant=3, num_options=4, count=100)
    out = generate_scenarios(1, params)
    assert len(out) == 100
    for s in out:
        assert apply_answer_rule(s.answer_rule, s.facts, s.relevant_keys, s.options) == s.correct_option
        assert len(s.facts) == 6 and len(s.relevant_keys) == 3
        assert not set(s.relevant_keys) <= set(s.context_keys)


def test_question_types_share_relevant_sets_across_splits():
    a = generate_scenarios(1, count=50, question_types=2)
    b = generate_scenarios(2, count=50, question_types=2)
    assert {s.relevant_keys for s in a} == {s.relevant_keys for s in b}
    assert len({s.relevant_keys for s in a}) == 2


def _traj(env, kinds_effective):
    turns = []
    scenario = small_scenarios(1)[0]
    state = env.reset(scenario)
    for kind, eff in kinds_effective:
        action = env.ask(0) if kind == "ask" else env.answer(0)
        turns.append(Turn(0, 1, state, action, 0.0, 0.0, effective=eff))
    return Trajectory(turns=turns, leaf_id=1)


def test_effective_question_rate(env):
    assert effective_question_rate([_traj(env, [("ask", True), ("ask", True), ("answer", None)])]) == 1.0
    three = _traj(env, [("ask", True), ("ask", False), ("ask", True), ("answer", None)])
    assert effective_question_rate([three]) == pytest.approx(2 / 3)
    assert effective_question_rate([_traj(env, [("answer", None)])]) == 1.0


def test_check_scenario_against_vocabulary():
    env = DialogueEnv(Vocabulary(4, 2, 4))
    s = small_scenarios(1)[0]
    if max(s.facts) >= 4:
        with pytest.raises(ScenarioError):
            env.reset(s)
    narrow = DialogueEnv(Vocabulary(8, 2, 2))
    with pytest.raises(ScenarioError):
        narrow.reset(s)
