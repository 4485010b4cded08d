"""Token-level policy and critic with hand-written reverse-mode gradients.

Both networks share one encoder shape. Position ``t`` of a token sequence is
encoded from the running sum of token embeddings over ``tokens[:t+1]`` plus
embeddings of the current and previous token, passed through one tanh layer.
The policy reads next-token logits off every position; the critic puts a
scalar value head on every position and averages the final ``h`` of them.

Parameters are plain ``dict[str, np.ndarray]`` blocks so optimizers and
checkpoints can treat them uniformly.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from .env import DialogueEnv, DialogueState, MacroAction, Vocabulary

ENCODER_BLOCKS = ("embed", "cur", "prev", "W", "b")
POLICY_BLOCKS = ENCODER_BLOCKS + ("out", "out_b")
CRITIC_BLOCKS = ENCODER_BLOCKS + ("head", "head_b")
CHECKPOINT_VERSION = "atpo-checkpoint/1"

Params = dict[str, np.ndarray]

# pooled embeddings add up over a whole dialogue, so they start smaller
EMBED_SCALE = 0.2


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


def init_policy(vocab_size: int, d: int = 32, seed: int = 0, scale: float = 0.3) -> Params:
    rng = np.random.default_rng(seed)
    return {
        "embed": rng.normal(0.0, scale * EMBED_SCALE, (vocab_size, d)),
        "cur": rng.normal(0.0, scale, (vocab_size, d)),
        "prev": rng.normal(0.0, scale, (vocab_size, d)),
        "W": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        "b": np.zeros(d),
        "out": rng.normal(0.0, scale / np.sqrt(d), (d, vocab_size)),
        "out_b": np.zeros(vocab_size),
    }


def uniform_policy(vocab_size: int, d: int = 32, seed: int = 0) -> Params:
    """Encoder initialised as usual, output layer zeroed: every next-token distribution is uniform."""
    params = init_policy(vocab_size, d, seed)
    params["out"][:] = 0.0
    return params


def init_critic(policy: Params, seed: int = 0, head_scale: float = 0.1) -> Params:
    """Critic encoder copied from the policy encoder, fresh small value head."""
    rng = np.random.default_rng(seed)
    d = policy["W"].shape[0]
    critic = {name: policy[name].copy() for name in ENCODER_BLOCKS}
    critic["head"] = rng.normal(0.0, head_scale, d)
    critic["head_b"] = np.zeros(())
    return critic


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def num_parameters(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- encoder -----------------------------------------------------------------

def encode(params: Params, tokens) -> tuple[np.ndarray, dict]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("encode needs a non-empty 1-d token sequence (BOS is always present)")
    prev_tokens = np.concatenate(([Vocabulary.BOS], tokens[:-1]))
    pooled = np.cumsum(params["embed"][tokens], axis=0)
    u = pooled + params["cur"][tokens] + params["prev"][prev_tokens]
    H = np.tanh(u @ params["W"] + params["b"])
    return H, {"tokens": tokens, "prev_tokens": prev_tokens, "u": u, "H": H}


def encode_backward(params: Params, cache: dict, dH: np.ndarray, grads: Params) -> None:
    """Accumulate encoder gradients into ``grads`` in place."""
    H = cache["H"]
    dz = dH * (1.0 - H * H)
    grads["W"] += cache["u"].T @ dz
    grads["b"] += dz.sum(axis=0)
    du = dz @ params["W"].T
    np.add.at(grads["cur"], cache["tokens"], du)
    np.add.at(grads["prev"], cache["prev_tokens"], du)
    # pooled_t = sum_{i<=t} e_i  =>  de_i = sum_{t>=i} dpooled_t
    de = np.cumsum(du[::-1], axis=0)[::-1]
    np.add.at(grads["embed"], cache["tokens"], de)


def _last_hidden(params: Params, embed_sum: np.ndarray, last: int, prev: int) -> np.ndarray:
    u = embed_sum + params["cur"][last] + params["prev"][prev]
    return np.tanh(u @ params["W"] + params["b"])


# -- policy ------------------------------------------------------------------

def policy_logits(params: Params, tokens) -> tuple[np.ndarray, dict]:
    H, cache = encode(params, tokens)
    return H @ params["out"] + params["out_b"], cache


def policy_backward(params: Params, cache: dict, dlogits: np.ndarray, grads: Optional[Params] = None) -> Params:
    if grads is None:
        grads = zeros_like(params)
    H = cache["H"]
    grads["out"] += H.T @ dlogits
    grads["out_b"] += dlogits.sum(axis=0)
    encode_backward(params, cache, dlogits @ params["out"].T, grads)
    return grads


def next_token_logprobs(params: Params, state_tokens) -> np.ndarray:
    if len(state_tokens) == 0:
        raise ValueError("empty state sequence: BOS is always present")
    logits, _ = policy_logits(params, state_tokens)
    return log_softmax(logits[-1])


def logprob(params: Params, state_tokens, token: int) -> float:
    lp = next_token_logprobs(params, state_tokens)
    if not 0 <= token < lp.size:
        raise ValueError(f"token {token} outside vocabulary of size {lp.size}")
    return float(lp[token])


def distribution_entropy(logp: np.ndarray) -> float:
    p = np.exp(logp)
    return float(-(p * np.where(p > 0, logp, 0.0)).sum())


def entropy(params: Params, state_tokens) -> float:
    return distribution_entropy(next_token_logprobs(params, state_tokens))


def sample_macro_action(params: Params, state: DialogueState, rng: np.random.Generator, max_len: int,
                        grammar: DialogueEnv, temperature: float = 1.0) -> MacroAction:
    """Sample one assistant turn token by token.

    Each sampled token consumes exactly one uniform draw from ``rng``
    (none in greedy mode, ``temperature == 0``). At most ``max_len - 1``
    tokens are sampled; without an EOT by then, EOT is appended.
    """
    if state.terminal:
        raise ValueError("cannot act in a terminal state")
    eot = grammar.vocab.EOT
    toks = list(state.tokens)
    embed_sum = params["embed"][toks].sum(axis=0)
    out, lps = [], []
    while len(out) < max_len - 1:
        prev = toks[-2] if len(toks) > 1 else Vocabulary.BOS
        h = _last_hidden(params, embed_sum, toks[-1], prev)
        logp = log_softmax(h @ params["out"] + params["out_b"])
        if temperature == 0:
            tok = int(np.argmax(logp))
        else:
            scaled = logp / temperature if temperature != 1.0 else logp
            p = np.exp(log_softmax(scaled))
            tok = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
            tok = min(tok, p.size - 1)
        out.append(tok)
        lps.append(float(logp[tok]))
        toks.append(tok)
        embed_sum = embed_sum + params["embed"][tok]
        if tok == eot:
            return grammar.parse(out, lps)
    return grammar.parse(out + [eot], lps, forced=True)


class TokenPolicy:
    """Acting wrapper around policy parameters."""

    def __init__(self, params: Params, env: DialogueEnv, temperature: float = 1.0):
        self.params = params
        self.env = env
        self.temperature = temperature

    def act(self, state: DialogueState, rng: np.random.Generator) -> MacroAction:
        return sample_macro_action(self.params, state, rng, self.env.max_macro_len, self.env, self.temperature)


class OraclePolicy:
    """Scripted policy: asks every unrevealed relevant key, then answers by the rule."""

    def __init__(self, env: DialogueEnv):
        self.env = env

    def act(self, state: DialogueState, rng=None) -> MacroAction:
        for key in state.scenario.relevant_keys:
            if key not in state.revealed_keys:
                return self.env.ask(key)
        return self.env.answer(state.scenario.correct_option)


# -- critic ------------------------------------------------------------------

def _pad(tokens, h: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < h:
        tokens = np.concatenate((np.full(h - tokens.size, Vocabulary.BOS, dtype=np.int64), tokens))
    return tokens


def value_predictions(params: Params, tokens, h: int) -> tuple[np.ndarray, dict]:
    """Value-head outputs at the final ``h`` positions (BOS left-padded to length >= h)."""
    if h < 1:
        raise ValueError("h must be >= 1")
    H, cache = encode(params, _pad(tokens, h))
    return H[-h:] @ params["head"] + params["head_b"], cache


def value(params: Params, tokens, h: int = 4) -> float:
    preds, _ = value_predictions(params, tokens, h)
    return float(preds.mean())


def value_backward(params: Params, cache: dict, dpreds: np.ndarray, grads: Optional[Params] = None) -> Params:
    """Backward pass from gradients w.r.t. the final-``h`` predictions."""
    if grads is None:
        grads = zeros_like(params)
    H = cache["H"]
    h = dpreds.size
    grads["head"] += H[-h:].T @ dpreds
    grads["head_b"] += dpreds.sum()
    dH = np.zeros_like(H)
    dH[-h:] = np.outer(dpreds, params["head"])
    encode_backward(params, cache, dH, grads)
    return grads


def all_position_values(params: Params, tokens) -> tuple[np.ndarray, dict]:
    """Value-head output at every position (token-level critic)."""
    H, cache = encode(params, tokens)
    return H @ params["head"] + params["head_b"], cache


def all_position_values_backward(params: Params, cache: dict, dvals: np.ndarray,
                                 grads: Optional[Params] = None) -> Params:
    if grads is None:
        grads = zeros_like(params)
    H = cache["H"]
    grads["head"] += H.T @ dvals
    grads["head_b"] += dvals.sum()
    encode_backward(params, cache, np.outer(dvals, params["head"]), grads)
    return grads


class Critic:
    def __init__(self, params: Params, h: int = 4):
        if h < 1:
            raise ValueError("h must be >= 1")
        self.params = params
        self.h = h
        self.calls = 0

    def value(self, state: DialogueState) -> float:
        if state.terminal:
            return 0.0
        self.calls += 1
        return value(self.params, state.tokens, self.h)


# -- gradients ---------------------------------------------------------------

def check_finite(grads: Params) -> Params:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    return grads


def finite_difference_check(loss_fn: Callable[[Params], float], params: Params, grads: Params,
                            eps: float = 1e-5) -> dict[str, float]:
    """Central differences over every scalar parameter.

    Returns the norm-wise relative error ``|g - g_fd| / max(|g|, |g_fd|)`` per
    block plus ``"total"`` over the concatenation. Meant for small models.
    """
    errors, num_all, ana_all = {}, [], []
    for name, arr in params.items():
        fd = np.zeros_like(arr)
        flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(params)
            flat[i] = orig - eps
            down = loss_fn(params)
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * eps)
        g = np.asarray(grads[name]).reshape(-1)
        errors[name] = _rel_err(g, fd_flat)
        num_all.append(fd_flat)
        ana_all.append(g)
    errors["total"] = _rel_err(np.concatenate(ana_all), np.concatenate(num_all))
    return errors


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, blocks: Mapping[str, Params], meta: Optional[dict] = None) -> None:
    tensors = []
    for group, params in blocks.items():
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=float)
            tensors.append({"name": f"{group}/{name}", "shape": list(arr.shape),
                            "data": [float(x) for x in arr.reshape(-1)]})
    doc = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": tensors}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, Params], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    blocks: dict[str, Params] = {}
    for t in doc["tensors"]:
        group, name = t["name"].split("/", 1)
        blocks.setdefault(group, {})[name] = np.asarray(t["data"], dtype=float).reshape(t["shape"])
    return blocks, doc.get("meta", {})
