"""Analytic prefill/decode cost model for prefix-shared sampling."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ComputeProfile:
    phi: int  # parameters in linear projections
    theta: int  # parameters in attention
    x: int  # input length
    y: int  # output length
    N: int  # samples drawn from the shared input

    def __post_init__(self):
        for name in ("phi", "theta", "x", "y", "N"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")


def prefill_cost(p: ComputeProfile) -> float:
    return 2 * p.phi * p.x + 4 * p.theta * p.x ** 2


def decode_cost(p: ComputeProfile) -> float:
    return 2 * p.phi * p.y + 2 * p.theta * (2 * p.x + p.y + 1)


def independent_total(p: ComputeProfile) -> float:
    return p.N * (prefill_cost(p) + decode_cost(p))


def tree_total(p: ComputeProfile) -> float:
    return prefill_cost(p) + p.N * decode_cost(p)


def savings(p: ComputeProfile) -> float:
    return (p.N - 1) * prefill_cost(p)


def summary(p: ComputeProfile) -> dict:
    return {"prefill": prefill_cost(p), "decode": decode_cost(p), "independent_total": independent_total(p),
            "tree_total": tree_total(p), "savings": savings(p)}
