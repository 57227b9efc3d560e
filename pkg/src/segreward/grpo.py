"""Group-relative advantages, the GRPO objective and a KL regularizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rewards import LengthMismatch


class GroupTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    normalize_by_std: bool = True
    epsilon: float = 1e-8
    kl_beta: float = 0.0
    group_size: int = 8
    batch_size: int = 16
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2 for training")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class GroupAdvantages:
    values: np.ndarray
    normalized: bool
    epsilon: float

    def __iter__(self):
        return iter(self.values.tolist())

    def __len__(self):
        return len(self.values)


def group_advantages(rewards: Sequence[float], cfg: GrpoConfig = GrpoConfig()) -> GroupAdvantages:
    """Mean-centred rewards, optionally divided by (population std + eps).

    The centred values are re-centred once more so the group sums to zero to
    floating-point precision even for large reward magnitudes.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards per group, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    centred = r - r.mean()
    if cfg.normalize_by_std:
        centred = centred / (np.sqrt(np.mean(centred**2)) + cfg.epsilon)
    centred = centred - centred.mean()
    return GroupAdvantages(centred, cfg.normalize_by_std, cfg.epsilon)


def grpo_objective(advantages: Sequence[float], sample_logprobs: Sequence[float]) -> float:
    """``(1/K) sum_i A_i log pi(y_i | x)``, to be maximized."""
    a = np.asarray(list(advantages), dtype=float)
    lp = np.asarray(sample_logprobs, dtype=float)
    if a.shape != lp.shape:
        raise LengthMismatch(f"{a.size} advantages vs {lp.size} log-probs")
    if a.size == 0:
        return 0.0
    return float(np.mean(a * lp))


def kl_estimate(logp_theta: Sequence[float], logp_ref: Sequence[float]) -> float:
    """Per-token ``exp(d) - d - 1`` with ``d = logp_ref - logp_theta``, averaged.

    Unbiased for KL(pi_theta || pi_ref) when tokens are sampled from pi_theta,
    and non-negative for every sample.
    """
    lt = np.asarray(logp_theta, dtype=float)
    lr = np.asarray(logp_ref, dtype=float)
    if lt.shape != lr.shape:
        raise LengthMismatch(f"{lt.size} policy log-probs vs {lr.size} reference log-probs")
    if lt.size == 0:
        return 0.0
    d = lr - lt
    return float(np.mean(np.expm1(d) - d))


def regularized_objective(objective: float, kl: float, beta: float) -> float:
    return objective - beta * kl


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    """Closed-form ``KL(p || q)`` for categorical distributions."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
