"""Synthetic tabular instances with controlled gaps and bounded divergences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .env import TabularEnvironment
from .experts import TabularExpert
from .policies import expert_means


@dataclass
class SyntheticInstance:
    env: TabularEnvironment
    experts: List[TabularExpert]
    means: np.ndarray

    @property
    def gaps(self) -> np.ndarray:
        return self.means.max() - self.means

    def to_dict(self) -> dict:
        return {"env": self.env.to_dict(), "experts": [e.to_dict() for e in self.experts]}


def _peaked(num_arms: int, arm: int, peak: float) -> np.ndarray:
    p = np.full(num_arms, (1.0 - peak) / (num_arms - 1))
    p[arm] = peak
    return p


def make_mixture_instance(num_experts: int, num_arms: int, num_contexts: int, min_gap: float,
                          max_gap: Optional[float] = None, peak: float = 0.6,
                          seed: int = 0) -> SyntheticInstance:
    """Experts that mix a "good" and a "bad" policy, placed at chosen gaps.

    In every context the arm rewards are a permutation of
    ``linspace(0.9, 0.1, K)``. The good policy puts ``peak`` on the best arm,
    the bad one on the worst arm, and the rest is spread evenly. Because
    every expert is a mixture of the two, all pairwise chi-square divergences
    are at most the one between the two extremes (``sigma < 2`` for ``K = 5``,
    ``peak = 0.6``).

    Gaps: one expert at 0, one at ``min_gap``, the rest uniform on
    ``[min_gap, max_gap]``. The order of the experts is shuffled.
    """
    if num_experts < 2 or num_arms < 2 or num_contexts < 1:
        raise ValueError("need at least 2 experts, 2 arms and 1 context")
    if not 1.0 / num_arms < peak < 1.0:
        raise ValueError("peak must exceed the uniform probability")
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.9, 0.1, num_arms)
    rewards = np.stack([rng.permutation(levels) for _ in range(num_contexts)])
    best = rewards.argmax(axis=1)
    worst = rewards.argmin(axis=1)
    good = np.stack([_peaked(num_arms, b, peak) for b in best])
    bad = np.stack([_peaked(num_arms, w, peak) for w in worst])
    span = float((good * rewards).sum(axis=1).mean() - (bad * rewards).sum(axis=1).mean())
    max_gap = span if max_gap is None else float(max_gap)
    if not 0 < min_gap <= max_gap <= span + 1e-12:
        raise ValueError(f"gaps must satisfy 0 < min_gap <= max_gap <= {span:.4f}")

    gaps = np.concatenate([[0.0, min_gap], rng.uniform(min_gap, max_gap, num_experts - 2)])
    rng.shuffle(gaps)
    experts = []
    for g in gaps:
        w = 1.0 - g / span
        P = w * good + (1.0 - w) * bad
        experts.append(TabularExpert(P / P.sum(axis=1, keepdims=True)))
    env = TabularEnvironment(np.full(num_contexts, 1.0 / num_contexts), rewards, seed=seed)
    return SyntheticInstance(env, experts, expert_means(env, experts))


def identical_instance(num_experts: int, num_arms: int = 3, num_contexts: int = 2,
                       seed: int = 0) -> SyntheticInstance:
    """Every expert is the same random policy, so every gap is exactly zero."""
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(num_arms), size=num_contexts)
    experts = [TabularExpert(probs) for _ in range(num_experts)]
    env = TabularEnvironment(np.full(num_contexts, 1.0 / num_contexts),
                             rng.uniform(0.1, 0.9, (num_contexts, num_arms)), seed=seed)
    return SyntheticInstance(env, experts, expert_means(env, experts))
