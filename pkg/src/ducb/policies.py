"""Round loops: D-UCB, batched D-UCB with a growing pool, and baselines.

Every policy exposes ``step(context, reward_fn) -> RoundRecord`` where
``reward_fn(arm)`` reveals the reward of the played arm. ``simulate`` drives a
policy against an environment and collects an :class:`EpisodeTrace`.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .divergence import DivergenceMatrix, empirical_divergences
from .env import EndOfStream, TabularEnvironment
from .estimators import ClippedConfig, MoMConfig, SampleLog, make_indexer
from .experts import (ExpertPool, OracleConfig, SoftmaxExpert, TabularExpert,
                      _inverse_cdf, spawn_batch_experts)


@dataclass
class RoundRecord:
    t: int
    expert: int
    arm: int
    reward: float
    indices: Optional[np.ndarray] = None
    regret: float = math.nan


def argmax_lowest(values) -> int:
    """Index of the largest value, lowest index on ties (``inf`` beats all)."""
    return int(np.argmax(np.asarray(values, dtype=float)))


class Policy:
    """Shared bookkeeping: expert pool, generator, round counter, pull counts."""

    name = "policy"

    def __init__(self, experts, rng=None):
        self.pool = experts if isinstance(experts, ExpertPool) else ExpertPool(experts)
        if len(self.pool) == 0:
            raise ValueError("need at least one expert")
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.t = 0
        self.pulls = np.zeros(len(self.pool), dtype=np.int64)

    @property
    def num_experts(self) -> int:
        return len(self.pool)

    def _play(self, k: int, context, reward_fn, indices, probs=None) -> RoundRecord:
        probs = self.pool.probabilities(context) if probs is None else probs
        arm, p = _inverse_cdf(probs[k], self.rng.random())
        y = float(reward_fn(arm))
        self.t += 1
        self.pulls[k] += 1
        self._observe(k, context, arm, y, p, probs)
        return RoundRecord(self.t, int(k), int(arm), y, indices)

    def _observe(self, k, context, arm, reward, prob, probs) -> None:
        pass

    def step(self, context, reward_fn: Callable[[int], float]) -> RoundRecord:
        raise NotImplementedError


class _MeanTracking(Policy):
    """Per-expert sample means from the expert's own pulls only."""

    def __init__(self, experts, rng=None):
        super().__init__(experts, rng)
        self.sums = np.zeros(self.num_experts)

    def _observe(self, k, context, arm, reward, prob, probs) -> None:
        self.sums[k] += reward

    def means(self, unpulled: float = math.inf) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.pulls > 0, self.sums / np.maximum(self.pulls, 1), unpulled)


class UCB1(_MeanTracking):
    """UCB-1 treating each expert as an arm; unpulled experts have index +inf."""

    name = "ucb1"

    def indices(self, t: int) -> np.ndarray:
        with np.errstate(divide="ignore"):
            bonus = np.sqrt(2.0 * math.log(t) / np.maximum(self.pulls, 1))
        return np.where(self.pulls > 0, self.sums / np.maximum(self.pulls, 1) + bonus, np.inf)

    def step(self, context, reward_fn):
        u = self.indices(self.t + 1)
        return self._play(argmax_lowest(u), context, reward_fn, u)


class EpsilonGreedy(_MeanTracking):
    name = "egreedy"

    def __init__(self, experts, rng=None, epsilon: float = 0.06):
        super().__init__(experts, rng)
        if not 0 <= epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        self.epsilon = float(epsilon)

    def step(self, context, reward_fn):
        u = self.means()
        if self.rng.random() < self.epsilon:
            k = int(self.rng.integers(self.num_experts))
        else:
            k = argmax_lowest(u)
        return self._play(k, context, reward_fn, u)


class ExploreFirst(_MeanTracking):
    """Uniform exploration for ``explore_rounds`` rounds, then commit forever."""

    name = "first"

    def __init__(self, experts, rng=None, explore_rounds: int = 100):
        super().__init__(experts, rng)
        self.explore_rounds = int(explore_rounds)
        self.committed: Optional[int] = None

    def step(self, context, reward_fn):
        u = self.means(unpulled=-math.inf)
        if self.t < self.explore_rounds:
            k = int(self.rng.integers(self.num_experts))
        else:
            if self.committed is None:
                self.committed = argmax_lowest(u)
            k = self.committed
        return self._play(k, context, reward_fn, u)


class DUCB(Policy):
    """Divergence-based UCB over a shared importance-weighted sample log.

    Round 1 picks a uniformly random expert. Afterwards the policy plays
    ``argmax_k U_k(t-1)``, where the indices come from the clipped or the
    median-of-means estimator computed on the ``t-1`` samples seen so far.

    ``update_every`` is an int (refresh every that many rounds) or ``"sqrt"``
    (refresh after ``ceil(sqrt(t))`` new samples).
    """

    name = "ducb"

    def __init__(self, experts, divergences: DivergenceMatrix, rng=None, estimator: str = "mom",
                 clipped: Optional[ClippedConfig] = None, mom: Optional[MoMConfig] = None,
                 update_every: Union[int, str] = 1):
        super().__init__(experts, rng)
        if divergences.size != self.num_experts:
            raise ValueError(f"divergence matrix is {divergences.size}x{divergences.size} "
                             f"but there are {self.num_experts} experts")
        if update_every != "sqrt" and not (isinstance(update_every, int) and update_every >= 1):
            raise ValueError("update_every must be a positive int or 'sqrt'")
        self.estimator = estimator
        self.update_every = update_every
        self.divergences = divergences
        self.log = SampleLog(self.pool)
        self.indexer = make_indexer(estimator, self.log, divergences, clipped, mom)
        self._cached: Optional[np.ndarray] = None
        self._cached_at = -1

    def _observe(self, k, context, arm, reward, prob, probs) -> None:
        self.log.append(self.t, k, context, arm, reward, prob, target=probs)

    def _stale(self) -> bool:
        n = len(self.log)
        if self._cached is None or self._cached.size != self.num_experts:
            return True
        gap = n - self._cached_at
        if self.update_every == "sqrt":
            return gap >= max(1, math.ceil(math.sqrt(n)))
        return gap >= self.update_every

    def current_indices(self) -> np.ndarray:
        """``U_k(t-1)`` for every expert, refreshed per ``update_every``."""
        if self._stale():
            est, rad, _ = self.indexer.compute(len(self.log))
            self._cached = est + rad
            self._cached_at = len(self.log)
        return self._cached

    def init_step(self, context, reward_fn) -> RoundRecord:
        if self.t != 0:
            raise RuntimeError("init_step only applies to the first round")
        k = int(self.rng.integers(self.num_experts))
        return self._play(k, context, reward_fn, None)

    def ducb_step(self, context, reward_fn) -> RoundRecord:
        if self.t < 1:
            raise RuntimeError("ducb_step needs at least one completed round")
        u = self.current_indices()
        return self._play(argmax_lowest(u), context, reward_fn, u.copy())

    def step(self, context, reward_fn):
        if self.t == 0:
            return self.init_step(context, reward_fn)
        return self.ducb_step(context, reward_fn)

    def forced_step(self, k: int, context, reward_fn) -> RoundRecord:
        """Play expert ``k`` regardless of the indices (warm start)."""
        return self._play(int(k), context, reward_fn, None)

    def add_experts(self, experts, divergences: DivergenceMatrix) -> None:
        """Grow the pool; newborn experts are indexed once the next refresh happens."""
        new = list(experts)
        self.log.add_experts(new)
        self.pulls = np.concatenate([self.pulls, np.zeros(len(new), dtype=np.int64)])
        self.set_divergences(divergences)

    def set_divergences(self, divergences: DivergenceMatrix) -> None:
        if divergences.size != self.num_experts:
            raise ValueError("divergence matrix does not match the pool")
        self.divergences = divergences
        self.indexer.set_divergences(divergences.m if self.estimator == "clipped" else divergences.sigma)
        self._cached = None


# --- traces ------------------------------------------------------------------


@dataclass
class EpisodeTrace:
    policy: str
    seed: int
    records: List[RoundRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def rewards(self) -> np.ndarray:
        return np.fromiter((r.reward for r in self.records), dtype=float, count=len(self.records))

    @property
    def experts(self) -> np.ndarray:
        return np.fromiter((r.expert for r in self.records), dtype=np.int64, count=len(self.records))

    @property
    def regrets(self) -> np.ndarray:
        return np.fromiter((r.regret for r in self.records), dtype=float, count=len(self.records))

    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.regrets)

    def pull_counts(self) -> List[int]:
        n = max((r.expert for r in self.records), default=-1) + 1
        return np.bincount(self.experts, minlength=n).tolist()

    def summary(self) -> dict:
        cr = self.cumulative_regret()
        out = {
            "policy": self.policy,
            "seed": self.seed,
            "rounds": len(self),
            "final_cumulative_regret": float(cr[-1]) if len(cr) else 0.0,
            "pull_counts": self.pull_counts(),
            "mean_reward": float(self.rewards.mean()) if len(self) else 0.0,
        }
        out.update(self.meta)
        return out

    def to_csv(self, path, with_indices: bool = True) -> None:
        width = 0
        if with_indices:
            width = max((r.indices.size for r in self.records if r.indices is not None), default=0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "expert", "arm", "reward", "regret"] + [f"index_{i}" for i in range(width)])
            for r in self.records:
                row = [r.t, r.expert, r.arm, repr(r.reward), repr(r.regret)]
                if width:
                    vals = [] if r.indices is None else [repr(float(v)) for v in r.indices]
                    row += vals + [""] * (width - len(vals))
                w.writerow(row)

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


# --- driving a policy --------------------------------------------------------


def expert_means(env, experts) -> Optional[np.ndarray]:
    """Exact expert means under a tabular environment, ``None`` otherwise."""
    if not isinstance(env, TabularEnvironment):
        return None
    out = np.empty(len(experts))
    feats = None
    for i, e in enumerate(experts):
        if isinstance(e, TabularExpert):
            probs = e.probs
        else:
            if feats is None:
                feats = np.stack([env.featurize(c) for c in range(env.num_contexts)])
            probs = e.evaluate_many(feats) if isinstance(e, SoftmaxExpert) else \
                np.stack([e.evaluate(x) for x in feats])
        out[i] = math.fsum((env.context_probs[:, None] * probs * env.reward_means).ravel().tolist())
    return out


def split_seed(seed: int):
    """Independent generators for the environment and the policy."""
    env_ss, pol_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(pol_ss)


def simulate(env, policy: Policy, T: int, seed: int, record_indices: bool = True,
             env_rng: Optional[np.random.Generator] = None) -> EpisodeTrace:
    """Run ``policy`` for ``T`` rounds (or until a dataset runs out).

    Regret is filled in when the environment is tabular. Pass ``env_rng`` to
    reuse a generator; otherwise it is derived from ``seed``.
    """
    if env_rng is None:
        env_rng, _ = split_seed(seed)
    env.reseed(env_rng)
    means = expert_means(env, policy.pool.experts)
    best = float(means.max()) if means is not None else math.nan
    trace = EpisodeTrace(policy.name, int(seed))
    start = time.perf_counter()
    for _ in range(int(T)):
        try:
            x = env.next_context()
        except EndOfStream:
            break
        rec = policy.step(x, env.reward)
        if means is not None:
            rec.regret = best - float(means[rec.expert])
        if not record_indices:
            rec.indices = None
        trace.records.append(rec)
    trace.meta["wall_time"] = time.perf_counter() - start
    return trace


def make_policy(name: str, experts, rng, divergences: Optional[DivergenceMatrix] = None, **opts) -> Policy:
    name = name.lower()
    if name in ("ducb", "d-ucb"):
        if divergences is None:
            raise ValueError("D-UCB needs a divergence matrix")
        return DUCB(experts, divergences, rng, estimator=opts.get("estimator", "mom"),
                    clipped=opts.get("clipped"), mom=opts.get("mom"),
                    update_every=opts.get("update_every", 1))
    if name in ("ucb1", "ucb-1"):
        return UCB1(experts, rng)
    if name in ("egreedy", "epsilon-greedy", "epsilon_greedy"):
        return EpsilonGreedy(experts, rng, epsilon=opts.get("epsilon", 0.06))
    if name in ("first", "explore-first", "explore_first"):
        return ExploreFirst(experts, rng, explore_rounds=opts.get("explore_rounds", 100))
    raise ValueError(f"unknown policy {name!r}")


# --- batched D-UCB with trained experts --------------------------------------


def batch_schedule(T: int, num_arms: int, multiplier: float = 1.0) -> List[int]:
    """First round of every batch: ``3K+1``, then ``b + ceil(multiplier*sqrt(b))`` until past ``T``."""
    if multiplier <= 0:
        raise ValueError("multiplier must be positive")
    b = 3 * num_arms + 1
    out = []
    while b <= T:
        out.append(b)
        b += max(1, math.ceil(multiplier * math.sqrt(b)))
    return out


@dataclass
class BatchedConfig:
    experts_per_batch: int = 4
    pool_cap: int = 64
    batch_multiplier: float = 1.0
    divergence_groups: int = 5
    max_divergence_contexts: int = 2000


def batched_run(env, oracle_config: Optional[OracleConfig], T: int, seed: int = 0,
                estimator: str = "mom", clipped: Optional[ClippedConfig] = None,
                mom: Optional[MoMConfig] = None, config: Optional[BatchedConfig] = None,
                record_indices: bool = True) -> EpisodeTrace:
    """D-UCB over a pool grown by training new experts on the log.

    The first ``3K`` rounds follow the uniform expert. At every batch boundary
    ``experts_per_batch`` experts are trained on bootstrap resamples of the
    importance-weighted log (until ``pool_cap`` is reached), divergences are
    re-estimated from the observed contexts, and D-UCB runs for
    ``ceil(multiplier * sqrt(t))`` rounds.

    Regret in tabular environments is measured against the best expert in the
    pool at that round.
    """
    K = env.num_arms
    if T <= 3 * K:
        raise ValueError(f"T must exceed 3K = {3 * K}")
    cfg = config or BatchedConfig()
    oracle = oracle_config or OracleConfig()
    env_rng, pol_rng = split_seed(seed)
    env.reseed(env_rng)
    feat = env.featurize
    d = env.feature_dim
    tabular = isinstance(env, TabularEnvironment)

    pool = [SoftmaxExpert.uniform(K, d, prob_floor=oracle.prob_floor)]
    policy = DUCB(pool, DivergenceMatrix.identity(1), pol_rng, estimator=estimator,
                  clipped=clipped, mom=mom)
    policy.name = "batched-ducb"
    trace = EpisodeTrace(policy.name, int(seed))
    means = expert_means(env, policy.pool.experts)
    boundaries = set(batch_schedule(T, K, cfg.batch_multiplier))
    fallbacks = 0
    batch = 0
    start = time.perf_counter()

    for t in range(1, int(T) + 1):
        try:
            x = env.next_context()
        except EndOfStream:
            break
        f = feat(x)
        if t in boundaries and len(policy.pool) < cfg.pool_cap:
            room = min(cfg.experts_per_batch, cfg.pool_cap - len(policy.pool))
            new = spawn_batch_experts(policy.log, room, seed, num_arms=K, dim=d,
                                      batch_index=batch, base=oracle)
            fallbacks += sum(bool(e.fallback) for e in new)
            batch += 1
            grown = list(policy.pool.experts) + new
            div = empirical_divergences(grown, policy.log.contexts, cfg.divergence_groups,
                                        cfg.max_divergence_contexts)
            policy.add_experts(new, div)
            if tabular:
                means = expert_means(env, policy.pool.experts)
        if t <= 3 * K:
            rec = policy.forced_step(0, f, env.reward)
        else:
            rec = policy.ducb_step(f, env.reward)
        if means is not None:
            rec.regret = float(means.max() - means[rec.expert])
        if not record_indices:
            rec.indices = None
        trace.records.append(rec)

    trace.meta.update({
        "wall_time": time.perf_counter() - start,
        "pool_size": len(policy.pool),
        "batches": batch,
        "oracle_fallbacks": fallbacks,
    })
    return trace
