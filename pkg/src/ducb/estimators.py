"""Importance-sampling estimates of every expert's mean from one shared log.

A sample drawn while following expert ``j`` says something about expert
``k`` through the ratio ``rho = pi_k(v|x) / pi_j(v|x)``, since
``E_j[Y * rho] = mu_k``. Two ways of taming the heavy tail of ``rho`` are
implemented:

* the clipped estimator, which weights samples from ``j`` by ``1/M_kj`` and
  drops samples whose ratio exceeds ``2 log(2/eps) M_kj``; its confidence
  radius is ``1.5 * beta`` where ``beta / log(2/beta) = sqrt(c1 t log t) / Z_k``;
* the median-of-means estimator, which splits the log into ``l(t)`` groups
  (preserving each expert's share), forms a ``1/sigma_kj``-weighted mean per
  group and takes the median.

The module-level functions follow the definitions sample by sample and work
for a single expert. :class:`ClippedIndexer` and :class:`MoMIndexer` keep
running sufficient statistics and return all ``N`` indices at once; the
policies use those.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .experts import ExpertPool


class UnboundedDivergenceError(ValueError):
    """Every divergence in a row is infinite, so no sample can be shared."""


@dataclass
class ClippedConfig:
    c1: float = 16.0
    beta_tol: float = 1e-10

    def __post_init__(self):
        if not self.c1 > 0:
            raise ValueError("c1 must be positive")
        if not 0 < self.beta_tol <= 1e-6:
            raise ValueError("beta_tol must lie in (0, 1e-6]")

    @classmethod
    def practice(cls) -> "ClippedConfig":
        return cls(c1=1.0)


@dataclass
class MoMConfig:
    c2: float = 8.0
    c3: float = 64.0
    delta_exponent: float = 2.0

    def __post_init__(self):
        if not (self.c2 > 0 and self.c3 > 0 and self.delta_exponent > 0):
            raise ValueError("c2, c3 and delta_exponent must be positive")

    @classmethod
    def practice(cls) -> "MoMConfig":
        return cls(c2=4.0, c3=2.0)

    def log_inv_delta(self, t: float) -> float:
        """``log(1/delta(t))`` with ``delta(t) = t**-delta_exponent``."""
        return self.delta_exponent * math.log(t) if t > 1 else 0.0


@dataclass(frozen=True)
class ExpertIndex:
    estimate: float
    radius: float
    insufficient: bool = False

    @property
    def ucb(self) -> float:
        return self.estimate + self.radius

    @classmethod
    def sentinel(cls) -> "ExpertIndex":
        return cls(0.0, math.inf, True)


# --- the shared log --------------------------------------------------------


class SampleLog:
    """Append-only record of ``(round, behavior expert, context, arm, reward, prob)``.

    Alongside each sample the log caches ``pi_i(arm | context)`` for every
    expert ``i`` in its pool, so importance ratios for any target expert are a
    column lookup. Adding experts back-fills their column from the stored
    contexts.
    """

    def __init__(self, experts=(), capacity: int = 256):
        self.pool = experts if isinstance(experts, ExpertPool) else ExpertPool(experts)
        self._n = 0
        cap = max(16, int(capacity))
        self._rounds = np.zeros(cap, dtype=np.int64)
        self._behavior = np.zeros(cap, dtype=np.int64)
        self._arms = np.zeros(cap, dtype=np.int64)
        self._rewards = np.zeros(cap)
        self._bprob = np.zeros(cap)
        self._rank = np.zeros(cap, dtype=np.int64)
        self._target = np.zeros((cap, len(self.pool)))
        self._counts = np.zeros(len(self.pool), dtype=np.int64)
        self.contexts: list = []

    def __len__(self) -> int:
        return self._n

    @property
    def num_experts(self) -> int:
        return len(self.pool)

    @property
    def num_arms(self) -> int:
        return self.pool.num_arms

    @property
    def rounds(self) -> np.ndarray:
        return self._rounds[: self._n]

    @property
    def behavior(self) -> np.ndarray:
        return self._behavior[: self._n]

    @property
    def arms(self) -> np.ndarray:
        return self._arms[: self._n]

    @property
    def rewards(self) -> np.ndarray:
        return self._rewards[: self._n]

    @property
    def behavior_probs(self) -> np.ndarray:
        return self._bprob[: self._n]

    @property
    def ranks(self) -> np.ndarray:
        """Position of each sample among those of its behavior expert."""
        return self._rank[: self._n]

    @property
    def target_probs(self) -> np.ndarray:
        """``(n, N)`` array of ``pi_i(arm_s | context_s)``."""
        return self._target[: self._n]

    @property
    def counts(self) -> np.ndarray:
        """``n_j``: number of samples collected under each expert."""
        return self._counts

    def ratios(self, k: int) -> np.ndarray:
        return self.target_probs[:, k] / self.behavior_probs

    def context_key(self, s: int):
        """Hashable key under which samples share a context."""
        c = self.contexts[s]
        if isinstance(c, (int, np.integer)):
            return int(c)
        return np.asarray(c, dtype=float).tobytes()

    def _grow(self, need: int) -> None:
        cap = self._rounds.size
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("_rounds", "_behavior", "_arms", "_rewards", "_bprob", "_rank"):
            old = getattr(self, name)
            arr = np.zeros(new, dtype=old.dtype)
            arr[: self._n] = old[: self._n]
            setattr(self, name, arr)
        t = np.zeros((new, self._target.shape[1]))
        t[: self._n] = self._target[: self._n]
        self._target = t

    def append(self, t: int, expert: int, context, arm: int, reward: float,
               behavior_prob: Optional[float] = None, target=None) -> None:
        """Record one sample. ``target`` may pass the precomputed ``(N, K)`` matrix."""
        j = int(expert)
        if not 0 <= j < self.num_experts:
            raise IndexError(f"behavior expert {j} not in pool of {self.num_experts}")
        if not 0.0 <= reward <= 1.0:
            raise ValueError(f"reward {reward} outside [0, 1]")
        probs = self.pool.probabilities(context) if target is None else target
        row = probs[:, int(arm)]
        p = float(row[j]) if behavior_prob is None else float(behavior_prob)
        if not 0.0 < p <= 1.0:
            raise ValueError(f"behavior probability {p} outside (0, 1]")
        self._grow(self._n + 1)
        i = self._n
        self._rounds[i] = t
        self._behavior[i] = j
        self._arms[i] = arm
        self._rewards[i] = reward
        self._bprob[i] = p
        self._rank[i] = self._counts[j]
        self._target[i] = row
        self._counts[j] += 1
        self.contexts.append(context)
        self._n += 1

    def add_experts(self, experts) -> None:
        new = list(experts)
        if not new:
            return
        start = self.num_experts
        self.pool.extend(new)
        cols = self.pool.arm_probabilities(self.contexts, self.arms,
                                           experts=range(start, self.num_experts))
        target = np.zeros((self._target.shape[0], self.num_experts))
        target[:, :start] = self._target
        target[: self._n, start:] = cols
        self._target = target
        self._counts = np.concatenate([self._counts, np.zeros(len(new), dtype=np.int64)])

    @classmethod
    def from_arrays(cls, experts, behavior, contexts, arms, rewards,
                    behavior_probs=None, rounds=None) -> "SampleLog":
        """Bulk constructor; equivalent to appending the samples in order."""
        log = cls(experts, capacity=len(arms))
        n = len(arms)
        beh = np.asarray(behavior, dtype=np.int64)
        arms = np.asarray(arms, dtype=np.int64)
        rew = np.asarray(rewards, dtype=float)
        if not (beh.size == arms.size == rew.size == len(contexts) == n):
            raise ValueError("array lengths differ")
        if n and (beh.min() < 0 or beh.max() >= log.num_experts):
            raise IndexError("behavior expert out of range")
        if np.any((rew < 0) | (rew > 1)):
            raise ValueError("rewards must lie in [0, 1]")
        target = log.pool.arm_probabilities(contexts, arms)
        bprob = target[np.arange(n), beh] if behavior_probs is None else np.asarray(behavior_probs, float)
        if np.any((bprob <= 0) | (bprob > 1)):
            raise ValueError("behavior probabilities must lie in (0, 1]")
        log._n = n
        log._rounds[:n] = np.arange(1, n + 1) if rounds is None else rounds
        log._behavior[:n] = beh
        log._arms[:n] = arms
        log._rewards[:n] = rew
        log._bprob[:n] = bprob
        log._target = target.copy() if n else log._target
        log._counts = np.bincount(beh, minlength=log.num_experts).astype(np.int64)
        log._rank[:n] = _arrival_ranks(beh)
        log.contexts = list(contexts)
        return log

    def subset(self, indices) -> "SampleLog":
        """A new log with the selected samples (same pool), in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        sub = SampleLog(self.pool, capacity=idx.size)
        n = idx.size
        sub._n = n
        sub._rounds[:n] = self.rounds[idx]
        sub._behavior[:n] = self.behavior[idx]
        sub._arms[:n] = self.arms[idx]
        sub._rewards[:n] = self.rewards[idx]
        sub._bprob[:n] = self.behavior_probs[idx]
        sub._target = self.target_probs[idx].copy() if n else sub._target
        sub._counts = np.bincount(sub.behavior, minlength=self.num_experts).astype(np.int64)
        sub._rank[:n] = _arrival_ranks(sub.behavior)
        sub.contexts = [self.contexts[i] for i in idx]
        return sub


def _arrival_ranks(behavior: np.ndarray) -> np.ndarray:
    ranks = np.empty(behavior.size, dtype=np.int64)
    seen: dict = {}
    for s, j in enumerate(behavior.tolist()):
        ranks[s] = seen.get(j, 0)
        seen[j] = ranks[s] + 1
    return ranks


# --- clipped estimator -----------------------------------------------------


def _check_row(row, n: int, name: str) -> np.ndarray:
    r = np.asarray(row, dtype=float)
    if r.shape != (n,):
        raise ValueError(f"{name} row has shape {r.shape}, expected ({n},)")
    if np.any(r < 1) or np.any(np.isnan(r)):
        raise ValueError(f"{name} entries must be >= 1")
    return r


def z_weight(log: SampleLog, m_row) -> float:
    """``Z_k = sum_j n_j / M_kj``; 0.0 signals an empty log.

    Infinite ``M_kj`` contribute nothing. If every entry is infinite no
    information can flow to expert ``k`` and :class:`UnboundedDivergenceError`
    is raised.
    """
    m = _check_row(m_row, log.num_experts, "M")
    if np.all(np.isinf(m)):
        raise UnboundedDivergenceError("all log-divergences in the row are unbounded")
    if len(log) == 0:
        return 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(np.isfinite(m), 1.0 / m, 0.0)
    return float(np.dot(log.counts, inv))


def g_beta(beta):
    """``beta / log(2 / beta)``, increasing from 0 to infinity on ``(0, 2)``."""
    b = np.asarray(beta, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(b > 0, b / np.log(2.0 / np.where(b > 0, b, 1.0)), 0.0)
    return out if out.ndim else float(out)


def solve_beta_many(targets, tol: float = 1e-10) -> np.ndarray:
    """Vectorised :func:`solve_beta`; each entry bisects independently."""
    v = np.atleast_1d(np.asarray(targets, dtype=float))
    if np.any(v < 0) or np.any(np.isnan(v)):
        raise ValueError("beta targets must be nonnegative")
    lo = np.zeros_like(v)
    hi = np.full_like(v, 2.0)
    out = np.where(np.isinf(v), 2.0, 0.0)
    active = (v > 0) & np.isfinite(v)
    for _ in range(200):
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        g = g_beta(mid)
        done = active & ((np.abs(g - v) <= tol) | (mid <= lo) | (mid >= hi))
        out[done] = mid[done]
        active &= ~done
        below = g < v
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    out[active] = 0.5 * (lo + hi)[active]
    return out


def solve_beta(target: float, tol: float = 1e-10) -> float:
    """Solve ``beta / log(2/beta) = target`` for ``beta`` in ``[0, 2)`` by bisection."""
    if target < 0:
        raise ValueError(f"target must be nonnegative, got {target}")
    return float(solve_beta_many([target], tol)[0])


def clip_level(epsilon: float) -> float:
    """``2 log(2/eps)``; infinite for ``eps == 0`` (no clipping)."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    return math.inf if epsilon == 0 else 2.0 * math.log(2.0 / epsilon)


def clipped_estimate(log: SampleLog, k: int, m_row, epsilon: float) -> float:
    """Clipped importance-sampling estimate of expert ``k``'s mean.

    Samples whose ratio exceeds ``2 log(2/eps) M_kj`` are dropped (not capped),
    and the normaliser ``Z_k`` still counts them. An empty log gives 0.0.
    """
    Z = z_weight(log, m_row)
    if Z <= 0:
        return 0.0
    m = np.asarray(m_row, dtype=float)[log.behavior]
    rho = log.ratios(k)
    keep = (rho <= clip_level(epsilon) * m) & np.isfinite(m)
    terms = np.where(keep, log.rewards * rho / np.where(np.isfinite(m), m, 1.0), 0.0)
    return float(terms.sum() / Z)


def clipped_index(log: SampleLog, k: int, m_row, t: int, cfg: Optional[ClippedConfig] = None) -> ExpertIndex:
    """Estimate and radius with ``eps = beta_k(t)``; +inf sentinel without data."""
    cfg = cfg or ClippedConfig()
    Z = z_weight(log, m_row)
    if Z <= 0:
        return ExpertIndex.sentinel()
    target = math.sqrt(cfg.c1 * t * math.log(t)) / Z if t > 1 else 0.0
    beta = solve_beta(target, cfg.beta_tol)
    return ExpertIndex(clipped_estimate(log, k, m_row, beta), 1.5 * beta)


# --- median of means -------------------------------------------------------


def num_groups(t: float, cfg: MoMConfig, n_samples: Optional[int] = None) -> int:
    """``l(t) = floor(c2 log(1/delta(t)))`` clamped to ``[1, n_samples]``."""
    l = max(1, int(math.floor(cfg.c2 * cfg.log_inv_delta(t))))
    if n_samples is not None:
        l = min(l, max(1, n_samples))
    return l


def partition_groups(log: SampleLog, num_groups: int) -> List[SampleLog]:
    """Round-robin per expert: the r-th sample of expert j goes to group ``r mod g``."""
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    gid = log.ranks % num_groups
    return [log.subset(np.flatnonzero(gid == r)) for r in range(num_groups)]


def group_mean(group: SampleLog, k: int, sigma_row) -> float:
    """``1/W_k(r) * sum_j sum_s Y rho / sigma_kj`` with ``W_k(r) = sum_i n_i(r)/sigma_ki``."""
    if len(group) == 0:
        raise ValueError("empty group")
    s = _check_row(sigma_row, group.num_experts, "sigma")
    inv = np.where(np.isfinite(s), 1.0 / s, 0.0)
    W = float(np.dot(group.counts, inv))
    if W <= 0:
        raise UnboundedDivergenceError("no finite sigma for the samples in this group")
    terms = group.rewards * group.ratios(k) * inv[group.behavior]
    return float(terms.sum() / W)


def _group_weight(group: SampleLog, sigma_row) -> float:
    s = np.asarray(sigma_row, dtype=float)
    inv = np.where(np.isfinite(s), 1.0 / s, 0.0)
    return float(np.dot(group.counts, inv)) / len(group)


def mom_estimate(log: SampleLog, k: int, sigma_row, t: int, cfg: Optional[MoMConfig] = None) -> float:
    """Median over the ``l(t)`` group means; 0.0 for an empty log."""
    cfg = cfg or MoMConfig()
    if len(log) == 0:
        return 0.0
    groups = [g for g in partition_groups(log, num_groups(t, cfg, len(log))) if len(g)]
    return float(np.median([group_mean(g, k, sigma_row) for g in groups]))


def mom_index(log: SampleLog, k: int, sigma_row, t: int, cfg: Optional[MoMConfig] = None) -> ExpertIndex:
    """Median-of-means estimate with radius ``sqrt(c3 log(1/delta) / t) / W_k(t)``.

    ``W_k(t)`` is the smallest per-sample weight ``W_k(r)/n(r)`` over nonempty
    groups.
    """
    cfg = cfg or MoMConfig()
    if len(log) == 0:
        return ExpertIndex.sentinel()
    groups = [g for g in partition_groups(log, num_groups(t, cfg, len(log))) if len(g)]
    W = min(_group_weight(g, sigma_row) for g in groups)
    if W <= 0:
        return ExpertIndex.sentinel()
    est = float(np.median([group_mean(g, k, sigma_row) for g in groups]))
    radius = math.sqrt(cfg.c3 * cfg.log_inv_delta(t) / t) / W
    return ExpertIndex(est, radius)


# --- incremental, all-experts-at-once versions -----------------------------


def _inverse(mat: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(mat), 1.0 / mat, 0.0)


class ClippedIndexer:
    """All ``N`` clipped indices from per-cell reward sums.

    Samples with the same behavior expert, arm and (integer) context share
    their importance ratios, so only one row of ratios per cell is needed.
    """

    def __init__(self, log: SampleLog, m: np.ndarray, cfg: Optional[ClippedConfig] = None):
        self.log = log
        self.cfg = cfg or ClippedConfig()
        self._cells: dict = {}
        self._cell_j: list = []
        self._cell_rep: list = []
        self._cell_sum: list = []
        self._seen = 0
        self.set_divergences(m)

    def set_divergences(self, m) -> None:
        m = np.asarray(m, dtype=float)
        if m.shape != (self.log.num_experts,) * 2:
            raise ValueError("divergence matrix does not match the pool")
        self.m = m
        self._minv = _inverse(m)

    def _sync(self) -> None:
        log = self.log
        rewards, beh, arms = log.rewards, log.behavior, log.arms
        for s in range(self._seen, len(log)):
            key = (int(beh[s]), log.context_key(s), int(arms[s]))
            c = self._cells.get(key)
            if c is None:
                c = self._cells[key] = len(self._cell_j)
                self._cell_j.append(int(beh[s]))
                self._cell_rep.append(s)
                self._cell_sum.append(0.0)
            self._cell_sum[c] += float(rewards[s])
        self._seen = len(log)

    def compute(self, t: Optional[int] = None):
        """Return ``(estimates, radii, insufficient)`` arrays of length ``N``."""
        self._sync()
        log = self.log
        t = len(log) if t is None else t
        Z = self._minv @ log.counts
        insufficient = Z <= 0
        if np.all(np.isinf(self.m), axis=1).any():
            raise UnboundedDivergenceError("an expert has no bounded log-divergence")
        with np.errstate(divide="ignore"):
            target = np.where(insufficient, 0.0,
                              math.sqrt(self.cfg.c1 * t * math.log(t)) / np.where(insufficient, 1.0, Z)
                              if t > 1 else 0.0)
        beta = solve_beta_many(target, self.cfg.beta_tol)
        with np.errstate(divide="ignore"):
            level = np.where(beta > 0, 2.0 * np.log(2.0 / np.where(beta > 0, beta, 1.0)), np.inf)

        sums = np.asarray(self._cell_sum)
        live = np.flatnonzero(sums > 0)
        est = np.zeros(log.num_experts)
        if live.size:
            reps = np.asarray(self._cell_rep)[live]
            J = np.asarray(self._cell_j)[live]
            rho = log.target_probs[reps] / log.behavior_probs[reps, None]  # (cells, N)
            Mc = self.m[:, J].T
            keep = rho <= level[None, :] * Mc
            num = (sums[live, None] * rho * keep * self._minv[:, J].T).sum(axis=0)
            est = np.divide(num, Z, out=np.zeros_like(num), where=~insufficient)
        radius = np.where(insufficient, np.inf, 1.5 * beta)
        return est, radius, insufficient


class MoMIndexer:
    """All ``N`` median-of-means indices from running group sums.

    Keeps, per group ``r``, the sums ``sum_s Y rho_k / sigma_{k j_s}`` for
    every ``k`` and the per-expert sample counts. The sums are rebuilt from the
    log whenever the number of groups, the divergences or the pool change.
    """

    def __init__(self, log: SampleLog, sigma: np.ndarray, cfg: Optional[MoMConfig] = None):
        self.log = log
        self.cfg = cfg or MoMConfig()
        self._l = 0
        self.set_divergences(sigma)

    def set_divergences(self, sigma) -> None:
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (self.log.num_experts,) * 2:
            raise ValueError("divergence matrix does not match the pool")
        self.sigma = sigma
        self._sinv = _inverse(sigma)
        self._l = 0  # force a rebuild

    def _rebuild(self, l: int) -> None:
        log = self.log
        N = log.num_experts
        gid = log.ranks % l
        beh = log.behavior
        self._counts = np.zeros((l, N))
        np.add.at(self._counts, (gid, beh), 1.0)
        self._sums = np.zeros((l, N))
        pos = np.flatnonzero(log.rewards > 0)
        if pos.size:
            contrib = ((log.rewards[pos] / log.behavior_probs[pos])[:, None]
                       * log.target_probs[pos] * self._sinv[:, beh[pos]].T)
            np.add.at(self._sums, gid[pos], contrib)
        self._l = l
        self._seen = len(log)

    def _sync(self) -> None:
        log = self.log
        n = len(log)
        if self._seen == n:
            return
        beh, ranks, rew = log.behavior, log.ranks, log.rewards
        for s in range(self._seen, n):
            j, g = beh[s], ranks[s] % self._l
            self._counts[g, j] += 1.0
            if rew[s] > 0:
                self._sums[g] += (rew[s] / log.behavior_probs[s]) * log.target_probs[s] * self._sinv[:, j]
        self._seen = n

    def compute(self, t: Optional[int] = None):
        """Return ``(estimates, radii, insufficient)`` arrays of length ``N``."""
        log = self.log
        N = log.num_experts
        n = len(log)
        if n == 0:
            return np.zeros(N), np.full(N, np.inf), np.ones(N, dtype=bool)
        t = n if t is None else t
        l = num_groups(t, self.cfg, n)
        if l != self._l or self._counts.shape[1] != N:
            self._rebuild(l)
        else:
            self._sync()
        sizes = self._counts.sum(axis=1)
        live = sizes > 0
        W = self._counts[live] @ self._sinv.T  # (groups, N)
        sums = self._sums[live]
        if np.all(W > 0):
            est = np.median(sums / W, axis=0)
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                means = np.where(W > 0, sums / np.where(W > 0, W, 1.0), np.nan)
            est = np.nan_to_num(np.nanmedian(means, axis=0)) if np.any(W > 0) else np.zeros(N)
        Wk = (W / sizes[live, None]).min(axis=0)
        insufficient = Wk <= 0
        scale = math.sqrt(self.cfg.c3 * self.cfg.log_inv_delta(t) / t)
        with np.errstate(divide="ignore"):
            radius = np.where(insufficient, np.inf, scale / np.where(insufficient, 1.0, Wk))
        est = np.where(insufficient, 0.0, est)
        return est, radius, insufficient


def make_indexer(kind: str, log: SampleLog, divergences, clipped_cfg=None, mom_cfg=None):
    if kind == "clipped":
        return ClippedIndexer(log, divergences.m, clipped_cfg)
    if kind == "mom":
        return MoMIndexer(log, divergences.sigma, mom_cfg)
    raise ValueError(f"unknown estimator {kind!r}; expected 'clipped' or 'mom'")


def indices_from(estimates: Sequence[float], radii: Sequence[float], insufficient=None) -> List[ExpertIndex]:
    ins = np.zeros(len(estimates), dtype=bool) if insufficient is None else insufficient
    return [ExpertIndex(float(e), float(r), bool(i)) for e, r, i in zip(estimates, radii, ins)]
