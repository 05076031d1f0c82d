"""Conditional f-divergences between experts.

Two generators matter here:

* ``f1(x) = x * exp(x - 1) - 1`` gives the log-divergence
  ``M_ij = 1 + log(1 + D_f1(pi_i || pi_j))``, which sets the weights and
  clip levels of the clipped estimator.
* ``f2(x) = x**2 - 1`` is the chi-square divergence; ``sigma_ij`` is stored
  as ``sqrt(1 + D_f2(pi_i || pi_j))`` because the median-of-means estimator
  consumes ``sigma_ij`` itself.

An unbounded divergence (the reference expert puts zero mass where the other
does not, or ``f1`` overflows) is reported as ``inf`` rather than clipped.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .experts import ExpertPool

# exp() overflows a little above 709
F1_EXPONENT_LIMIT = 700.0


def f1(x):
    """``x * exp(x - 1) - 1`` computed as ``exp(log x + x - 1) - 1``.

    Returns ``inf`` where the exponent exceeds :data:`F1_EXPONENT_LIMIT`.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        expo = np.log(x) + x - 1.0
    out = np.where(expo > F1_EXPONENT_LIMIT, np.inf,
                   np.exp(np.minimum(expo, F1_EXPONENT_LIMIT)) - 1.0)
    return out if out.ndim else float(out)


def f2(x):
    x = np.asarray(x, dtype=float)
    out = x * x - 1.0
    return out if out.ndim else float(out)


_NAMED = {"f1": f1, "log": f1, "m": f1, "f2": f2, "chi2": f2, "chi-square": f2, "sigma": f2}


def _resolve(f) -> Callable:
    if callable(f):
        return f
    try:
        return _NAMED[f]
    except KeyError:
        raise ValueError(f"unknown divergence generator {f!r}") from None


def _pointwise(p: np.ndarray, q: np.ndarray, f: Callable) -> np.ndarray:
    """``q * f(p/q)`` with the 0/0 -> 0 and p>0, q=0 -> inf conventions."""
    both_zero = (q == 0) & (p == 0)
    unbounded = (q == 0) & (p > 0)
    safe_q = np.where(q > 0, q, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        val = q * f(np.where(q > 0, p / safe_q, 1.0))
    val = np.where(both_zero, 0.0, val)
    return np.where(unbounded, np.inf, val)


def conditional_f_divergence(p_i, p_j, context_weights, f) -> float:
    """``sum_x w(x) sum_v p_j(v|x) f(p_i(v|x) / p_j(v|x))``.

    ``p_i`` and ``p_j`` are ``(C, K)`` tables (a single ``(K,)`` row is read as
    one context). Returns ``inf`` when ``p_i`` is not absolutely continuous
    with respect to ``p_j`` on a context of positive weight.
    """
    P = np.atleast_2d(np.asarray(p_i, dtype=float))
    Q = np.atleast_2d(np.asarray(p_j, dtype=float))
    w = np.atleast_1d(np.asarray(context_weights, dtype=float))
    if P.shape != Q.shape or w.shape != (P.shape[0],):
        raise ValueError(f"shape mismatch: {P.shape}, {Q.shape}, weights {w.shape}")
    per_context = _pointwise(P, Q, _resolve(f)).sum(axis=1)
    live = w > 0
    if np.any(np.isinf(per_context[live])):
        return float("inf")
    total = float(np.dot(w[live], per_context[live]))
    # convexity with f(1)=0 makes the true value nonnegative
    return max(total, 0.0)


def m_from_divergence(d):
    return 1.0 + np.log1p(d)


def sigma_from_divergence(d):
    return np.sqrt(1.0 + np.asarray(d, dtype=float))


def m_divergence(p_i, p_j, context_weights) -> float:
    return float(m_from_divergence(conditional_f_divergence(p_i, p_j, context_weights, f1)))


def sigma_divergence(p_i, p_j, context_weights) -> float:
    return float(sigma_from_divergence(conditional_f_divergence(p_i, p_j, context_weights, f2)))


@dataclass
class DivergenceMatrix:
    """Pairwise ``M_ij`` and ``sigma_ij``; row ``i`` is the target expert."""

    m: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.m.shape != self.sigma.shape or self.m.ndim != 2 or self.m.shape[0] != self.m.shape[1]:
            raise ValueError("m and sigma must be square matrices of equal shape")

    @property
    def size(self) -> int:
        return self.m.shape[0]

    @property
    def sigma_sq(self) -> np.ndarray:
        return self.sigma ** 2

    @property
    def max_m(self) -> float:
        return float(self.m.max())

    @property
    def max_sigma(self) -> float:
        return float(self.sigma.max())

    def unbounded_pairs(self) -> list[tuple[int, int]]:
        bad = ~np.isfinite(self.m) | ~np.isfinite(self.sigma)
        return [tuple(map(int, ij)) for ij in np.argwhere(bad)]

    @classmethod
    def identity(cls, n: int) -> "DivergenceMatrix":
        return cls(np.ones((n, n)), np.ones((n, n)))

    def to_dict(self) -> dict:
        def enc(a):
            return [[x if np.isfinite(x) else "inf" for x in row] for row in a.tolist()]
        return {"m": enc(self.m), "sigma": enc(self.sigma)}

    @classmethod
    def from_dict(cls, d: dict) -> "DivergenceMatrix":
        def dec(rows):
            return np.array([[float(x) for x in row] for row in rows])
        return cls(dec(d["m"]), dec(d["sigma"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _from_divergences(d1: np.ndarray, d2: np.ndarray) -> DivergenceMatrix:
    m = m_from_divergence(np.maximum(d1, 0.0))
    s = sigma_from_divergence(np.maximum(d2, 0.0))
    np.fill_diagonal(m, 1.0)
    np.fill_diagonal(s, 1.0)
    return DivergenceMatrix(m, s)


def exact_divergences(experts: Sequence, context_weights) -> DivergenceMatrix:
    """Exact matrices for tabular experts under the context marginal."""
    tables = [np.asarray(e.probs, dtype=float) for e in experts]
    n = len(tables)
    d1 = np.zeros((n, n))
    d2 = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                d1[i, j] = conditional_f_divergence(tables[i], tables[j], context_weights, f1)
                d2[i, j] = conditional_f_divergence(tables[i], tables[j], context_weights, f2)
    return _from_divergences(d1, d2)


def median_of_means(values: np.ndarray, num_groups: int, axis: int = -1) -> np.ndarray:
    """Median of group means along ``axis``; element ``k`` goes to group ``k mod g``.

    ``num_groups`` is clamped to the number of values. Even group counts take
    the mean of the two central group means.
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    n = v.shape[-1]
    if n == 0:
        raise ValueError("no values")
    g = max(1, min(int(num_groups), n))
    gid = np.arange(n) % g
    sums = np.zeros(v.shape[:-1] + (g,))
    for r in range(g):
        sums[..., r] = v[..., gid == r].sum(axis=-1)
    means = sums / np.bincount(gid, minlength=g)
    return np.median(means, axis=-1)


def per_context_divergences(probs: np.ndarray, f) -> np.ndarray:
    """``out[i, j, k] = D_f(pi_i(.|x_k) || pi_j(.|x_k))`` from an ``(N, n, K)`` tensor."""
    f = _resolve(f)
    N = probs.shape[0]
    out = np.empty((N, N, probs.shape[1]))
    for i in range(N):
        out[i] = _pointwise(probs[i][None], probs, f).sum(axis=-1)
    return out


def empirical_divergences(experts: Sequence, observed_contexts: Sequence, num_groups: int = 5,
                          max_contexts: int | None = None) -> DivergenceMatrix:
    """Estimate both matrices from observed contexts with a median of means.

    For every pair the per-context divergences are split round-robin into
    ``num_groups`` groups (clamped to the number of contexts); the median of
    the group means is transformed into ``M_ij`` / ``sigma_ij``. The diagonal
    is exactly 1. ``max_contexts`` keeps an evenly strided subset.
    """
    contexts = list(observed_contexts)
    if not contexts:
        raise ValueError("need at least one observed context")
    if max_contexts is not None and len(contexts) > max_contexts:
        stride = np.linspace(0, len(contexts) - 1, max_contexts).round().astype(int)
        contexts = [contexts[i] for i in stride]
    pool = experts if isinstance(experts, ExpertPool) else ExpertPool(experts)
    probs = np.stack([pool.probabilities(c) for c in contexts], axis=1)  # (N, n, K)
    d1 = median_of_means(per_context_divergences(probs, f1), num_groups)
    d2 = median_of_means(per_context_divergences(probs, f2), num_groups)
    return _from_divergences(d1, d2)

