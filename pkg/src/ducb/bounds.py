"""Instance-dependent regret terms and bound evaluators.

All bounds are evaluated with the universal constants set to 1, so they are
shape values for comparing instances, not certified regret ceilings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

PI2_3 = math.pi ** 2 / 3.0


@dataclass(frozen=True)
class GapProfile:
    """Sorted gaps ``0 = D_(1) <= D_(2) <= ... <= D_(N) <= 1``."""

    gaps: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gaps, dtype=float)
        if g.ndim != 1 or g.size < 1:
            raise ValueError("gaps must be a non-empty vector")
        if g[0] != 0.0:
            raise ValueError("the smallest gap must be 0 (the optimal expert)")
        if np.any(np.diff(g) < 0):
            raise ValueError("gaps must be sorted ascending")
        if g[-1] > 1.0 or g.min() < 0:
            raise ValueError("gaps must lie in [0, 1]")
        object.__setattr__(self, "gaps", g)

    @classmethod
    def from_means(cls, means) -> "GapProfile":
        m = np.asarray(means, dtype=float)
        return cls(np.sort(m.max() - m))

    @property
    def n(self) -> int:
        return self.gaps.size

    @property
    def delta2(self) -> float:
        return float(self.gaps[1]) if self.n > 1 else math.nan


def _gaps(gaps) -> np.ndarray:
    return gaps.gaps if isinstance(gaps, GapProfile) else GapProfile(gaps).gaps


def _ratio_terms(g: np.ndarray) -> np.ndarray:
    """``1 - D_(k)^2 / D_(k+1)^2`` for ``k = 2..N-1`` (1-based)."""
    if g.size > 1 and g[1] <= 0:
        raise ValueError("D_(2) = 0: the optimal expert is not unique")
    lo, hi = g[1:-1], g[2:]
    return 1.0 - (lo / hi) ** 2


def lambda_mu(gaps) -> float:
    """``1 + sum_{k=2}^{N-1} (1 - D_(k)^2 / D_(k+1)^2)``."""
    return 1.0 + float(_ratio_terms(_gaps(gaps)).sum())


def lambda_mu_many(profiles: np.ndarray) -> np.ndarray:
    """Row-wise :func:`lambda_mu` for a ``(reps, N)`` array of sorted profiles."""
    P = np.asarray(profiles, dtype=float)
    if P.shape[1] > 1 and np.any(P[:, 1] <= 0):
        raise ValueError("D_(2) = 0 in some profile")
    return 1.0 + (1.0 - (P[:, 1:-1] / P[:, 2:]) ** 2).sum(axis=1)


def instance_term_ducb(gaps) -> float:
    g = _gaps(gaps)
    if g.size < 2:
        raise ValueError("need at least two experts")
    r = _ratio_terms(g)
    return float((r / g[1:-1]).sum() + 1.0 / g[-1])


def instance_term_ucb1(gaps) -> float:
    g = _gaps(gaps)
    if g.size < 2 or g[1] <= 0:
        raise ValueError("need at least two experts and D_(2) > 0")
    return float((1.0 / g[1:]).sum())


def instance_terms_many(profiles: np.ndarray):
    """Both instance terms for a ``(reps, N)`` array; returns ``(ducb, ucb1)``."""
    P = np.asarray(profiles, dtype=float)
    r = 1.0 - (P[:, 1:-1] / P[:, 2:]) ** 2
    ducb = (r / P[:, 1:-1]).sum(axis=1) + 1.0 / P[:, -1]
    return ducb, (1.0 / P[:, 1:]).sum(axis=1)


def gamma(x):
    """``x^2 / log^2(6/x)``, increasing on ``(0, 1]``."""
    x = np.asarray(x, dtype=float)
    out = x ** 2 / np.log(6.0 / x) ** 2
    return out if out.ndim else float(out)


@dataclass
class BoundReport:
    value: float
    which: str
    T: int
    terms: Dict[str, float] = field(default_factory=dict)
    constants: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "which": self.which, "T": self.T,
                "terms": dict(self.terms), "constants": dict(self.constants),
                "note": "universal constants set to 1; shape value only"}


def _check(g: np.ndarray, T: int, which: str):
    if which not in ("r1", "r2"):
        raise ValueError("which must be 'r1' (clipped) or 'r2' (median of means)")
    if g.size < 2 or g[1] <= 0:
        raise ValueError("bound undefined when D_(2) = 0")
    if T < 2:
        raise ValueError("T must be at least 2")


def theorem_bound(gaps, T: int, divergence: float, which: str = "r2") -> BoundReport:
    """Regret bound for the clipped (``r1``, ``divergence = M``) or
    median-of-means (``r2``, ``divergence = sigma``) estimator."""
    g = _gaps(gaps)
    _check(g, T, which)
    logT = math.log(T)
    mid, nxt, last = g[1:-1], g[2:], g[-1]
    gap_sum = PI2_3 * float(g[1:].sum())
    if which == "r1":
        scale = divergence ** 2 * logT
        head = scale * math.log(6.0 / last) ** 2 / last
        body = float((scale * np.log(6.0 / mid) ** 2 / mid * (1.0 - gamma(mid) / gamma(nxt))).sum())
    else:
        scale = divergence ** 2 * logT
        head = scale / last
        body = float((scale / mid * (1.0 - (mid / nxt) ** 2)).sum())
    terms = {"largest_gap_term": head, "sum_term": body, "gap_sum_term": gap_sum}
    name = "M" if which == "r1" else "sigma"
    return BoundReport(head + body + gap_sum, which, int(T), terms, {"C": 1.0, name: float(divergence)})


def theorem_bound_r2_telescoped(gaps, T: int, sigma: float) -> float:
    """The ``r2`` bound rewritten as ``sigma^2 log T (1/D_(2) + sum (D_(k)-D_(k-1))/D_(k)^2 ...)``.

    Uses ``(1/a)(1 - a^2/b^2) = 1/a - a/b^2``, so
    ``sum_{k=2}^{N-1} (1/D_k - D_k/D_{k+1}^2) + 1/D_N
    = 1/D_2 + sum_{k=3}^{N} (1/D_k - D_{k-1}/D_k^2)``.
    """
    g = _gaps(gaps)
    _check(g, T, "r2")
    d = g[1:]
    inner = 1.0 / d[0] + float(((d[1:] - d[:-1]) / d[1:] ** 2).sum())
    return sigma ** 2 * math.log(T) * inner + PI2_3 * float(d.sum())


def corollary_delta_bound(gaps, T: int, divergence: float, which: str = "r2") -> float:
    """N-free form: ``M^2 log^2(1/D_(2)) log T / D_(2)^2`` or ``sigma^2 log T / D_(2)^2``."""
    g = _gaps(gaps)
    _check(g, T, which)
    d2 = g[1]
    base = divergence ** 2 * math.log(T) / d2 ** 2
    return base * math.log(1.0 / d2) ** 2 if which == "r1" else base


def corollary_simple_bound(gaps, T: int, divergence: float, which: str = "r2") -> float:
    """``lambda * M^2 log^2(6/D_(2)) log T / D_(2)`` or ``lambda * sigma^2 log T / D_(2)``."""
    g = _gaps(gaps)
    _check(g, T, which)
    d2 = g[1]
    base = lambda_mu(g) * divergence ** 2 * math.log(T) / d2
    return base * math.log(6.0 / d2) ** 2 if which == "r1" else base


def bound_summary(gaps, T: int, divergence: float, which: str = "r2") -> dict:
    """Everything the ``bounds`` command prints, including the min of both corollaries."""
    rep = theorem_bound(gaps, T, divergence, which)
    simple = corollary_simple_bound(gaps, T, divergence, which)
    delta = corollary_delta_bound(gaps, T, divergence, which)
    return {
        "which": which,
        "T": int(T),
        "lambda": lambda_mu(gaps),
        "lambda_form": "1 + sum",
        "instance_term_ducb": instance_term_ducb(gaps),
        "instance_term_ucb1": instance_term_ucb1(gaps),
        "theorem_bound": rep.value,
        "corollary_simple": simple,
        "corollary_delta": delta,
        "corollary_min": min(simple, delta),
        "note": "universal constants set to 1; shape values only",
    }


# --- uniform-gap model -------------------------------------------------------


def sample_gap_profile(N: int, delta2: float, rng) -> GapProfile:
    """``(0, delta2, sorted uniforms on [delta2, 1])``."""
    return GapProfile(sample_gap_profiles(N, delta2, 1, rng)[0])


def sample_gap_profiles(N: int, delta2: float, reps: int, rng) -> np.ndarray:
    if N < 2:
        raise ValueError("N must be at least 2")
    if not 0 < delta2 <= 1:
        raise ValueError("delta2 must lie in (0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = np.empty((reps, N))
    out[:, 0] = 0.0
    out[:, 1] = delta2
    out[:, 2:] = np.sort(rng.uniform(delta2, 1.0, size=(reps, N - 2)), axis=1)
    return out


def lambda_expectation_check(N: int, delta2: float, replications: int, rng=0):
    """Monte-Carlo mean of lambda under the uniform-gap model, and ``1 + 2 log N``."""
    profiles = sample_gap_profiles(N, delta2, replications, rng)
    return float(lambda_mu_many(profiles).mean()), 1.0 + 2.0 * math.log(N)


def instance_term_sweep(sizes, delta2: float, reps: int, rng=0):
    """Mean instance terms per N; rows of ``(N, ducb, ucb1, ratio)``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rows = []
    for N in sizes:
        d, u = instance_terms_many(sample_gap_profiles(int(N), delta2, reps, rng))
        rows.append((int(N), float(d.mean()), float(u.mean()), float((d / u).mean())))
    return rows


def progressive_validation_loss(rewards) -> np.ndarray:
    """``L(t) = (1/t) sum_{s<=t} (1 - y_s)``. Accepts rewards or a trace."""
    y = rewards.rewards if hasattr(rewards, "rewards") else np.asarray(rewards, dtype=float)
    if y.size == 0:
        return np.zeros(0)
    return np.cumsum(1.0 - y) / np.arange(1, y.size + 1)
