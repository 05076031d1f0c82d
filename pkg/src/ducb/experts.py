"""Stochastic experts: conditional distributions over arms given a context."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

PROB_FLOOR = 1e-4
WEIGHT_CAP = 1e4


class TabularExpert:
    """Expert over a finite context set, one probability row per context."""

    kind = "tabular"

    def __init__(self, probs):
        P = np.atleast_2d(np.asarray(probs, dtype=float))
        if np.any(P < 0):
            raise ValueError("probabilities must be nonnegative")
        if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("every row must sum to 1")
        self.probs = P
        self.probs.setflags(write=False)

    @property
    def num_arms(self) -> int:
        return self.probs.shape[1]

    @property
    def num_contexts(self) -> int:
        return self.probs.shape[0]

    def evaluate(self, context) -> np.ndarray:
        x = int(context)
        if not 0 <= x < self.num_contexts:
            raise ValueError(f"context {x} outside [0, {self.num_contexts})")
        return self.probs[x]

    def to_dict(self) -> dict:
        return {"type": "tabular", "probs": self.probs.tolist()}

    def __repr__(self) -> str:
        return f"TabularExpert(C={self.num_contexts}, K={self.num_arms})"


class SoftmaxExpert:
    """Linear-softmax expert mixed with a uniform floor.

    ``pi(.|x) = (1 - K*floor) * softmax((W x + b) / temperature) + floor``
    so every arm keeps probability at least ``floor``.
    """

    kind = "softmax"

    def __init__(self, weights, bias=None, temperature: float = 1.0,
                 prob_floor: float = PROB_FLOOR, fallback: bool = False):
        W = np.atleast_2d(np.asarray(weights, dtype=float))
        K = W.shape[0]
        b = np.zeros(K) if bias is None else np.asarray(bias, dtype=float)
        if b.shape != (K,):
            raise ValueError(f"bias must have shape ({K},)")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= prob_floor * K < 1:
            raise ValueError("prob_floor too large for the number of arms")
        self.weights = W
        self.bias = b
        self.temperature = float(temperature)
        self.prob_floor = float(prob_floor)
        # set when the trainer had nothing to fit and returned the uniform expert
        self.fallback = fallback

    @classmethod
    def uniform(cls, num_arms: int, dim: int, **kwargs) -> "SoftmaxExpert":
        return cls(np.zeros((num_arms, dim)), np.zeros(num_arms), **kwargs)

    @property
    def num_arms(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def evaluate(self, context) -> np.ndarray:
        x = np.asarray(context, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a feature vector of length {self.dim}, got {x.shape}")
        return _floored_softmax(
            (self.weights @ x + self.bias) / self.temperature, self.prob_floor
        )

    def evaluate_many(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _floored_softmax(
            (X @ self.weights.T + self.bias) / self.temperature, self.prob_floor
        )

    def to_dict(self) -> dict:
        return {
            "type": "softmax",
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "temperature": self.temperature,
            "prob_floor": self.prob_floor,
        }

    def __repr__(self) -> str:
        return f"SoftmaxExpert(K={self.num_arms}, d={self.dim}, T={self.temperature})"


def _floored_softmax(z: np.ndarray, floor: float) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if floor > 0:
        K = p.shape[-1]
        p = (1.0 - K * floor) * p + floor
    return p


def evaluate(expert, context) -> np.ndarray:
    return expert.evaluate(context)


def sample_arm(expert, context, rng: np.random.Generator) -> tuple[int, float]:
    """Draw an arm from ``expert``'s conditional; returns ``(arm, probability)``."""
    p = expert.evaluate(context)
    return _inverse_cdf(p, rng.random())


def _inverse_cdf(p: np.ndarray, u: float) -> tuple[int, float]:
    cdf = np.cumsum(p)
    arm = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    arm = min(arm, p.size - 1)
    # never return a zero-probability arm because of rounding in the cdf
    while p[arm] <= 0:
        arm -= 1
    return arm, float(p[arm])


class ExpertPool:
    """An ordered list of experts with stacked parameters for batch evaluation.

    ``probabilities(context)`` returns the ``(N, K)`` matrix of every expert's
    conditional at ``context``. Tabular experts are stacked into one tensor,
    softmax experts into another, anything else is evaluated one at a time.
    """

    def __init__(self, experts: Iterable = ()):
        self.experts: List = []
        self._dirty = True
        self.extend(experts)

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, i):
        return self.experts[i]

    def __iter__(self):
        return iter(self.experts)

    @property
    def num_arms(self) -> int:
        return self.experts[0].num_arms

    def extend(self, experts: Iterable) -> None:
        new = list(experts)
        if new and self.experts and any(e.num_arms != self.num_arms for e in new):
            raise ValueError("all experts must share the number of arms")
        self.experts.extend(new)
        self._dirty = True

    def _stack(self) -> None:
        tab = [i for i, e in enumerate(self.experts) if isinstance(e, TabularExpert)]
        soft = [i for i, e in enumerate(self.experts) if isinstance(e, SoftmaxExpert)]
        self._tab_idx = np.asarray(tab, dtype=int)
        self._soft_idx = np.asarray(soft, dtype=int)
        self._other_idx = [
            i for i, e in enumerate(self.experts)
            if not isinstance(e, (TabularExpert, SoftmaxExpert))
        ]
        if tab:
            self._tab = np.stack([self.experts[i].probs for i in tab])  # (n, C, K)
        if soft:
            es = [self.experts[i] for i in soft]
            self._W = np.stack([e.weights for e in es])  # (n, K, d)
            self._b = np.stack([e.bias for e in es])
            self._temp = np.asarray([e.temperature for e in es])[:, None]
            self._floor = np.asarray([e.prob_floor for e in es])[:, None]
        self._dirty = False

    def probabilities(self, context) -> np.ndarray:
        if self._dirty:
            self._stack()
        N, K = len(self.experts), self.num_arms
        if len(self._tab_idx) == N:
            return self._tab[:, int(context), :]
        out = np.empty((N, K))
        if len(self._tab_idx):
            out[self._tab_idx] = self._tab[:, int(context), :]
        if len(self._soft_idx):
            z = (self._W @ np.asarray(context, dtype=float) + self._b) / self._temp
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=1, keepdims=True)
            out[self._soft_idx] = (1.0 - K * self._floor) * p + self._floor
        for i in self._other_idx:
            out[i] = self.experts[i].evaluate(context)
        return out

    def arm_probabilities(self, contexts: Sequence, arms, experts: Optional[Sequence[int]] = None) -> np.ndarray:
        """``out[s, i] = pi_i(arms[s] | contexts[s])`` for the selected experts."""
        idx = range(len(self.experts)) if experts is None else experts
        arms = np.asarray(arms, dtype=int)
        n = arms.size
        out = np.empty((n, len(idx)))
        if n == 0:
            return out
        rows = np.arange(n)
        tab_contexts = None
        X = None
        for col, i in enumerate(idx):
            e = self.experts[i]
            if isinstance(e, TabularExpert):
                if tab_contexts is None:
                    tab_contexts = np.asarray(contexts, dtype=int)
                out[:, col] = e.probs[tab_contexts, arms]
            elif isinstance(e, SoftmaxExpert):
                if X is None:
                    X = np.asarray(list(contexts), dtype=float)
                out[:, col] = e.evaluate_many(X)[rows, arms]
            else:
                out[:, col] = [e.evaluate(c)[a] for c, a in zip(contexts, arms)]
        return out


# --- oracle training -------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    features: np.ndarray
    arm: int
    weight: float

    def __post_init__(self):
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise ValueError(f"weight must be finite and nonnegative, got {self.weight}")


@dataclass
class OracleConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 32
    l2: float = 0.0
    temperature: float = 1.0
    prob_floor: float = PROB_FLOOR
    weight_cap: float = WEIGHT_CAP
    bootstrap_fraction: float = 0.8
    seed: int = 0


def make_importance_weight(reward: float, behavior_prob: float, cap: float = WEIGHT_CAP) -> float:
    """Importance weight ``reward / behavior_prob`` for oracle training, capped."""
    if not behavior_prob > 0:
        raise ValueError(f"behavior probability must be positive, got {behavior_prob}")
    return min(reward / behavior_prob, cap)


def _canonicalize(examples: Sequence[TrainingExample]):
    """Merge identical (features, arm) pairs by summing weights; drop zero weights.

    The weighted loss is unchanged, and the result no longer depends on whether
    a sample was duplicated or given a doubled weight.
    """
    merged: dict = {}
    for ex in examples:
        if ex.weight == 0:
            continue
        x = np.asarray(ex.features, dtype=float)
        key = (x.tobytes(), int(ex.arm))
        if key in merged:
            merged[key][2] += ex.weight
        else:
            merged[key] = [x, int(ex.arm), float(ex.weight)]
    return list(merged.values())


def train_oracle(examples: Sequence[TrainingExample], num_arms: int,
                 config: Optional[OracleConfig] = None, dim: Optional[int] = None) -> SoftmaxExpert:
    """Fit a :class:`SoftmaxExpert` by importance-weighted multinomial logistic regression.

    Plain minibatch SGD on the weighted cross-entropy of the arm given the
    features. The step size at epoch ``e`` (1-based) is
    ``learning_rate / sqrt(e)``; the example order is shuffled each epoch with
    a generator seeded from ``config.seed``.

    If no example carries positive weight, the uniform expert is returned with
    ``fallback=True`` and a ``RuntimeWarning`` is issued.
    """
    cfg = config or OracleConfig()
    rows = _canonicalize(examples)
    if dim is None:
        if not examples:
            raise ValueError("dim is required when there are no examples")
        dim = np.asarray(examples[0].features).size
    if not rows:
        warnings.warn("no positively weighted examples; returning uniform expert",
                      RuntimeWarning, stacklevel=2)
        return SoftmaxExpert.uniform(num_arms, dim, temperature=cfg.temperature,
                                     prob_floor=cfg.prob_floor, fallback=True)

    X = np.stack([r[0] for r in rows])
    a = np.fromiter((r[1] for r in rows), dtype=int, count=len(rows))
    w = np.fromiter((r[2] for r in rows), dtype=float, count=len(rows))
    if X.shape[1] != dim:
        raise ValueError(f"features have dimension {X.shape[1]}, expected {dim}")
    if a.min() < 0 or a.max() >= num_arms:
        raise ValueError("arm label out of range")

    n = len(rows)
    # normalise so the step size does not scale with the weight magnitude
    w = w / w.mean()
    W = np.zeros((num_arms, dim))
    b = np.zeros(num_arms)
    onehot = np.zeros((n, num_arms))
    onehot[np.arange(n), a] = 1.0
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate / math.sqrt(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Xb = X[idx]
            z = Xb @ W.T + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) * w[idx, None]
            m = len(idx)
            W -= lr * (g.T @ Xb / m + cfg.l2 * W)
            b -= lr * g.sum(axis=0) / m
    return SoftmaxExpert(W, b, temperature=cfg.temperature, prob_floor=cfg.prob_floor)


# per-slot hyperparameter variations used to diversify a batch of experts
_VARIANTS = (
    {"learning_rate": 0.1, "temperature": 1.0, "l2": 0.0},
    {"learning_rate": 0.3, "temperature": 1.0, "l2": 1e-3},
    {"learning_rate": 0.05, "temperature": 0.7, "l2": 0.0},
    {"learning_rate": 0.2, "temperature": 1.5, "l2": 1e-4},
)


def training_examples_from_log(log, featurize=None, cap: float = WEIGHT_CAP) -> List[TrainingExample]:
    featurize = featurize or (lambda c: np.asarray(c, dtype=float))
    out = []
    for x, v, y, p in zip(log.contexts, log.arms, log.rewards, log.behavior_probs):
        out.append(TrainingExample(featurize(x), int(v), make_importance_weight(y, p, cap)))
    return out


def spawn_batch_experts(log, count: int, seed: int, *, num_arms: Optional[int] = None,
                        dim: Optional[int] = None, featurize=None, batch_index: int = 0,
                        base: Optional[OracleConfig] = None) -> List[SoftmaxExpert]:
    """Train ``count`` experts on bootstrap resamples of the importance-weighted log.

    Each expert gets its own seed derived from ``(seed, batch_index, slot)``,
    its own bootstrap resample and a hyperparameter variant.
    """
    base = base or OracleConfig()
    if num_arms is None:
        num_arms = log.num_arms
    examples = training_examples_from_log(log, featurize, base.weight_cap) if len(log) else []
    if dim is None:
        if not examples:
            raise ValueError("dim is required for an empty log")
        dim = examples[0].features.size
    if not examples:
        return [SoftmaxExpert.uniform(num_arms, dim, prob_floor=base.prob_floor, fallback=True)
                for _ in range(count)]

    experts = []
    n = len(examples)
    for slot in range(count):
        ss = np.random.SeedSequence([int(seed), int(batch_index), slot])
        rng = np.random.default_rng(ss)
        m = max(1, int(round(base.bootstrap_fraction * n)))
        picks = rng.integers(0, n, size=m)
        variant = _VARIANTS[slot % len(_VARIANTS)]
        cfg = OracleConfig(
            epochs=base.epochs, batch_size=base.batch_size,
            prob_floor=base.prob_floor, weight_cap=base.weight_cap,
            bootstrap_fraction=base.bootstrap_fraction,
            seed=int(rng.integers(2**63)),
            learning_rate=base.learning_rate * variant["learning_rate"] / 0.1,
            temperature=base.temperature * variant["temperature"],
            l2=variant["l2"],
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            experts.append(train_oracle([examples[i] for i in picks], num_arms, cfg, dim=dim))
    return experts


# --- serialization ---------------------------------------------------------


def expert_from_dict(d: dict):
    kind = d.get("type")
    if kind == "tabular":
        return TabularExpert(d["probs"])
    if kind == "softmax":
        return SoftmaxExpert(d["weights"], d.get("bias"), d.get("temperature", 1.0),
                             d.get("prob_floor", PROB_FLOOR))
    raise ValueError(f"unknown expert type {kind!r}")


def dump_experts(experts, path) -> None:
    with open(path, "w") as fh:
        json.dump({"experts": [e.to_dict() for e in experts]}, fh)


def load_experts(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    items = data["experts"] if isinstance(data, dict) else data
    return [expert_from_dict(d) for d in items]
