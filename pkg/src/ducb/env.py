"""Environments: nature's fixed distribution over contexts and rewards.

Two flavours are provided. :class:`TabularEnvironment` has a finite set of
contexts and Bernoulli rewards, so expert means and divergences are exactly
computable. :class:`DatasetEnvironment` replays a multi-class classification
dataset as a bandit problem (reward 1 iff the chosen arm is the label).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np


class EndOfStream(Exception):
    """Raised when a dataset environment has no rows left."""


@dataclass(frozen=True)
class RoundOutcome:
    context: Union[int, np.ndarray]
    arm: int
    reward: float


class TabularEnvironment:
    """Finite contexts with Bernoulli rewards.

    Parameters
    ----------
    context_probs : sequence of float, length C
        Marginal distribution of the context.
    reward_means : array-like, shape (C, K)
        Bernoulli mean of arm ``v`` under context ``x``.
    seed : int
        Seed of the generator used for contexts and rewards.
    """

    is_synthetic = True

    def __init__(self, context_probs, reward_means, seed: int = 0):
        p = np.asarray(context_probs, dtype=float)
        r = np.atleast_2d(np.asarray(reward_means, dtype=float))
        if p.ndim != 1 or p.size == 0:
            raise ValueError("context_probs must be a non-empty vector")
        if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError("context_probs must be nonnegative and sum to 1")
        if r.shape[0] != p.size:
            raise ValueError(
                f"reward_means has {r.shape[0]} rows, expected {p.size}"
            )
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("reward_means entries must lie in [0, 1]")
        self.context_probs = p
        self.reward_means = r
        self.rng_seed = int(seed)
        self._cdf = np.cumsum(p)
        self._cdf[-1] = 1.0
        self._current: Optional[int] = None
        self.reseed(seed)

    @property
    def num_contexts(self) -> int:
        return self.context_probs.size

    @property
    def num_arms(self) -> int:
        return self.reward_means.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.num_contexts

    def reseed(self, seed) -> None:
        """Reset the generator. ``seed`` may be an int, SeedSequence or Generator."""
        if isinstance(seed, np.random.Generator):
            self.rng = seed
        else:
            self.rng = np.random.default_rng(seed)

    def draw_context(self) -> int:
        u = self.rng.random()
        return int(np.searchsorted(self._cdf, u, side="right"))

    def sample_reward(self, context_id: int, arm: int) -> float:
        if not 0 <= context_id < self.num_contexts:
            raise IndexError(f"context {context_id} out of range")
        if not 0 <= arm < self.num_arms:
            raise IndexError(f"arm {arm} out of range")
        return 1.0 if self.rng.random() < self.reward_means[context_id, arm] else 0.0

    # round protocol shared with DatasetEnvironment
    def next_context(self) -> int:
        self._current = self.draw_context()
        return self._current

    def reward(self, arm: int) -> float:
        return self.sample_reward(self._current, arm)

    def featurize(self, context_id: int) -> np.ndarray:
        """One-hot encoding, used when training parametric experts."""
        x = np.zeros(self.num_contexts)
        x[context_id] = 1.0
        return x

    def to_dict(self) -> dict:
        return {
            "contexts": self.context_probs.tolist(),
            "reward_means": self.reward_means.tolist(),
            "seed": self.rng_seed,
        }


def true_expert_mean(env: TabularEnvironment, expert) -> float:
    """Mean reward of ``expert`` under ``env``, summed exactly over the table."""
    probs = np.asarray(expert.probs, dtype=float)
    if probs.shape != env.reward_means.shape:
        raise ValueError(
            f"expert table {probs.shape} does not match environment "
            f"{env.reward_means.shape}"
        )
    terms = (env.context_probs[:, None] * probs * env.reward_means).ravel()
    return math.fsum(terms.tolist())


class DatasetEnvironment:
    """Multi-class dataset replayed as a contextual bandit.

    Rows are presented in file order unless ``shuffle`` is set, in which case
    they are permuted once with ``seed``.
    """

    is_synthetic = False

    def __init__(self, features, labels, num_arms: int, shuffle: bool = False, seed: int = 0):
        X = np.atleast_2d(np.asarray(features, dtype=float))
        y = np.asarray(labels, dtype=int)
        if X.shape[0] != y.size:
            raise ValueError("features and labels differ in length")
        if y.size and (y.min() < 0 or y.max() >= num_arms):
            raise ValueError(f"labels must lie in [0, {num_arms})")
        if shuffle:
            order = np.random.default_rng(seed).permutation(y.size)
            X, y = X[order], y[order]
        self.features = X
        self.labels = y
        self._num_arms = int(num_arms)
        self.shuffle = bool(shuffle)
        self.rng_seed = int(seed)
        self.cursor = 0

    @property
    def num_arms(self) -> int:
        return self._num_arms

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.size

    def reseed(self, seed) -> None:
        # rows are fixed; a new replication restarts the stream
        self.cursor = 0

    def current_context(self) -> np.ndarray:
        if self.cursor >= len(self):
            raise EndOfStream(f"dataset exhausted after {len(self)} rows")
        return self.features[self.cursor]

    def dataset_step(self, arm: int) -> RoundOutcome:
        x = self.current_context()
        reward = 1.0 if int(arm) == self.labels[self.cursor] else 0.0
        self.cursor += 1
        return RoundOutcome(context=x, arm=int(arm), reward=reward)

    def next_context(self) -> np.ndarray:
        return self.current_context()

    def reward(self, arm: int) -> float:
        return self.dataset_step(arm).reward

    def featurize(self, context) -> np.ndarray:
        return np.asarray(context, dtype=float)


def load_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``label,f1,...,fd`` rows. Returns ``(features, labels)``."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                if line_no == 1:
                    continue  # header
                raise ValueError(f"{path}:{line_no}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: rows have differing feature counts")
    return np.asarray(rows, dtype=float), np.asarray(labels, dtype=int)


def environment_from_dict(spec: dict, base_dir: Union[str, Path, None] = None):
    """Build an environment from its JSON description."""
    if "dataset_path" in spec:
        path = Path(spec["dataset_path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        X, y = load_dataset_csv(path)
        return DatasetEnvironment(
            X, y, int(spec["num_arms"]),
            shuffle=bool(spec.get("shuffle", False)),
            seed=int(spec.get("seed", 0)),
        )
    if "contexts" in spec and "reward_means" in spec:
        return TabularEnvironment(
            spec["contexts"], spec["reward_means"], seed=int(spec.get("seed", 0))
        )
    raise ValueError("environment spec needs 'contexts'+'reward_means' or 'dataset_path'")


def load_environment(path):
    path = Path(path)
    with open(path) as fh:
        spec = json.load(fh)
    return environment_from_dict(spec, base_dir=path.parent)
