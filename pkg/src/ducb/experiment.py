"""Seeded replications of configured policies, written to CSV/JSON.

A run config is a JSON object::

    {
      "policies": ["ducb", "ucb1"],       # or "policy": "ducb"
      "estimator": "mom", "c1": 1, "c2": 4, "c3": 2, "update_every": 1,
      "T": 5000, "seed": 7, "reps": 4, "workers": 1,
      "env": "env.json",                  # path or inline env spec
      "experts": "experts.json",          # path or inline list
      "instance": {...},                  # alternative to env + experts
      "output": "out/"
    }

Outputs: ``trace_<policy>_seed<seed>.csv`` per replication plus a
``<...>.json`` summary next to it, ``summary.json`` with mean/std cumulative
regret at checkpoints (powers of 2 plus T), and ``plot_data.csv``.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .bounds import progressive_validation_loss
from .divergence import DivergenceMatrix, empirical_divergences, exact_divergences
from .env import TabularEnvironment, environment_from_dict, load_environment
from .estimators import ClippedConfig, MoMConfig
from .experts import OracleConfig, TabularExpert, expert_from_dict, load_experts
from .instances import make_mixture_instance
from .policies import BatchedConfig, batched_run, make_policy, simulate, split_seed

POLICIES = ("ducb", "ucb1", "egreedy", "first", "batched-ducb")


class ConfigError(ValueError):
    """The run config is malformed (exit code 2)."""


@dataclass
class RunConfig:
    policies: List[str] = field(default_factory=lambda: ["ducb"])
    estimator: str = "mom"
    c1: float = 1.0
    c2: float = 4.0
    c3: float = 2.0
    update_every: object = 1
    T: int = 1000
    seed: int = 0
    reps: int = 1
    workers: int = 1
    epsilon: float = 0.06
    explore_rounds: int = 100
    env: object = None
    experts: object = None
    instance: Optional[dict] = None
    divergence: str = "exact"
    oracle: dict = field(default_factory=dict)
    batched: dict = field(default_factory=dict)
    record_indices: bool = True
    output: str = "ducb_out"
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        if "policy" in d:
            d.setdefault("policies", d.pop("policy"))
        if isinstance(d.get("policies"), str):
            d["policies"] = [p.strip() for p in d["policies"].split(",") if p.strip()]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.base_dir = str(base_dir)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}; choose from {POLICIES}")
        if not self.policies:
            raise ConfigError("no policies configured")
        if self.estimator not in ("clipped", "mom"):
            raise ConfigError("estimator must be 'clipped' or 'mom'")
        if not (isinstance(self.T, int) and self.T >= 1):
            raise ConfigError("T must be a positive integer")
        if not (isinstance(self.reps, int) and self.reps >= 1):
            raise ConfigError("reps must be a positive integer")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.divergence not in ("exact", "empirical"):
            raise ConfigError("divergence must be 'exact' or 'empirical'")
        if self.update_every != "sqrt" and not (isinstance(self.update_every, int) and self.update_every >= 1):
            raise ConfigError("update_every must be a positive integer or 'sqrt'")
        for name in ("c1", "c2", "c3"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.instance is None and self.env is None:
            raise ConfigError("config needs 'env' (with 'experts') or 'instance'")
        needs_experts = any(p != "batched-ducb" for p in self.policies)
        if self.instance is None and needs_experts and self.experts is None:
            raise ConfigError("config needs 'experts' for the non-batched policies")

    def seeds(self) -> List[int]:
        return [(self.seed + r) % 2**64 for r in range(self.reps)]


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data, base_dir=path.parent)


def _resolve(base_dir, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base_dir) / p


def build_problem(cfg: RunConfig):
    """Environment, experts and divergence matrix described by the config."""
    if cfg.instance is not None:
        try:
            inst = make_mixture_instance(**cfg.instance)
        except TypeError as exc:
            raise ConfigError(f"bad instance spec: {exc}") from None
        env, experts = inst.env, inst.experts
    else:
        try:
            env = (load_environment(_resolve(cfg.base_dir, cfg.env)) if isinstance(cfg.env, str)
                   else environment_from_dict(cfg.env, cfg.base_dir))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad environment spec: {exc}") from None
        if cfg.experts is None:
            experts = None
        elif isinstance(cfg.experts, str):
            experts = load_experts(_resolve(cfg.base_dir, cfg.experts))
        else:
            experts = [expert_from_dict(e) for e in cfg.experts]
    divergences = None
    if experts is not None and "ducb" in cfg.policies:
        tabular = isinstance(env, TabularEnvironment) and all(isinstance(e, TabularExpert) for e in experts)
        if cfg.divergence == "exact" and tabular:
            divergences = exact_divergences(experts, env.context_probs)
        elif tabular:
            rng = np.random.default_rng(cfg.seed)
            divergences = empirical_divergences(experts, rng.choice(env.num_contexts, 10000, p=env.context_probs))
        else:
            divergences = empirical_divergences(experts, list(env.features))
    return env, experts, divergences


def run_one(cfg: RunConfig, policy: str, seed: int, problem=None):
    """One replication; returns the trace."""
    env, experts, divergences = problem if problem is not None else build_problem(cfg)
    env = copy.deepcopy(env)
    clipped = ClippedConfig(c1=cfg.c1)
    mom = MoMConfig(c2=cfg.c2, c3=cfg.c3)
    if policy == "batched-ducb":
        oracle = OracleConfig(**cfg.oracle)
        return batched_run(env, oracle, cfg.T, seed, cfg.estimator, clipped, mom,
                           BatchedConfig(**cfg.batched), cfg.record_indices)
    env_rng, pol_rng = split_seed(seed)
    pol = make_policy(policy, experts, pol_rng, divergences, estimator=cfg.estimator,
                      clipped=clipped, mom=mom, update_every=cfg.update_every,
                      epsilon=cfg.epsilon, explore_rounds=cfg.explore_rounds)
    return simulate(env, pol, cfg.T, seed, cfg.record_indices, env_rng=env_rng)


def _job(args):
    cfg, policy, seed = args
    trace = run_one(cfg, policy, seed)
    return policy, seed, trace


def checkpoints(T: int) -> List[int]:
    pts = []
    p = 1
    while p < T:
        pts.append(p)
        p *= 2
    pts.append(T)
    return pts


def run_experiment(config, out_dir=None, quiet: bool = True) -> dict:
    """Run every (policy, seed) pair and write the artifacts. Returns the summary."""
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    out = Path(out_dir or _resolve(cfg.base_dir, cfg.output))
    jobs = [(cfg, p, s) for p in cfg.policies for s in cfg.seeds()]
    problem = build_problem(cfg)
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, os.cpu_count() or 1)) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [(p, s, run_one(cfg, p, s, problem)) for _, p, s in jobs]
    results.sort(key=lambda r: (cfg.policies.index(r[0]), r[1]))

    # single writer after the parallel phase
    out.mkdir(parents=True, exist_ok=True)
    summary = {"config": {k: v for k, v in cfg.__dict__.items() if k != "base_dir"},
               "checkpoints": [], "policies": {}}
    curves = {}
    for policy, seed, trace in results:
        stem = out / f"trace_{policy}_seed{seed}"
        trace.to_csv(f"{stem}.csv", with_indices=cfg.record_indices)
        trace.write_summary(f"{stem}.json")
        curves.setdefault(policy, []).append(trace)
        if not quiet:
            s = trace.summary()
            print(f"{policy} seed={seed} regret={s['final_cumulative_regret']:.4f} "
                  f"reward={s['mean_reward']:.4f}")

    T = min(len(tr) for trs in curves.values() for tr in trs)
    pts = checkpoints(T)
    summary["checkpoints"] = pts
    plot_rows = []
    for policy, traces in curves.items():
        R = np.stack([tr.cumulative_regret()[:T] for tr in traces])
        L = np.stack([progressive_validation_loss(tr.rewards[:T]) for tr in traces])
        idx = np.asarray(pts) - 1
        summary["policies"][policy] = {
            "mean_regret": R[:, idx].mean(axis=0).tolist(),
            "std_regret": R[:, idx].std(axis=0).tolist(),
            "mean_loss": L[:, idx].mean(axis=0).tolist(),
            "seeds": [tr.seed for tr in traces],
            "final_regret": R[:, -1].tolist(),
        }
        mean_r, mean_l = R.mean(axis=0), L.mean(axis=0)
        for t in pts:
            plot_rows.append((policy, t, mean_r[t - 1], mean_l[t - 1]))
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
    with open(out / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "t", "mean_regret", "mean_loss"])
        for row in plot_rows:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def divergence_report(experts, context_weights=None, contexts=None) -> DivergenceMatrix:
    if context_weights is not None:
        return exact_divergences(experts, context_weights)
    if contexts is None:
        raise ValueError("need context weights or observed contexts")
    return empirical_divergences(experts, contexts)
